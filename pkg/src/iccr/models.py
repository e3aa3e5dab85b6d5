"""GPT-2 style decoder and recurrent baselines on real-valued token sequences.

Parameters live in a plain ``dict[str, np.ndarray]`` (the model state). The
forward functions wrap them in :class:`~iccr.autodiff.Tensor` so the same code
serves inference and training.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ModelState = dict  # name -> np.ndarray

VARIANTS = ("full", "attention_only", "mlp_only")


class ContextOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 12
    heads: int = 8
    hidden: int = 256
    input_dim: int = 1
    max_context: int = 102
    variant: str = "full"
    use_layer_norm: bool = True
    paper_literal_attention: bool = False
    head_dim_mode: str = "split"
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.layers, self.heads, self.hidden, self.input_dim, self.max_context) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.head_dim_mode not in ("split", "full"):
            raise ValueError(f"head_dim_mode must be split or full, got {self.head_dim_mode!r}")
        if self.head_dim_mode == "split" and self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads if self.head_dim_mode == "split" else self.hidden

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TransformerConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class RNNConfig:
    kind: str = "lstm"
    layers: int = 2
    hidden: int = 256
    input_dim: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("elman", "lstm", "gru"):
            raise ValueError(f"unknown RNN kind {self.kind!r}")
        if self.layers < 1 or self.hidden < 1 or self.input_dim < 1:
            raise ValueError("RNN dimensions must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ForwardTrace:
    """Per-layer activations for one forward pass.

    ``resid_mid[l]`` is the stream after layer ``l``'s attention (``R_l``),
    ``resid_post[l]`` after its MLP (``X_l``); ``resid_pre`` is ``X_0``.
    ``attn[l]`` has shape ``(B, H, T, T)``.
    """

    resid_pre: np.ndarray | None = None
    resid_mid: list = field(default_factory=list)
    resid_post: list = field(default_factory=list)
    attn: list = field(default_factory=list)
    attn_out: list = field(default_factory=list)
    mlp_out: list = field(default_factory=list)
    output: np.ndarray | None = None


# ------------------------------------------------------------ transformer


def _shapes(cfg: TransformerConfig) -> dict[str, tuple[int, ...]]:
    D, E, H, hd = cfg.hidden, cfg.input_dim, cfg.heads, cfg.head_dim
    shapes = {"W_E": (E, D), "W_P": (cfg.max_context, D)}
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        if cfg.variant != "mlp_only":
            shapes.update({
                p + "W_Q": (D, H * hd), p + "b_Q": (H * hd,),
                p + "W_K": (D, H * hd), p + "b_K": (H * hd,),
                p + "W_V": (D, H * hd), p + "b_V": (H * hd,),
                p + "W_O": (H * hd, D), p + "b_O": (D,),
            })
            if cfg.use_layer_norm:
                shapes.update({p + "ln1.g": (D,), p + "ln1.b": (D,)})
        if cfg.variant != "attention_only":
            M = cfg.mlp_ratio * D
            shapes.update({p + "W_in": (D, M), p + "b_in": (M,), p + "W_out": (M, D), p + "b_out": (D,)})
            if cfg.use_layer_norm:
                shapes.update({p + "ln2.g": (D,), p + "ln2.b": (D,)})
    if cfg.use_layer_norm:
        shapes.update({"ln_f.g": (D,), "ln_f.b": (D,)})
    shapes.update({"W_U": (D, E), "b_U": (E,)})
    return shapes


def param_count(cfg: TransformerConfig) -> int:
    """Closed-form parameter count."""
    D, E, H, hd, L = cfg.hidden, cfg.input_dim, cfg.heads, cfg.head_dim, cfg.layers
    attn = 3 * (D * H * hd + H * hd) + H * hd * D + D
    mlp = 2 * cfg.mlp_ratio * D * D + cfg.mlp_ratio * D + D
    ln = 2 * D if cfg.use_layer_norm else 0
    per_layer = 0
    if cfg.variant != "mlp_only":
        per_layer += attn + ln
    if cfg.variant != "attention_only":
        per_layer += mlp + ln
    return E * D + cfg.max_context * D + L * per_layer + ln + D * E + E


def init_model(cfg: TransformerConfig | RNNConfig, seed: int | None = None) -> ModelState:
    """Gaussian init, std 0.02; residual projections scaled by ``1/sqrt(2L)``."""
    if isinstance(cfg, RNNConfig):
        return init_rnn(cfg, seed)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.layers)
    state = {}
    for name, shape in _shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            state[name] = np.ones(shape)
        elif leaf.startswith("b"):
            state[name] = np.zeros(shape)
        elif leaf in ("W_O", "W_out"):
            state[name] = rng.normal(0.0, resid_std, size=shape)
        else:
            state[name] = rng.normal(0.0, 0.02, size=shape)
    return state


def _params(state: ModelState, requires_grad: bool) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
            for k, v in state.items()}


def _ln(x, P, prefix, cfg):
    if not cfg.use_layer_norm:
        return x
    return ad.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])


def _attention(x: Tensor, P, l: int, cfg: TransformerConfig, trace: ForwardTrace | None) -> Tensor:
    B, T, _ = x.shape
    H, hd = cfg.heads, cfg.head_dim
    p = f"blocks.{l}."

    def heads(t):
        return t.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

    q = heads(x @ P[p + "W_Q"] + P[p + "b_Q"])
    k = heads(x @ P[p + "W_K"] + P[p + "b_K"])
    v = heads(x @ P[p + "W_V"] + P[p + "b_V"])
    logits = q @ k.transpose(0, 1, 3, 2)
    if not cfg.paper_literal_attention:
        logits = ad.scale(logits, 1.0 / math.sqrt(hd))
    A = ad.softmax_causal(logits)
    if trace is not None:
        trace.attn.append(A.data)
    mixed = (A @ v).transpose(0, 2, 1, 3).reshape(B, T, H * hd)
    return mixed @ P[p + "W_O"] + P[p + "b_O"]


def _mlp(x: Tensor, P, l: int) -> Tensor:
    p = f"blocks.{l}."
    h = ad.gelu(x @ P[p + "W_in"] + P[p + "b_in"])
    return h @ P[p + "W_out"] + P[p + "b_out"]


def gpt2_forward(state: ModelState, tokens, cfg: TransformerConfig, *, trace: bool = True,
                 requires_grad: bool = False):
    """Run the decoder on ``tokens`` of shape ``(T, E)`` or ``(B, T, E)``.

    Returns ``(predictions, trace)``; predictions match the token shape. With
    ``requires_grad`` the predictions are a :class:`Tensor` on the active tape
    and ``state`` may hold Tensors (the caller's parameters).
    """
    tokens = np.asarray(tokens, dtype=float)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    B, T, E = tokens.shape
    if T > cfg.max_context:
        raise ContextOverflowError(f"sequence length {T} exceeds max_context {cfg.max_context}")
    if E != cfg.input_dim:
        raise ValueError(f"token dim {E} != input_dim {cfg.input_dim}")
    P = _params(state, requires_grad)
    tr = ForwardTrace() if trace else None

    x = Tensor(tokens) @ P["W_E"] + P["W_P"][:T]
    if tr is not None:
        tr.resid_pre = x.data
    for l in range(cfg.layers):
        if cfg.variant != "mlp_only":
            a = _attention(_ln(x, P, f"blocks.{l}.ln1", cfg), P, l, cfg, tr)
            x = x + a
        if tr is not None:
            tr.attn_out.append(a.data if cfg.variant != "mlp_only" else np.zeros_like(x.data))
            tr.resid_mid.append(x.data)
        if cfg.variant != "attention_only":
            m = _mlp(_ln(x, P, f"blocks.{l}.ln2", cfg), P, l)
            x = x + m
        if tr is not None:
            tr.mlp_out.append(m.data if cfg.variant != "attention_only" else np.zeros_like(x.data))
            tr.resid_post.append(x.data)
    out = _ln(x, P, "ln_f", cfg) @ P["W_U"] + P["b_U"]
    if tr is not None:
        tr.output = out.data
    if not requires_grad:
        out = out.data[0] if squeeze else out.data
    elif squeeze:
        out = out[0]
    return out, tr


# ------------------------------------------------------------------- RNNs

_GATES = {"elman": ("h",), "lstm": ("f", "i", "o", "g"), "gru": ("r", "z", "n")}


def init_rnn(cfg: RNNConfig, seed: int | None = None) -> ModelState:
    """Uniform init on ``[-1/sqrt(D), 1/sqrt(D)]`` as in common RNN libraries."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    D, E = cfg.hidden, cfg.input_dim
    bound = 1.0 / math.sqrt(D)
    state = {}
    for l in range(cfg.layers):
        d_in = E if l == 0 else D
        for g in _GATES[cfg.kind]:
            state[f"rnn.{l}.W_{g}"] = rng.uniform(-bound, bound, size=(d_in, D))
            state[f"rnn.{l}.U_{g}"] = rng.uniform(-bound, bound, size=(D, D))
            state[f"rnn.{l}.b_{g}"] = rng.uniform(-bound, bound, size=(D,))
    state["W_ho"] = rng.uniform(-bound, bound, size=(D, E))
    state["b_o"] = np.zeros(E)
    return state


def rnn_cell(kind: str, P, l: int, x_t, h, c=None):
    """One recurrent step; returns ``(h, c)`` (``c`` is None unless LSTM)."""
    p = f"rnn.{l}."

    def pre(g, hin):
        return x_t @ P[p + f"W_{g}"] + hin @ P[p + f"U_{g}"] + P[p + f"b_{g}"]

    if kind == "elman":
        return ad.tanh(pre("h", h)), None
    if kind == "lstm":
        f = ad.sigmoid(pre("f", h))
        i = ad.sigmoid(pre("i", h))
        o = ad.sigmoid(pre("o", h))
        g = ad.tanh(pre("g", h))
        c = f * c + i * g
        return o * ad.tanh(c), c
    if kind == "gru":
        r = ad.sigmoid(pre("r", h))
        z = ad.sigmoid(pre("z", h))
        n = ad.tanh(x_t @ P[p + "W_n"] + (r * h) @ P[p + "U_n"] + P[p + "b_n"])
        return (1.0 - z) * n + z * h, None
    raise ValueError(f"unknown RNN kind {kind!r}")


def rnn_forward(state: ModelState, tokens, cfg: RNNConfig, *, requires_grad: bool = False):
    """Stacked recurrent network with a linear read-out at every position."""
    tokens = np.asarray(tokens, dtype=float)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    B, T, _ = tokens.shape
    P = _params(state, requires_grad)
    seq = [Tensor(tokens[:, t]) for t in range(T)]
    for l in range(cfg.layers):
        h = Tensor(np.zeros((B, cfg.hidden)))
        c = Tensor(np.zeros((B, cfg.hidden))) if cfg.kind == "lstm" else None
        outs = []
        for x_t in seq:
            h, c = rnn_cell(cfg.kind, P, l, x_t, h, c)
            outs.append(h)
        seq = outs
    hs = ad.stack(seq, axis=1)
    out = hs @ P["W_ho"] + P["b_o"]
    if not requires_grad:
        return out.data[0] if squeeze else out.data
    return out[0] if squeeze else out


def forward(state: ModelState, tokens, cfg, *, requires_grad: bool = False):
    """Predictions only, for either model family."""
    if isinstance(cfg, RNNConfig):
        return rnn_forward(state, tokens, cfg, requires_grad=requires_grad)
    return gpt2_forward(state, tokens, cfg, trace=False, requires_grad=requires_grad)[0]


# --------------------------------------------------------------- read-out


def readout_prediction(predictions, task: str, mask=None):
    """Pick the predicted value(s) the loss and metrics look at.

    ``regression`` and ``continuation`` read the final position. ``sde`` reads
    every masked position; ``predictions`` may be batched on a leading axis.
    """
    if task in ("regression", "counterfactual", "continuation"):
        return predictions[..., -1, :]
    if task == "sde":
        if mask is None:
            raise ValueError("sde read-out needs a mask")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != predictions.shape[-2]:
            raise ValueError(f"mask length {mask.shape[0]} != sequence length {predictions.shape[-2]}")
        return predictions[..., np.flatnonzero(mask), :]
    raise ValueError(f"unknown task {task!r}")
