"""Online training loop: streamed batches, masked MSE, AdamW, checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datagen, models, sde
from .autodiff import Tensor

MAGIC = b"ICCK"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 50_000
    batch: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    eval_every: int = 1000
    checkpoint_every: int = 1000
    loss_mask: str = "final_token"
    clip_norm: float | None = None
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch < 1:
            raise ValueError("need lr >= 0, steps >= 0, batch >= 1")
        if self.loss_mask not in ("final_token", "completion_mask"):
            raise ValueError(f"unknown loss_mask {self.loss_mask!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid AdamW hyper-parameters")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossTrace:
    steps: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    eval_mse: list = field(default_factory=list)

    def record(self, step: int, loss: float, seconds: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} is not after {self.steps[-1]}")
        if not math.isfinite(loss):
            raise ValueError(f"non-finite loss at step {step}")
        self.steps.append(step)
        self.train_mse.append(loss)
        self.wall.append(seconds)

    def to_dict(self, with_wall: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_wall:
            d.pop("wall")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossTrace":
        return cls(**{k: list(v) for k, v in d.items()})


@dataclass
class Checkpoint:
    model_cfg: object
    params: dict
    m: dict
    v: dict
    step: int
    cursor: int
    digest: str


# ------------------------------------------------------------------- loss


def mse_loss(preds, targets, mask=None):
    """Mean squared error per ``(batch, E)`` entry.

    Without a mask ``preds`` and ``targets`` are ``(B, E)``. With a position
    mask over axis -2 the mean runs over selected positions times ``E``.
    Returns a :class:`Tensor` when ``preds`` is one, else a float.
    """
    is_tensor = isinstance(preds, Tensor)
    p = preds if is_tensor else Tensor(np.asarray(preds, dtype=float))
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != p.shape[-2]:
            raise ValueError(f"mask length {mask.shape[-1]} != positions {p.shape[-2]}")
        if not mask.any():
            raise ValueError("loss mask selects no positions")
        w = np.broadcast_to(mask[..., None], p.shape).astype(float)
        diff = p - Tensor(t)
        loss = ad.scale((diff * diff * Tensor(w)).sum(), 1.0 / w.sum())
    else:
        if p.data.size == 0:
            raise ValueError("empty predictions")
        diff = p - Tensor(t)
        loss = (diff * diff).mean()
    return loss if is_tensor else float(loss.data)


# -------------------------------------------------------------- optimiser


def init_moments(params: dict) -> tuple[dict, dict]:
    return ({k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(params: dict, grads: dict, m: dict, v: dict, cfg: TrainConfig, t: int):
    """One decoupled-weight-decay Adam update. Returns new ``(params, m, v)``."""
    if t < 1:
        raise ValueError("AdamW step counter starts at 1")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for {name} at step {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        mm = b1 * m[name] + (1.0 - b1) * g
        vv = b2 * v[name] + (1.0 - b2) * g * g
        p = p * (1.0 - cfg.lr * cfg.weight_decay)
        new_p[name] = p - cfg.lr * (mm / c1) / (np.sqrt(vv / c2) + cfg.eps)
        new_m[name], new_v[name] = mm, vv
    return new_p, new_m, new_v


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


# ---------------------------------------------------------------- batches


def constrain_fixed_z(gen_cfg):
    """With a fixed index token ``z`` the prompt must hold at least ``z + 1`` pairs."""
    if isinstance(gen_cfg, datagen.GenConfig) and gen_cfg.fixed_z is not None:
        lo, hi = gen_cfg.n_range
        if lo <= gen_cfg.fixed_z:
            lo = gen_cfg.fixed_z + 1
            if lo > hi:
                raise datagen.ConfigError(f"fixed_z={gen_cfg.fixed_z} leaves no valid n in {gen_cfg.n_range}")
            return gen_cfg.replace(n_range=(lo, hi))
    return gen_cfg


def make_batch(gen_cfg, step: int, size: int):
    """``(tokens, targets, mask)`` for stream position ``step``; mask is None for final-token tasks."""
    if isinstance(gen_cfg, sde.SDEConfig):
        return sde.sde_batch(gen_cfg, step, size)
    b = datagen.sample_batch(gen_cfg, step, size)
    return b.tokens, b.targets, None


def _loss_on(params, tokens, targets, mask, model_cfg):
    """Forward pass on the active tape; returns the loss Tensor."""
    preds = models.forward(params, tokens, model_cfg, requires_grad=True)
    if mask is None:
        return mse_loss(preds[:, -1, :], targets)
    return mse_loss(preds, targets, mask)


def loss_and_grads(state: dict, tokens, targets, mask, model_cfg):
    with ad.Tape() as tape:
        P = {k: Tensor(v, requires_grad=True, name=k) for k, v in state.items()}
        loss = _loss_on(P, tokens, targets, mask, model_cfg)
    g = ad.backward(loss, tape, list(P.values()))
    return float(loss.data), {k: g[P[k]] for k in state}


# ------------------------------------------------------------- checkpoint


def config_digest(model_cfg, gen_cfg, train_cfg) -> str:
    blob = json.dumps({"model": _cfg_dict(model_cfg), "gen": _cfg_dict(gen_cfg),
                       "train": train_cfg.to_dict()}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _cfg_dict(cfg) -> dict:
    d = cfg.to_dict()
    d["__type__"] = type(cfg).__name__
    return d


def _model_cfg_from(d: dict):
    d = dict(d)
    kind = d.pop("__type__")
    return {"TransformerConfig": models.TransformerConfig, "RNNConfig": models.RNNConfig}[kind](**d)


def _write_table(fh, table: dict) -> None:
    fh.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_table(fh) -> dict:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, ln).decode()
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape).astype(float)
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Little-endian: magic, version, digest, model config, step, cursor, then params/m/v tables."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    digest = ckpt.digest.encode()
    buf.write(struct.pack("<H", len(digest)) + digest)
    cfg = json.dumps(_cfg_dict(ckpt.model_cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<QQ", ckpt.step, ckpt.cursor))
    for table in (ckpt.params, ckpt.m, ckpt.v):
        _write_table(buf, table)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    with Path(path).open("rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        digest = _read_exact(fh, ln).decode()
        (ln,) = struct.unpack("<I", _read_exact(fh, 4))
        model_cfg = _model_cfg_from(json.loads(_read_exact(fh, ln)))
        step, cursor = struct.unpack("<QQ", _read_exact(fh, 16))
        params, m, v = _read_table(fh), _read_table(fh), _read_table(fh)
    return Checkpoint(model_cfg, params, m, v, step, cursor, digest)


# ------------------------------------------------------------------ train


def train(model_cfg, gen_cfg, train_cfg: TrainConfig, *, resume: Checkpoint | None = None,
          checkpoint_dir=None, eval_fn=None, log=None) -> tuple[Checkpoint, LossTrace]:
    """Optimise on freshly generated batches; batch ``s`` is stream index ``s``.

    ``eval_fn(params) -> float`` is called every ``eval_every`` steps. On a
    non-finite loss the partial trace is attached to the raised error and
    written to ``checkpoint_dir/trace_partial.json`` when a directory is given.
    """
    gen_cfg = constrain_fixed_z(gen_cfg)
    if isinstance(model_cfg, models.TransformerConfig):
        longest = (2 * gen_cfg.n_range[1] + 2 if isinstance(gen_cfg, datagen.GenConfig)
                   else 4 * (gen_cfg.n_events + (1 if gen_cfg.equidistant else 0)) + 1)
        if longest > model_cfg.max_context:
            raise ValueError(f"prompts up to length {longest} exceed max_context {model_cfg.max_context}")
    digest = config_digest(model_cfg, gen_cfg, train_cfg)
    if resume is not None:
        if resume.digest != digest:
            raise CheckpointError("checkpoint was produced under a different configuration")
        params, m, v, start = resume.params, resume.m, resume.v, resume.step
    else:
        params = models.init_model(model_cfg)
        m, v = init_moments(params)
        start = 0
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    trace = LossTrace()

    def snapshot(step):
        return Checkpoint(model_cfg, params, m, v, step, step, digest)

    for step in range(start, train_cfg.steps):
        t0 = time.perf_counter()
        tokens, targets, mask = make_batch(gen_cfg, step, train_cfg.batch)
        if train_cfg.loss_mask == "final_token":
            mask = None
        try:
            loss, grads = loss_and_grads(params, tokens, targets, mask, model_cfg)
            if not math.isfinite(loss):
                raise ad.NumericError(f"loss is {loss}")
            if train_cfg.clip_norm is not None:
                grads = clip_global_norm(grads, train_cfg.clip_norm)
            params, m, v = adamw_step(params, grads, m, v, train_cfg, step + 1)
        except (ad.NumericError, TrainingDivergedError) as exc:
            if ckdir is not None:
                (ckdir / "trace_partial.json").write_text(json.dumps(trace.to_dict()))
            raise TrainingDivergedError(f"training diverged at step {step + 1}: {exc}", trace) from exc
        trace.record(step + 1, loss, time.perf_counter() - t0)
        done = step + 1
        if eval_fn is not None and train_cfg.eval_every and done % train_cfg.eval_every == 0:
            trace.eval_steps.append(done)
            trace.eval_mse.append(float(eval_fn(params)))
        if ckdir is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(done), ckdir / f"step_{done:07d}.icck")
        if log is not None:
            log(done, loss)
    final = snapshot(max(start, train_cfg.steps))
    if ckdir is not None:
        save_checkpoint(final, ckdir / "final.icck")
    return final, trace


# ------------------------------------------------------- phase transitions


def detect_phase_transition(trace, threshold: float, window: int = 1, patience: int | None = None):
    """First step whose forward-looking window mean drops below ``threshold``
    and stays there for ``patience`` further windows (default: the rest of the trace).

    ``trace`` is a :class:`LossTrace` or a sequence of losses indexed from 0.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(trace, LossTrace):
        steps, losses = np.asarray(trace.steps), np.asarray(trace.train_mse, dtype=float)
    else:
        losses = np.asarray(trace, dtype=float)
        steps = np.arange(len(losses))
    if len(losses) < window:
        return None
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
    below = smooth < threshold
    horizon = len(smooth) if patience is None else patience + 1
    # stays[i]: below[i : i + horizon] all true (truncated at the end)
    run = np.zeros(len(below) + 1, dtype=int)
    for i in range(len(below) - 1, -1, -1):
        run[i] = run[i + 1] + 1 if below[i] else 0
    for i in np.flatnonzero(below):
        if run[i] >= min(horizon, len(below) - i):
            return int(steps[i])
    return None
