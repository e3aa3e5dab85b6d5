"""Built-in numerical checks: tape gradients versus finite differences, and the
abduction/counterfactual identities of every noise model."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import models, scm
from .autodiff import Tensor

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-12


def _primitive_cases(rng):
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    S = rng.normal(size=(2, 4, 4))
    g, b = rng.normal(size=4), rng.normal(size=4)
    X = rng.normal(size=(3, 4))
    W = rng.normal(size=(3, 4))
    C = rng.normal(size=(3, 2))
    return {
        "matmul": (lambda t: ad.sum_(ad.matmul(t, Tensor(B)) * Tensor(C)), A),
        "batched_matmul": (lambda t: _sq(ad.matmul(t, Tensor(S))), S.copy()),
        "add_broadcast": (lambda t: ad.sum_((Tensor(X) + t) * Tensor(W)), g),
        "sub": (lambda t: ad.sum_((t - Tensor(X)) * (t - Tensor(X))), A),
        "mul": (lambda t: ad.sum_(t * Tensor(X) * t), A),
        "scale": (lambda t: ad.sum_(ad.scale(t, 0.37) * Tensor(W)), A),
        "tanh": (lambda t: ad.sum_(ad.tanh(t) * Tensor(W)), A),
        "sigmoid": (lambda t: ad.sum_(ad.sigmoid(t) * Tensor(W)), A),
        "gelu": (lambda t: ad.sum_(ad.gelu(t) * Tensor(W)), A),
        "softmax_causal": (lambda t: ad.sum_(ad.softmax_causal(t) * Tensor(np.tril(S + 1.0))), S.copy()),
        "layer_norm_x": (lambda t: ad.sum_(ad.layer_norm(t, Tensor(g), Tensor(b)) * Tensor(W)), X),
        "layer_norm_gain": (lambda t: ad.sum_(ad.layer_norm(Tensor(X), t, Tensor(b)) * Tensor(W)), g),
        "layer_norm_bias": (lambda t: ad.sum_(ad.layer_norm(Tensor(X), Tensor(g), t) * Tensor(W)), b),
        "sum_axis": (lambda t: _sq(ad.sum_(t, axis=0)), A),
        "mean": (lambda t: ad.mean(t * t), A),
        "reshape": (lambda t: ad.sum_(ad.reshape(t, (4, 3)) * Tensor(W.reshape(4, 3))), A),
        "transpose": (lambda t: ad.sum_(ad.transpose(t, (1, 0)) * Tensor(W.T)), A),
        "getitem": (lambda t: _sq(t[1:, ::2]), A),
        "concat": (lambda t: ad.sum_(ad.concat([t, t * t], axis=1) * Tensor(np.hstack([W, W]))), A),
        "stack": (lambda t: _sq(ad.stack([t, ad.tanh(t)], axis=0)), A),
    }


def _sq(t):
    return ad.sum_(t * t)


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Relative error of every primitive's VJP against central differences."""
    rng = np.random.default_rng(seed)
    return {name: ad.grad_check(fn, x) for name, (fn, x) in _primitive_cases(rng).items()}


def transformer_grad_error(cfg: models.TransformerConfig | None = None, T: int = 6, seed: int = 0,
                           param_scale: float | None = None) -> float:
    """Finite-difference check of the full forward pass with respect to all parameters.

    Parameters are redrawn at ``param_scale`` so gradients are well above
    finite-difference noise. Without layer norm the residual stream grows
    fast with scale and third-order truncation error dominates, so the
    default drops from 0.5 to 0.3.
    """
    cfg = cfg or models.TransformerConfig(layers=2, heads=2, hidden=8, input_dim=1, max_context=T)
    if param_scale is None:
        param_scale = 0.5 if cfg.use_layer_norm else 0.3
    rng = np.random.default_rng(seed)
    state = models.init_model(cfg, seed)
    names = sorted(state)
    shapes = [state[k].shape for k in names]
    sizes = [state[k].size for k in names]
    flat = rng.normal(0.0, param_scale, size=sum(sizes))
    tokens = rng.normal(size=(2, T, cfg.input_dim))
    target = rng.normal(size=(2, T, cfg.input_dim))

    def fn(theta: Tensor) -> Tensor:
        params, off = {}, 0
        for k, shp, sz in zip(names, shapes, sizes):
            params[k] = ad.reshape(theta[off:off + sz], shp)
            off += sz
        out, _ = models.gpt2_forward(params, tokens, cfg, trace=False, requires_grad=True)
        d = out - Tensor(target)
        return ad.mean(d * d)

    return ad.grad_check(fn, flat)


def oracle_suite(count: int = 10_000, seed: int = 0) -> dict[str, float]:
    """Max deviation of the abduction round trip and counterfactual consistency per noise kind.

    Round trip: ``T(f, T^-1(f, y)) == y``. Consistency: intervening on the
    factual value returns the factual outcome. The multiplicative kind also
    checks ``y_cf == (x_cf / x) y``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for tag in scm.Kind:
        kind = scm.NoiseModelKind.of(tag)
        beta = rng.normal(0, 1, count)
        x = rng.uniform(-6, 6, count)
        x_cf = rng.uniform(-6, 6, count)
        if tag is scm.Kind.MULTIPLICATIVE:
            # keep f(x) away from zero, where abduction divides by it
            x = np.where(np.abs(x) < 0.1, 0.1, x)
            beta = np.where(np.abs(beta) < 0.1, 0.1, beta)
        u = rng.normal(0, 1, count)
        y = scm.transform(kind, beta * x, u)
        u_hat = scm.abduct_noise(kind, beta * x, y)
        y_back = scm.transform(kind, beta * x, u_hat)
        out[f"{tag.value}:round_trip"] = float(np.max(np.abs(y_back - y) / np.maximum(1.0, np.abs(y))))
        same = scm.counterfactual(kind, beta * x, beta * x, y)
        out[f"{tag.value}:consistency"] = float(np.max(np.abs(same - y) / np.maximum(1.0, np.abs(y))))
        if tag is scm.Kind.MULTIPLICATIVE:
            cf = scm.counterfactual(kind, beta * x_cf, beta * x, y)
            ref = (x_cf / x) * y
            out["multiplicative:ratio_identity"] = float(np.max(np.abs(cf - ref) / np.maximum(1.0, np.abs(ref))))
    return out
