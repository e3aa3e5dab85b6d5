"""Structural causal models, noise abduction, and reference oracles.

Every invertible mechanism is written as ``y = T(f(x), u)``. Abduction inverts
``T`` in its noise argument; a counterfactual re-applies ``T`` with the
abducted noise and the intervened parent value.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

MULT_NORMALIZER = math.sqrt(3410.4)
LINK_TAU = 1.0 / 13.0
MULT_GUARD = 1e-9


class AbductionError(ValueError):
    """Observation lies outside the domain where ``T(f(x), .)`` is invertible."""


class DegenerateDesignError(ValueError):
    pass


class Kind(str, enum.Enum):
    LINEAR_ADDITIVE = "linear_additive"
    ANM = "anm"
    MULTIPLICATIVE = "multiplicative"
    EXPONENTIAL = "exponential"
    TANH_LINK = "tanh_link"
    SIGMOID_LINK = "sigmoid_link"


@dataclass(frozen=True)
class NoiseModelKind:
    tag: Kind = Kind.LINEAR_ADDITIVE
    tau: float = LINK_TAU
    normalizer: float = MULT_NORMALIZER

    def __post_init__(self):
        object.__setattr__(self, "tag", Kind(self.tag))
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.normalizer > 0:
            raise ValueError(f"normalizer must be positive, got {self.normalizer}")

    @classmethod
    def of(cls, tag: str | Kind, **kw) -> "NoiseModelKind":
        return cls(Kind(tag), **kw)


@dataclass
class LinearSCM:
    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.theta.shape != self.beta.shape or self.beta.size < 1:
            raise ValueError("theta and beta must be non-empty vectors of equal length")


@dataclass
class FactualPair:
    x: np.ndarray
    y: np.ndarray
    u_x: np.ndarray | None = None
    u_y: np.ndarray | None = None


@dataclass
class CFQuery:
    z: int
    x_cf: np.ndarray
    n: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.z < 1 or (self.n is not None and self.z > self.n):
            raise ValueError(f"z={self.z} outside 1..{self.n}")


def _vec(a) -> np.ndarray:
    return np.asarray(a, dtype=float)


# ---------------------------------------------------------------- mechanisms


def transform(kind: NoiseModelKind, f_x, u) -> np.ndarray:
    """``T(f(x), u)`` for the mechanism family of ``kind``."""
    f_x, u = _vec(f_x), _vec(u)
    tag = kind.tag
    if tag in (Kind.LINEAR_ADDITIVE, Kind.ANM):
        return f_x + u
    if tag is Kind.MULTIPLICATIVE:
        return f_x * u / kind.normalizer
    if tag is Kind.EXPONENTIAL:
        return np.exp(f_x + u)
    if tag is Kind.TANH_LINK:
        return np.tanh(kind.tau * (f_x + u))
    if tag is Kind.SIGMOID_LINK:
        return 1.0 / (1.0 + np.exp(-kind.tau * (f_x + u)))
    raise ValueError(f"unknown noise model {tag!r}")


def abduct_noise(kind: NoiseModelKind, f_x, y) -> np.ndarray:
    """Invert ``T(f_x, .)`` at ``y``."""
    f_x, y = _vec(f_x), _vec(y)
    tag = kind.tag
    if tag in (Kind.LINEAR_ADDITIVE, Kind.ANM):
        return y - f_x
    if tag is Kind.MULTIPLICATIVE:
        bad = np.abs(f_x) <= MULT_GUARD
        if np.any(bad):
            raise AbductionError(f"multiplicative abduction needs |f(x)| > {MULT_GUARD}; "
                                 f"violated at components {np.flatnonzero(bad).tolist()}")
        return y * kind.normalizer / f_x
    if tag is Kind.EXPONENTIAL:
        bad = ~(y > 0)
        if np.any(bad):
            raise AbductionError(f"exponential abduction needs y > 0; "
                                 f"violated at components {np.flatnonzero(bad).tolist()}")
        return np.log(y) - f_x
    if tag is Kind.TANH_LINK:
        bad = ~(np.abs(y) < 1)
        if np.any(bad):
            raise AbductionError(f"tanh link needs |y| < 1; violated at components {np.flatnonzero(bad).tolist()}")
        return np.arctanh(y) / kind.tau - f_x
    if tag is Kind.SIGMOID_LINK:
        bad = ~((y > 0) & (y < 1))
        if np.any(bad):
            raise AbductionError(f"sigmoid link needs 0 < y < 1; violated at components {np.flatnonzero(bad).tolist()}")
        return (np.log(y) - np.log1p(-y)) / kind.tau - f_x
    raise ValueError(f"unknown noise model {tag!r}")


def counterfactual(kind: NoiseModelKind, f_xcf, f_x, y) -> np.ndarray:
    return transform(kind, f_xcf, abduct_noise(kind, f_x, y))


def apply_link(kind: NoiseModelKind, beta, u_x, u_y) -> tuple[np.ndarray, np.ndarray]:
    """Generate ``(x, y)`` from exogenous noise with ``f(x) = beta * x``."""
    x = _vec(u_x)
    return x, transform(kind, _vec(beta) * x, u_y)


def linear_cf(beta, x, y, x_cf) -> np.ndarray:
    beta, x, y, x_cf = map(_vec, (beta, x, y, x_cf))
    if not (beta.shape == x.shape == y.shape == x_cf.shape):
        raise ValueError("linear_cf: length mismatch")
    # same association as counterfactual() so the two agree bit for bit
    return beta * x_cf + (y - beta * x)


# ------------------------------------------------------------------------ OLS


def ols_fit(xs, ys) -> float:
    xs, ys = _vec(xs), _vec(ys)
    if xs.shape != ys.shape or xs.size < 2:
        raise DegenerateDesignError("ols_fit needs at least two paired observations")
    xc = xs - xs.mean()
    denom = float(np.dot(xc, xc))
    if denom == 0.0:
        raise DegenerateDesignError("all x values are equal")
    return float(np.dot(xc, ys - ys.mean()) / denom)


def ols_fit_batch(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised ``ols_fit`` over the trailing axis. Degenerate rows give NaN."""
    xc = xs - xs.mean(axis=-1, keepdims=True)
    yc = ys - ys.mean(axis=-1, keepdims=True)
    denom = (xc * xc).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, (xc * yc).sum(axis=-1) / np.where(denom > 0, denom, 1.0), np.nan)


def ols_cf(beta_hat, x_z, y_z, x_cf):
    return beta_hat * (x_cf - x_z) + y_z


# ----------------------------------------------------------- Bayes oracle


@dataclass(frozen=True)
class QuadratureGrid:
    """Grid for the posterior-predictive integral.

    ``resolution`` points per axis. The theta axis starts uniform on
    ``theta_support`` and is re-centred ``refinements`` times on the region
    carrying non-negligible posterior mass. For each theta, the beta axis spans
    ``beta_halfwidth`` conditional standard deviations around the conditional
    posterior mean. Explicit ``theta_values``/``beta_values`` bypass all of this.
    """

    resolution: int = 256
    theta_support: tuple[float, float] = (-6.0, 6.0)
    beta_halfwidth: float = 6.0
    refinements: int = 2
    theta_values: tuple[float, ...] | None = None
    beta_values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.theta_values is None and self.resolution < 64:
            raise ValueError("grid resolution must be at least 64 points per axis")


def _log_joint(theta: np.ndarray, beta: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """log p(theta, beta, data) up to a constant, under the flat theta prior.

    ``theta`` and ``beta`` broadcast against each other.
    """
    th = theta[..., None]
    b = beta[..., None]
    lx = -0.5 * ((xs - th) ** 2).sum(axis=-1)
    ly = -0.5 * ((ys - b * xs - th) ** 2).sum(axis=-1)
    lb = -0.5 * (beta - theta) ** 2
    return lx + ly + lb


def _beta_conditional(theta: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    prec = 1.0 + float(np.dot(xs, xs))
    mean_ = (theta + ((ys[None, :] - theta[:, None]) * xs[None, :]).sum(axis=1)) / prec
    return mean_, 1.0 / math.sqrt(prec)


def _theta_marginal(theta: np.ndarray, xs: np.ndarray, ys: np.ndarray, grid: QuadratureGrid):
    """Log marginal over beta and the conditional mean of beta, per theta node."""
    mu, sd = _beta_conditional(theta, xs, ys)
    offsets = np.linspace(-grid.beta_halfwidth, grid.beta_halfwidth, grid.resolution)
    betas = mu[:, None] + sd * offsets[None, :]
    lj = _log_joint(theta[:, None], betas, xs, ys)
    log_w = logsumexp(lj, axis=1) + math.log(sd)
    w = np.exp(lj - lj.max(axis=1, keepdims=True))
    cond_mean = (w * betas).sum(axis=1) / w.sum(axis=1)
    return log_w, cond_mean


def _theta_posterior(xs: np.ndarray, ys: np.ndarray, grid: QuadratureGrid):
    """Theta nodes, their normalised posterior weights, and E[beta | theta, data]."""
    if grid.theta_values is not None:
        thetas = _vec(grid.theta_values)
        log_w, cond = _theta_marginal(thetas, xs, ys, grid)
        return thetas, np.exp(log_w - logsumexp(log_w)), cond

    lo, hi = grid.theta_support
    thetas = np.linspace(lo, hi, grid.resolution)
    for _ in range(grid.refinements):
        log_w, _ = _theta_marginal(thetas, xs, ys, grid)
        keep = np.flatnonzero(log_w > log_w.max() - 40.0)
        h = thetas[1] - thetas[0]
        thetas = np.linspace(max(lo, thetas[keep[0]] - h), min(hi, thetas[keep[-1]] + h), grid.resolution)
    log_w, cond = _theta_marginal(thetas, xs, ys, grid)
    trap = np.ones_like(thetas)
    trap[[0, -1]] = 0.5
    log_w = log_w + np.log(trap)
    return thetas, np.exp(log_w - logsumexp(log_w)), cond


def posterior_beta_mean(xs, ys, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """Posterior mean of beta for a one-dimensional prompt."""
    xs, ys = _vec(xs), _vec(ys)
    if grid.theta_values is not None and grid.beta_values is not None:
        thetas, betas = _vec(grid.theta_values), _vec(grid.beta_values)
        lj = _log_joint(thetas[:, None], betas[None, :], xs, ys)
        p = np.exp(lj - logsumexp(lj))
        return float((p * betas[None, :]).sum())
    _, p, cond = _theta_posterior(xs, ys, grid)
    return float((p * cond).sum())


def posterior_theta_mean(xs, ys, grid: QuadratureGrid = QuadratureGrid()) -> float:
    thetas, p, _ = _theta_posterior(_vec(xs), _vec(ys), grid)
    return float((p * thetas).sum())


def bayes_cf_mean(prompt, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """Posterior-predictive mean of ``beta (x_cf - x_z) + y_z``.

    ``prompt`` is a :class:`iccr.datagen.PromptRecord` with ``E == 1``; the
    posterior over (theta, beta) conditions on every in-context pair.
    """
    xs, ys, z, x_cf = _unpack_1d(prompt)
    b = posterior_beta_mean(xs, ys, grid)
    return float(b * (x_cf - xs[z - 1]) + ys[z - 1])


def bayes_continuation_mean(prompt, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """Posterior-predictive mean of a fresh observation ``beta x_cf + u``."""
    xs, ys, _, x_cf = _unpack_1d(prompt)
    thetas, p, cond = _theta_posterior(xs, ys, grid)
    return float((p * (cond * x_cf + thetas)).sum())


def _unpack_1d(prompt):
    meta = prompt.meta
    xs = np.asarray(meta["u_x"], dtype=float)
    if xs.ndim == 2:
        if xs.shape[1] != 1:
            raise NotImplementedError("Bayes oracle supports one-dimensional prompts only")
        xs = xs[:, 0]
    ys = np.asarray(prompt.ys, dtype=float).reshape(-1)
    x_cf = float(np.asarray(meta["x_cf"]).reshape(-1)[0])
    return xs, ys, int(meta["z"]), x_cf
