"""Lotka-Volterra SDE prompts with shared-noise counterfactual trajectories.

Prey ``x`` and predator ``y`` follow

    dx = (alpha x - beta x y) dt + sigma_x dU
    dy = (-gamma y + delta x y) dt + sigma_y dW

integrated by Euler-Maruyama. A counterfactual path reuses the factual
Brownian increments step for step and differs only in its initial condition.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import FORMAT_VERSION, stream

FORMAT = "iccr-sde"
DELIMITER = -7.0
MAX_RETRIES = 100

_T_THETA, _T_PARAMS, _T_INIT_CF, _T_EVENTS, _T_NOISE = range(21, 26)
_T_BATCH = 2000


class BoundsError(ValueError):
    pass


class BlowUpError(FloatingPointError):
    pass


class RejectionError(RuntimeError):
    """A path was not positive at an evaluated event time."""


@dataclass(frozen=True)
class SDEConfig:
    E: int = 1
    sigma_x: float = 0.05
    sigma_y: float = 0.05
    t_horizon: float = 1.0
    grid_steps: int = 1000
    n_events: int = 20
    event_range: tuple[float, float] = (0.0, 0.5)
    bounds: tuple[float, float, float, float] = (0.5, 2.0, 0.5, 2.0)
    theta_support: tuple[float, float] = (1.0, 2.0)
    equidistant: bool = False
    cf_init: str = "uniform"
    times_block: int | None = None
    with_times: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "event_range", tuple(float(v) for v in self.event_range))
        object.__setattr__(self, "bounds", tuple(float(v) for v in self.bounds))
        object.__setattr__(self, "theta_support", tuple(float(v) for v in self.theta_support))
        x_lo, x_hi, y_lo, y_hi = self.bounds
        lo, hi = self.event_range
        if self.grid_steps < 100:
            raise ValueError("grid_steps must be >= 100")
        if not (0 < x_lo < x_hi and 0 < y_lo < y_hi):
            raise BoundsError(f"bounds must be ordered and positive, got {self.bounds}")
        if not (0 <= lo < hi <= self.t_horizon):
            raise ValueError(f"event_range {self.event_range} must lie in [0, {self.t_horizon}]")
        if self.n_events < 2:
            raise ValueError("n_events must be >= 2")
        if self.n_events > self.grid_steps:
            raise ValueError("n_events cannot exceed grid_steps")
        if self.cf_init not in ("uniform", "beta"):
            raise ValueError(f"cf_init must be 'uniform' or 'beta', got {self.cf_init!r}")

    @property
    def dt(self) -> float:
        lo, hi = self.event_range
        return (hi - lo) / self.grid_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LVParams:
    alpha: np.ndarray
    beta_lv: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray

    def as_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in dataclasses.asdict(self).items()}


@dataclass
class ParamBounds:
    beta_lo: np.ndarray
    delta_lo: np.ndarray
    alpha_lo: np.ndarray | None = None
    alpha_hi: np.ndarray | None = None
    gamma_lo: np.ndarray | None = None
    gamma_hi: np.ndarray | None = None


@dataclass
class PathPair:
    times: np.ndarray          # (K+1,)
    factual: np.ndarray        # (K+1, 2, E): [:, 0] prey x, [:, 1] predator y
    counterfactual: np.ndarray
    increments: np.ndarray     # (K, 2, E) Brownian increments, already scaled by sqrt(dt)
    event_idx: np.ndarray      # grid indices of the event times
    init: np.ndarray           # (2, E)
    init_cf: np.ndarray
    params: LVParams
    theta: np.ndarray

    @property
    def event_times(self) -> np.ndarray:
        return self.times[self.event_idx]


# ---------------------------------------------------------------- bounds


def param_bounds(x0, y0, bounds, T: float, beta_lv=None, delta=None) -> ParamBounds:
    """Parameter intervals that keep the ODE solution's value at ``T`` in bounds.

    ``beta_lo``/``delta_lo`` make the alpha/gamma intervals non-empty. The
    alpha interval needs ``beta_lv``; the gamma interval needs ``delta``.
    """
    x_lo, x_hi, y_lo, y_hi = (float(b) for b in bounds)
    x0, y0 = np.asarray(x0, dtype=float), np.asarray(y0, dtype=float)
    if not (0 < x_lo < x_hi and 0 < y_lo < y_hi):
        raise BoundsError(f"unordered bounds {bounds}")
    if T <= 0:
        raise BoundsError("T must be positive")
    if np.any((x0 <= x_lo) | (x0 >= x_hi)) or np.any((y0 <= y_lo) | (y0 >= y_hi)):
        raise BoundsError(f"initial condition ({x0}, {y0}) outside the open bounds {bounds}")

    out = ParamBounds(
        beta_lo=np.full(x0.shape, math.log(x_hi / x_lo) / (T * (y_hi - y_lo))),
        delta_lo=np.full(y0.shape, math.log(y_hi / y_lo) / (T * (x_hi - x_lo))),
    )
    if beta_lv is not None:
        beta_lv = np.asarray(beta_lv, dtype=float)
        out.alpha_lo = np.log(x_hi / x0) / T + beta_lv * y_lo
        out.alpha_hi = np.log(x_lo / x0) / T + beta_lv * y_hi
    if delta is not None:
        delta = np.asarray(delta, dtype=float)
        out.gamma_lo = delta * x_lo - np.log(y_lo / y0) / T
        out.gamma_hi = delta * x_hi - np.log(y_hi / y0) / T
    return out


def beta_shape(theta) -> np.ndarray:
    """First Beta shape for initial conditions, chosen so the mode is ``theta - 1``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta >= 2.0):
        raise ValueError("theta must be < 2: the Beta shape 1/(2 - theta) is singular")
    return 1.0 / (2.0 - theta)


def sample_lv(theta, cfg: SDEConfig, rng: np.random.Generator) -> tuple[LVParams, np.ndarray]:
    """Draw parameters and a factual initial condition for latent ``theta``.

    Initial values are ``1 + Beta(1/(2 - theta), 2)`` so they share the
    latent's support [1, 2]. Rates ``beta_lv`` and ``delta`` sit above their
    lower bounds by an exponential excess with rate ``theta``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(theta < 1.0):
        raise ValueError("theta must lie in [1, 2)")
    kappa = beta_shape(theta)
    init = 1.0 + rng.beta(np.stack([kappa, kappa]), 2.0)
    x0, y0 = init
    b = param_bounds(x0, y0, cfg.bounds, cfg.t_horizon)
    beta_lv = b.beta_lo + rng.exponential(1.0 / theta)
    delta = b.delta_lo + rng.exponential(1.0 / theta)
    b = param_bounds(x0, y0, cfg.bounds, cfg.t_horizon, beta_lv, delta)
    alpha = rng.uniform(b.alpha_lo, b.alpha_hi)
    gamma = rng.uniform(b.gamma_lo, b.gamma_hi)
    params = LVParams(alpha, beta_lv, gamma, delta)
    check_bounds(params, init, cfg)
    return params, init


def check_bounds(p: LVParams, init, cfg: SDEConfig) -> None:
    b = param_bounds(init[0], init[1], cfg.bounds, cfg.t_horizon, p.beta_lv, p.delta)
    ok = (
        np.all(p.beta_lv >= b.beta_lo) and np.all(p.delta >= b.delta_lo)
        and np.all((b.alpha_lo <= p.alpha) & (p.alpha <= b.alpha_hi))
        and np.all((b.gamma_lo <= p.gamma) & (p.gamma <= b.gamma_hi))
        and all(np.all(v >= 0) for v in (p.alpha, p.beta_lv, p.gamma, p.delta))
    )
    if not ok:
        raise BoundsError(f"parameters {p} violate their bounds {b}")


# ------------------------------------------------------------- integration


def lv_drift(x, y, p: LVParams):
    dx = p.alpha * x - p.beta_lv * x * y
    dy = -p.gamma * y + p.delta * x * y
    return dx, dy


def brownian_increments(cfg: SDEConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(cfg.dt), size=(cfg.grid_steps, 2, cfg.E))


def euler_maruyama(p: LVParams, init, cfg: SDEConfig, increments: np.ndarray) -> np.ndarray:
    """Path of shape ``(grid_steps + 1, *init.shape)``.

    ``init`` is ``(2, E)`` or carries extra leading axes (several paths driven
    by the same increments).
    """
    if increments.shape[0] != cfg.grid_steps:
        raise ValueError(f"expected {cfg.grid_steps} increments, got {increments.shape[0]}")
    dt = cfg.dt
    state = np.array(init, dtype=float)
    noise = increments * np.array([cfg.sigma_x, cfg.sigma_y])[:, None]
    path = np.empty((cfg.grid_steps + 1,) + state.shape)
    path[0] = state
    drift = np.empty_like(state)
    for k in range(cfg.grid_steps):
        x, y = state[..., 0, :], state[..., 1, :]
        drift[..., 0, :], drift[..., 1, :] = lv_drift(x, y, p)
        state = state + drift * dt + noise[k]
        if not np.isfinite(state).all():
            raise BlowUpError(f"Euler-Maruyama state became non-finite at step {k + 1}")
        path[k + 1] = state
    return path


def sample_event_times(cfg: SDEConfig, rng: np.random.Generator) -> np.ndarray:
    """Sorted, distinct grid indices of the event times.

    Random mode draws ``n_events`` uniform times, snaps them to the grid and
    redraws collisions. Equidistant mode partitions ``event_range`` into
    ``n_events`` pieces and returns the ``n_events + 1`` endpoints.
    """
    K = cfg.grid_steps
    if cfg.n_events > K:
        raise ValueError("n_events cannot exceed grid_steps")
    if cfg.equidistant:
        return np.round(np.linspace(0, K, cfg.n_events + 1)).astype(int)
    lo, hi = cfg.event_range
    picked: set[int] = set()
    while len(picked) < cfg.n_events:
        t = rng.uniform(lo, hi, size=cfg.n_events - len(picked))
        picked.update(np.round((t - lo) / cfg.dt).astype(int).tolist())
    return np.array(sorted(picked), dtype=int)


def counterfactual_path(pair_seed, p: LVParams, init, init_cf, cfg: SDEConfig,
                        theta=None, event_idx=None) -> PathPair:
    """Integrate factual and counterfactual paths with one Brownian realisation."""
    init, init_cf = np.asarray(init, dtype=float), np.asarray(init_cf, dtype=float)
    if np.any(init_cf <= 0):
        raise ValueError("counterfactual initial condition must be positive")
    seed, index = pair_seed
    incs = brownian_increments(cfg, stream(seed, index, _T_NOISE))
    if event_idx is None:
        event_idx = sample_event_times(cfg, stream(seed, index, _T_EVENTS))
    both = euler_maruyama(p, np.stack([init, init_cf]), cfg, incs)
    fact, cf = both[:, 0], both[:, 1]
    if np.any(fact[event_idx] <= 0) or np.any(cf[event_idx] <= 0):
        raise RejectionError("non-positive concentration at an event time")
    lo = cfg.event_range[0]
    times = lo + cfg.dt * np.arange(cfg.grid_steps + 1)
    return PathPair(times, fact, cf, incs, np.asarray(event_idx), init, init_cf, p,
                    np.asarray(theta) if theta is not None else None)


def _times_for(cfg: SDEConfig, index: int):
    if cfg.times_block is None or cfg.equidistant:
        return None
    block = index // cfg.times_block
    return sample_event_times(cfg, stream(cfg.seed, block, _T_BATCH + _T_EVENTS))


def sample_path_pair(cfg: SDEConfig, index: int) -> PathPair:
    """Generate record ``index``; rejected draws are redrawn whole."""
    event_idx = _times_for(cfg, index)
    for attempt in range(MAX_RETRIES):
        sub = index * MAX_RETRIES + attempt
        lo, hi = cfg.theta_support
        theta = stream(cfg.seed, sub, _T_THETA).uniform(lo, hi, size=cfg.E)
        theta = np.minimum(theta, np.nextafter(2.0, 0.0))
        rng = stream(cfg.seed, sub, _T_PARAMS)
        params, init = sample_lv(theta, cfg, rng)
        rng_cf = stream(cfg.seed, sub, _T_INIT_CF)
        if cfg.cf_init == "uniform":
            init_cf = rng_cf.uniform(1.0, 2.0, size=(2, cfg.E))
        else:
            kappa = beta_shape(theta)
            init_cf = 1.0 + rng_cf.beta(np.stack([kappa, kappa]), 2.0)
        try:
            return counterfactual_path((cfg.seed, sub), params, init, init_cf, cfg, theta, event_idx)
        except (RejectionError, BlowUpError):
            continue
    raise RejectionError(f"record {index}: no positive path pair after {MAX_RETRIES} attempts")


# ---------------------------------------------------------------- prompts


def sde_prompt(pair: PathPair, with_times: bool = False):
    """Teacher-forced token layout, next-token targets and completion mask.

    Tokens are ``x_t1, y_t1, ..., x_tn, y_tn, delimiter, x_cf_t1, y_cf_t1, ...``.
    ``targets[p]`` is the token at ``p + 1``; ``mask[p]`` is set where that next
    token belongs to the counterfactual continuation after ``(x_cf_t1, y_cf_t1)``.
    """
    idx = pair.event_idx
    m = len(idx)
    E = pair.factual.shape[-1]
    fact = pair.factual[idx].reshape(2 * m, E)      # interleaved x, y per event
    cf = pair.counterfactual[idx].reshape(2 * m, E)
    delim = np.full((1, E), DELIMITER)
    tokens = np.concatenate([fact, delim, cf], axis=0)
    if with_times:
        t = pair.times[idx]
        tcol = np.concatenate([np.repeat(t, 2), [0.0], np.repeat(t, 2)])[:, None]
        tokens = np.concatenate([tokens, tcol], axis=1)
    T = tokens.shape[0]
    targets = np.zeros_like(tokens)
    targets[:-1] = tokens[1:]
    mask = np.zeros(T, dtype=bool)
    first_cf = 2 * m + 1
    mask[first_cf + 1:T - 1] = True
    return tokens, targets, mask


def sde_batch(cfg: SDEConfig, batch_index: int, size: int):
    """Stack ``size`` prompts. Records are indexed ``batch_index * size + b``."""
    prompts = [sde_prompt(sample_path_pair(cfg, batch_index * size + b), cfg.with_times) for b in range(size)]
    tokens = np.stack([p[0] for p in prompts])
    targets = np.stack([p[1] for p in prompts])
    return tokens, targets, prompts[0][2]


def eq5_residual(pair: PathPair) -> float:
    """Max deviation from the telescoped shared-noise identity.

    ``cf_k - f_k = (cf_0 - f_0) + sum_{j<k} [drift(cf_j) - drift(f_j)] dt``
    holds exactly for the Euler recursion because the noise terms cancel.
    """
    p, dt = pair.params, pair.times[1] - pair.times[0]
    fx, fy = lv_drift(pair.factual[:-1, 0], pair.factual[:-1, 1], p)
    cx, cy = lv_drift(pair.counterfactual[:-1, 0], pair.counterfactual[:-1, 1], p)
    ddrift = np.stack([cx - fx, cy - fy], axis=1) * dt
    predicted = np.concatenate([np.zeros_like(ddrift[:1]), np.cumsum(ddrift, axis=0)]) + (pair.init_cf - pair.init)
    return float(np.abs((pair.counterfactual - pair.factual) - predicted).max())


def increments_digest(incs: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(incs, dtype="<f8").tobytes()).hexdigest()


def write_sde_dataset(cfg: SDEConfig, count: int, path) -> Path:
    path = Path(path)
    header = {"format": FORMAT, "version": FORMAT_VERSION, "config": cfg.to_dict(), "count": int(count)}
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(count):
            pair = sample_path_pair(cfg, i)
            tokens, targets, mask = sde_prompt(pair, cfg.with_times)
            rec = {
                "tokens": tokens.tolist(), "targets": targets.tolist(), "mask": mask.astype(int).tolist(),
                "meta": {"params": pair.params.as_dict(), "theta": pair.theta.tolist(),
                         "event_times": pair.event_times.tolist(),
                         "increments_sha256": increments_digest(pair.increments)},
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def read_sde_dataset(path):
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not an {FORMAT} file")
        records = [json.loads(line) for line in fh if line.strip()]
    return header, records
