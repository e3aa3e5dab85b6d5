"""Exchangeable regression prompts for in-context counterfactual prediction.

A prompt is ``(x_1, y_1, ..., x_n, y_n, z * 1_E, x_cf)`` with target ``y_cf``.
All randomness is drawn from Philox streams keyed by ``(seed, index, tag)`` so
any record can be regenerated in isolation.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scm
from .scm import Kind, NoiseModelKind

FORMAT = "iccr-dataset"
FORMAT_VERSION = 1
THETA_LO, THETA_HI = -6.0, 6.0
NORMAL_THETA_SD = math.sqrt(12.0)

# stream tags
_T_N, _T_THETA, _T_BETA, _T_UX, _T_UY, _T_XCF, _T_Z, _T_FRESH, _T_POOL = range(1, 10)
_BATCH_OFFSET = 1000


class ConfigError(ValueError):
    pass


def stream(seed: int, index: int, tag: int) -> np.random.Generator:
    """Counter-based generator for one (seed, index, tag) triple."""
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must fit in 64 bits, got {seed}")
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, tag, index]))


@dataclass(frozen=True)
class GenConfig:
    E: int = 1
    n_range: tuple[int, int] = (2, 50)
    theta_dist: str = "uniform"
    diversity: int | None = None
    kind: NoiseModelKind = NoiseModelKind()
    task: str = "counterfactual"
    fixed_z: int | None = None
    z_mode: str = "per_record"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_range", tuple(int(v) for v in self.n_range))
        if isinstance(self.kind, (str, Kind)):
            object.__setattr__(self, "kind", NoiseModelKind.of(self.kind))
        elif isinstance(self.kind, dict):
            object.__setattr__(self, "kind", NoiseModelKind(**self.kind))
        lo, hi = self.n_range
        if self.E < 1:
            raise ConfigError("E must be >= 1")
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid n_range {self.n_range}")
        if self.theta_dist not in ("uniform", "normal"):
            raise ConfigError(f"theta_dist must be uniform or normal, got {self.theta_dist!r}")
        if self.task not in ("counterfactual", "continuation"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.z_mode not in ("per_record", "per_batch"):
            raise ConfigError(f"unknown z_mode {self.z_mode!r}")
        if self.diversity is not None and self.diversity < 1:
            raise ConfigError("diversity must be >= 1")
        if self.fixed_z is not None and (self.fixed_z < 1 or lo < self.fixed_z):
            raise ConfigError(f"fixed_z={self.fixed_z} needs n_range minimum >= fixed_z, got {self.n_range}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = {"tag": self.kind.tag.value, "tau": self.kind.tau, "normalizer": self.kind.normalizer}
        d["n_range"] = list(self.n_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        kind = d.pop("kind", None)
        if isinstance(kind, dict):
            kind = NoiseModelKind(Kind(kind["tag"]), kind.get("tau", scm.LINK_TAU),
                                  kind.get("normalizer", scm.MULT_NORMALIZER))
        elif kind is not None:
            kind = NoiseModelKind.of(kind)
        else:
            kind = NoiseModelKind()
        return cls(kind=kind, **d)

    def replace(self, **kw) -> "GenConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class PromptRecord:
    tokens: np.ndarray
    target: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.meta["n"])

    @property
    def xs(self) -> np.ndarray:
        return self.tokens[0:2 * self.n:2]

    @property
    def ys(self) -> np.ndarray:
        return self.tokens[1:2 * self.n:2]

    def to_json(self) -> dict:
        meta = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.meta.items()}
        return {"tokens": self.tokens.tolist(), "target": self.target.tolist(), "meta": meta}

    @classmethod
    def from_json(cls, d: dict) -> "PromptRecord":
        meta = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v) for k, v in d["meta"].items()}
        return cls(np.asarray(d["tokens"], dtype=float), np.asarray(d["target"], dtype=float), meta)

    def __eq__(self, other):
        if not isinstance(other, PromptRecord):
            return NotImplemented
        if not (np.array_equal(self.tokens, other.tokens) and np.array_equal(self.target, other.target)):
            return False
        if self.meta.keys() != other.meta.keys():
            return False
        return all(np.array_equal(np.asarray(self.meta[k]), np.asarray(other.meta[k])) for k in self.meta)


@dataclass
class ThetaPool:
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("pool weights must be a probability vector")


@dataclass
class Batch:
    """A batch of prompts sharing the number of in-context examples ``n``."""

    tokens: np.ndarray   # (B, T, E)
    targets: np.ndarray  # (B, E)
    theta: np.ndarray    # (B, E)
    beta: np.ndarray     # (B, E)
    u_x: np.ndarray      # (B, n, E)
    u_y: np.ndarray      # (B, n, E)
    x_cf: np.ndarray     # (B, E)
    z: np.ndarray        # (B,)
    n: int

    def __len__(self):
        return self.tokens.shape[0]

    def record(self, b: int) -> PromptRecord:
        meta = {"theta": self.theta[b], "beta": self.beta[b], "u_x": self.u_x[b], "u_y": self.u_y[b],
                "x_cf": self.x_cf[b], "z": int(self.z[b]), "n": self.n}
        return PromptRecord(self.tokens[b], self.targets[b], meta)


# ------------------------------------------------------------------- pools


def _normal_density(v):
    return np.exp(-0.5 * (v / NORMAL_THETA_SD) ** 2) / (NORMAL_THETA_SD * math.sqrt(2 * math.pi))


@functools.lru_cache(maxsize=64)
def make_pool(cfg: GenConfig) -> ThetaPool:
    """Finite latent pool of ``cfg.diversity`` scalar realisations."""
    d = cfg.diversity
    if d is None:
        raise ConfigError("make_pool needs cfg.diversity")
    if d < 1:
        raise ConfigError("diversity must be >= 1")
    rng = stream(cfg.seed, 0, _T_POOL)
    if cfg.theta_dist == "uniform":
        values = rng.uniform(THETA_LO, THETA_HI, size=d)
        weights = np.full(d, 1.0 / d)
    else:
        values = rng.normal(0.0, NORMAL_THETA_SD, size=d)
        weights = pool_weights_normal(values)
    return ThetaPool(values, weights)


def pool_weights_normal(values) -> np.ndarray:
    dens = _normal_density(np.asarray(values, dtype=float))
    return dens / dens.sum()


def ess(weights) -> float:
    """Effective support size, ``exp`` of the Shannon entropy (nats).

    Weights are normalised first. Equal weights return the atom count
    directly, since ``exp(log d)`` is not exact in floating point.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    nz = w[w > 0]
    if nz.size == 0:
        raise ValueError("weights must not all be zero")
    if np.all(nz == nz[0]):
        return float(nz.size)
    nz = nz / nz.sum()
    return float(np.exp(-(nz * np.log(nz)).sum()))


# ---------------------------------------------------------------- sampling


def _draw_theta(cfg: GenConfig, rng: np.random.Generator, shape) -> np.ndarray:
    if cfg.diversity is not None:
        pool = make_pool(cfg)
        return rng.choice(pool.values, size=shape, p=pool.weights)
    if cfg.theta_dist == "uniform":
        return rng.uniform(THETA_LO, THETA_HI, size=shape)
    return rng.normal(0.0, NORMAL_THETA_SD, size=shape)


def _assemble(cfg, theta, beta, u_x, u_y, x_cf, z, fresh):
    """Vectorised token/target construction. Leading axis is the batch."""
    B, n, E = u_x.shape
    x, y = scm.apply_link(cfg.kind, beta[:, None, :], u_x, u_y)
    rows = np.arange(B)
    x_z, y_z = x[rows, z - 1], y[rows, z - 1]
    if cfg.task == "counterfactual":
        tokens = np.empty((B, 2 * n + 2, E))
        tokens[:, 2 * n] = z[:, None].astype(float)
        target = scm.counterfactual(cfg.kind, beta * x_cf, beta * x_z, y_z)
    else:
        tokens = np.empty((B, 2 * n + 1, E))
        target = continuation_target_raw(cfg.kind, beta, x_cf, fresh)
    tokens[:, 0:2 * n:2] = x
    tokens[:, 1:2 * n:2] = y
    tokens[:, -1] = x_cf
    return tokens, target


def continuation_target_raw(kind, beta, x_cf, fresh_noise):
    return scm.transform(kind, np.asarray(beta) * np.asarray(x_cf), fresh_noise)


def _resolve_z(cfg: GenConfig, n: int, rng: np.random.Generator, size: int) -> np.ndarray:
    if cfg.fixed_z is not None:
        if cfg.fixed_z > n:
            raise ConfigError(f"fixed_z={cfg.fixed_z} exceeds n={n}")
        return np.full(size, cfg.fixed_z, dtype=int)
    if cfg.z_mode == "per_batch":
        return np.full(size, int(rng.integers(1, n + 1)), dtype=int)
    return rng.integers(1, n + 1, size=size)


def sample_sequence(cfg: GenConfig, index: int, n: int | None = None) -> PromptRecord:
    """One prompt, fully determined by ``(cfg.seed, index)``."""
    E = cfg.E
    if n is None:
        n = int(stream(cfg.seed, index, _T_N).integers(cfg.n_range[0], cfg.n_range[1] + 1))
    theta = _draw_theta(cfg, stream(cfg.seed, index, _T_THETA), (1, E))
    beta = stream(cfg.seed, index, _T_BETA).normal(theta, 1.0)
    u_x = stream(cfg.seed, index, _T_UX).normal(theta[:, None, :], 1.0, size=(1, n, E))
    u_y = stream(cfg.seed, index, _T_UY).normal(theta[:, None, :], 1.0, size=(1, n, E))
    x_cf = stream(cfg.seed, index, _T_XCF).uniform(THETA_LO, THETA_HI, size=(1, E))
    z = _resolve_z(cfg, n, stream(cfg.seed, index, _T_Z), 1)
    fresh = stream(cfg.seed, index, _T_FRESH).normal(theta, 1.0)
    tokens, target = _assemble(cfg, theta, beta, u_x, u_y, x_cf, z, fresh)
    meta = {"theta": theta[0], "beta": beta[0], "u_x": u_x[0], "u_y": u_y[0],
            "x_cf": x_cf[0], "z": int(z[0]), "n": n}
    if cfg.task == "continuation":
        meta["u_fresh"] = fresh[0]
    return PromptRecord(tokens[0], target[0], meta)


def sample_batch(cfg: GenConfig, batch_index: int, size: int, n: int | None = None) -> Batch:
    """Vectorised batch with a common ``n``, determined by ``(cfg.seed, batch_index)``."""
    E = cfg.E
    key = lambda tag: stream(cfg.seed, batch_index, _BATCH_OFFSET + tag)  # noqa: E731
    if n is None:
        n = int(key(_T_N).integers(cfg.n_range[0], cfg.n_range[1] + 1))
    theta = _draw_theta(cfg, key(_T_THETA), (size, E))
    beta = key(_T_BETA).normal(theta, 1.0)
    u_x = key(_T_UX).normal(theta[:, None, :], 1.0, size=(size, n, E))
    u_y = key(_T_UY).normal(theta[:, None, :], 1.0, size=(size, n, E))
    x_cf = key(_T_XCF).uniform(THETA_LO, THETA_HI, size=(size, E))
    z = _resolve_z(cfg, n, key(_T_Z), size)
    fresh = key(_T_FRESH).normal(theta, 1.0)
    tokens, targets = _assemble(cfg, theta, beta, u_x, u_y, x_cf, z, fresh)
    return Batch(tokens, targets, theta, beta, u_x, u_y, x_cf, z, n)


def continuation_target(record: PromptRecord, fresh_noise, kind: NoiseModelKind = NoiseModelKind()) -> np.ndarray:
    """Observational continuation ``y_{n+1}`` for the record's latents."""
    return continuation_target_raw(kind, record.meta["beta"], record.meta["x_cf"], np.asarray(fresh_noise))


def permute_record(record: PromptRecord, perm, kind: NoiseModelKind = NoiseModelKind()) -> PromptRecord:
    """Reorder the in-context pairs and remap ``z`` so it points at the same pair."""
    n = record.n
    perm = np.asarray(perm)
    tokens = record.tokens.copy()
    tokens[0:2 * n:2] = record.xs[perm]
    tokens[1:2 * n:2] = record.ys[perm]
    meta = dict(record.meta)
    meta["u_x"] = np.asarray(record.meta["u_x"])[perm]
    meta["u_y"] = np.asarray(record.meta["u_y"])[perm]
    new_z = int(np.flatnonzero(perm == record.meta["z"] - 1)[0]) + 1
    meta["z"] = new_z
    if tokens.shape[0] == 2 * n + 2:
        tokens[2 * n] = new_z
    beta = np.asarray(meta["beta"])
    x, y = tokens[2 * (new_z - 1)], tokens[2 * (new_z - 1) + 1]
    target = scm.counterfactual(kind, beta * np.asarray(meta["x_cf"]), beta * x, y)
    return PromptRecord(tokens, target, meta)


# --------------------------------------------------------------------- I/O


def write_dataset(cfg: GenConfig, count: int, path) -> Path:
    """JSON-Lines dataset: a header line then one record per line."""
    path = Path(path)
    header = {"format": FORMAT, "version": FORMAT_VERSION, "config": cfg.to_dict(), "count": int(count)}
    try:
        with path.open("w") as fh:
            fh.write(json.dumps(header) + "\n")
            for i in range(count):
                fh.write(json.dumps(sample_sequence(cfg, i).to_json()) + "\n")
    except OSError as exc:
        raise OSError(f"writing dataset to {path}: {exc}") from exc
    return path


def write_records(records, path, cfg: GenConfig | None = None, fmt: str = FORMAT) -> Path:
    path = Path(path)
    records = list(records)
    header = {"format": fmt, "version": FORMAT_VERSION,
              "config": cfg.to_dict() if cfg is not None else None, "count": len(records)}
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json() if hasattr(r, "to_json") else r) + "\n")
    return path


def read_dataset(path) -> tuple[dict, list[PromptRecord]]:
    path = Path(path)
    try:
        with path.open() as fh:
            header = json.loads(fh.readline())
            if header.get("format") != FORMAT:
                raise ValueError(f"{path}: not an {FORMAT} file")
            records = [PromptRecord.from_json(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"reading dataset {path}: {exc}") from exc
    if len(records) != header["count"]:
        raise ValueError(f"{path}: header says {header['count']} records, found {len(records)}")
    return header, records
