"""Evaluation curves, bootstrap intervals, residual-stream probes and attention read-outs."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import datagen, models, scm, training
from .datagen import Batch, GenConfig

# Evaluation prompts live far beyond any training stream index.
EVAL_INDEX_BASE = 10**9
PROBE_INDEX_BASE = 2 * 10**9
ATTN_INDEX_BASE = 3 * 10**9
ABDUCTION_THRESHOLD = 0.5
RIDGE_LAMBDA = 1e-6

Predictor = Callable[[Batch], np.ndarray]


# ---------------------------------------------------------------- helpers


def model_predictor(state, cfg) -> Predictor:
    """Final-position prediction of a trained model."""
    def predict(batch: Batch) -> np.ndarray:
        return models.forward(state, batch.tokens, cfg)[:, -1, :]
    return predict


def zero_predictor(batch: Batch) -> np.ndarray:
    return np.zeros_like(batch.targets)


def oracle_predictor(batch: Batch) -> np.ndarray:
    """Reads the true ``beta`` from metadata: ``beta (x_cf - x_z) + y_z``."""
    rows = np.arange(len(batch))
    idx = batch.z - 1
    x_z = batch.tokens[rows, 2 * idx]
    y_z = batch.tokens[rows, 2 * idx + 1]
    return batch.beta * (batch.x_cf - x_z) + y_z


def bootstrap_ci(samples, alpha: float = 0.05, resamples: int = 2000, rng=None) -> tuple[float, float]:
    """Basic bootstrap interval ``(2m - q_hi, 2m - q_lo)`` for the mean."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("bootstrap_ci needs at least one sample")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rng = np.random.default_rng(0) if rng is None else rng
    m = x.mean()
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // x.size)
    for s in range(0, resamples, chunk):
        k = min(chunk, resamples - s)
        means[s:s + k] = x[rng.integers(0, x.size, size=(k, x.size))].mean(axis=1)
    q_lo, q_hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    lo, hi = 2 * m - q_hi, 2 * m - q_lo
    # floating-point guard: the construction brackets m up to rounding
    return float(min(lo, m)), float(max(hi, m))


# ----------------------------------------------------------------- curves


@dataclass
class EvalCurve:
    lengths: list
    mean: list
    lower: list
    upper: list
    count: int
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        if list(self.lengths) != sorted(self.lengths):
            raise ValueError("lengths must be sorted")
        for lo, m, hi in zip(self.lower, self.mean, self.upper):
            if not lo <= m <= hi:
                raise ValueError(f"interval ({lo}, {hi}) does not bracket mean {m}")

    def at(self, n: int) -> tuple[float, float, float]:
        i = self.lengths.index(n)
        return self.mean[i], self.lower[i], self.upper[i]

    def rows(self) -> list[dict]:
        skipped = self.skipped or [0] * len(self.lengths)
        return [{"n": n, "mse": m, "ci_lower": lo, "ci_upper": hi,
                 "log_mse": math.log(m) if m > 0 else float("-inf"), "skipped": s}
                for n, m, lo, hi, s in zip(self.lengths, self.mean, self.lower, self.upper, skipped)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _eval_batches(gen_cfg: GenConfig, n: int, seqs: int, batch_size: int):
    start = EVAL_INDEX_BASE + n * 100_000
    for k, off in enumerate(range(0, seqs, batch_size)):
        yield datagen.sample_batch(gen_cfg, start + k, min(batch_size, seqs - off), n=n)


def _per_sequence_errors(predict: Predictor, gen_cfg, n, seqs, batch_size) -> np.ndarray:
    errs = [((predict(b) - b.targets) ** 2).mean(axis=1) for b in _eval_batches(gen_cfg, n, seqs, batch_size)]
    return np.concatenate(errs)


def _curve(errors_by_length: dict, seqs: int, skipped=None, resamples=1000, seed=0) -> EvalCurve:
    lengths = sorted(errors_by_length)
    mean, lo, hi = [], [], []
    for n in lengths:
        e = errors_by_length[n]
        a, b = bootstrap_ci(e, resamples=resamples, rng=np.random.default_rng([seed, n]))
        mean.append(float(e.mean()))
        lo.append(a)
        hi.append(b)
    return EvalCurve(lengths, mean, lo, hi, seqs, skipped or [])


def eval_curve(model, gen_cfg: GenConfig, lengths, seqs_per_length: int = 6400, *,
               batch_size: int = 64, resamples: int = 1000) -> EvalCurve:
    """In-context MSE of ``model`` at each prompt length.

    ``model`` is a predictor callable ``Batch -> (B, E)`` or a
    ``(state, model_cfg)`` pair.
    """
    predict = model if callable(model) else model_predictor(*model)
    errors = {int(n): _per_sequence_errors(predict, gen_cfg, int(n), seqs_per_length, batch_size)
              for n in lengths}
    return _curve(errors, seqs_per_length, resamples=resamples, seed=gen_cfg.seed)


def ols_predictions(batch: Batch) -> np.ndarray:
    """Plug-in OLS counterfactual per dimension; NaN rows for degenerate designs."""
    xs, ys = batch.tokens[:, 0:2 * batch.n:2], batch.tokens[:, 1:2 * batch.n:2]
    rows = np.arange(len(batch))
    x_z, y_z = xs[rows, batch.z - 1], ys[rows, batch.z - 1]
    out = np.empty_like(batch.targets)
    for e in range(batch.targets.shape[1]):
        beta_hat = scm.ols_fit_batch(xs[:, :, e], ys[:, :, e])
        out[:, e] = scm.ols_cf(beta_hat, x_z[:, e], y_z[:, e], batch.x_cf[:, e])
    return out


def ols_baseline_curve(gen_cfg: GenConfig, lengths, seqs: int = 6400, *, batch_size: int = 640,
                       resamples: int = 1000) -> EvalCurve:
    """MSE of the OLS plug-in predictor against the true counterfactual."""
    errors, skipped = {}, []
    for n in lengths:
        e = _per_sequence_errors(ols_predictions, gen_cfg, int(n), seqs, batch_size)
        bad = ~np.isfinite(e)
        skipped.append(int(bad.sum()))
        errors[int(n)] = e[~bad]
    return _curve(errors, seqs, skipped, resamples=resamples, seed=gen_cfg.seed)


# ----------------------------------------------------------------- probes


@dataclass
class ProbeResult:
    adj_r2: list           # after each layer, index 0 is the embedding output
    diff_adj_r2: list      # layer l output minus its input, for l = 1..L
    weights_digest: str
    n_train: int
    n_eval: int
    ridge_used: bool = False
    stream: str = "post"

    def best_layer(self) -> int:
        return int(np.argmax(self.adj_r2))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def adjusted_r2(y, yhat, p: int) -> float:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    n = y.size
    if n - p - 1 <= 0:
        raise ValueError(f"adjusted R^2 needs n > p + 1 (n={n}, p={p})")
    ss_res = float(((y - yhat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)


def fit_probe(features, target) -> tuple[np.ndarray, bool]:
    """Least squares with intercept; ridge (lambda=1e-6) when the design is rank deficient."""
    X = np.column_stack([np.asarray(features, dtype=float), np.ones(len(features))])
    y = np.asarray(target, dtype=float)
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return np.linalg.lstsq(X, y, rcond=None)[0], False
    A = X.T @ X + RIDGE_LAMBDA * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ y), True


def probe_features(train_x, train_y, eval_x, eval_y) -> tuple[float, np.ndarray, bool]:
    """Held-out adjusted R^2 of a linear probe; ``y`` may carry several columns (averaged)."""
    train_y = np.asarray(train_y, dtype=float).reshape(len(train_x), -1)
    eval_y = np.asarray(eval_y, dtype=float).reshape(len(eval_x), -1)
    scores, weights, ridge = [], [], False
    Xe = np.column_stack([eval_x, np.ones(len(eval_x))])
    for j in range(train_y.shape[1]):
        w, r = fit_probe(train_x, train_y[:, j])
        ridge |= r
        scores.append(adjusted_r2(eval_y[:, j], Xe @ w, p=train_x.shape[1]))
        weights.append(w)
    return float(np.mean(scores)), np.stack(weights), ridge


def _probe_data(state, cfg, gen_cfg, count, start, target, stream, batch_size):
    feats, ys = None, []
    for k, off in enumerate(range(0, count, batch_size)):
        b = datagen.sample_batch(gen_cfg, start + k, min(batch_size, count - off))
        _, tr = models.gpt2_forward(state, b.tokens, cfg)
        layers = [tr.resid_pre] + (tr.resid_post if stream == "post" else tr.resid_mid)
        cur = [layer[:, -1, :] for layer in layers]
        feats = [[c] for c in cur] if feats is None else [f + [c] for f, c in zip(feats, cur)]
        ys.append(getattr(b, target))
    return [np.concatenate(f) for f in feats], np.concatenate(ys)


def probe_layers(model, gen_cfg: GenConfig, target: str = "theta", train_n: int = 6400, eval_n: int = 1280,
                 *, stream: str = "post", permute: bool = False, batch_size: int = 64, seed: int = 0) -> ProbeResult:
    """Linear probes from the final-position residual stream to ``theta`` or ``beta``.

    ``stream="post"`` reads ``X_l`` (after the MLP), ``"mid"`` reads ``R_l``.
    ``permute`` shuffles labels across prompts as a null control.
    """
    if target not in ("theta", "beta"):
        raise ValueError("target must be theta or beta")
    if stream not in ("post", "mid"):
        raise ValueError("stream must be post or mid")
    state, cfg = model
    Xtr, ytr = _probe_data(state, cfg, gen_cfg, train_n, PROBE_INDEX_BASE, target, stream, batch_size)
    Xev, yev = _probe_data(state, cfg, gen_cfg, eval_n, PROBE_INDEX_BASE + 500_000, target, stream, batch_size)
    if permute:
        rng = np.random.default_rng(seed)
        ytr, yev = ytr[rng.permutation(len(ytr))], yev[rng.permutation(len(yev))]
    adj, diff, ridge = [], [], False
    h = hashlib.sha256()
    for l, (a, b) in enumerate(zip(Xtr, Xev)):
        s, w, r = probe_features(a, ytr, b, yev)
        adj.append(s)
        ridge |= r
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        if l > 0:
            s, _, r = probe_features(a - Xtr[l - 1], ytr, b - Xev[l - 1], yev)
            diff.append(s)
            ridge |= r
    return ProbeResult(adj, diff, h.hexdigest(), len(ytr), len(yev), ridge, stream)


# -------------------------------------------------------- attention heads


@dataclass
class AttnSummary:
    y_mass: np.ndarray        # (L, H) mean over z of the z-row mass on y_z
    x_mass: np.ndarray        # (L, H) same for x_z
    per_z: np.ndarray         # (L, H, len(z_values)) y_z mass per z
    z_values: list
    ranked: list              # [(layer, head, y_mass)] best first
    qualifying: list          # [(layer, head)] with y_mass > threshold for every z
    threshold: float = ABDUCTION_THRESHOLD

    def to_dict(self) -> dict:
        return {"y_mass": self.y_mass.tolist(), "x_mass": self.x_mass.tolist(),
                "per_z": self.per_z.tolist(), "z_values": list(self.z_values),
                "ranked": [list(r) for r in self.ranked], "qualifying": [list(q) for q in self.qualifying],
                "threshold": self.threshold}


def z_row_masses(attn: list, n: int, z: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean attention from the z-token row to ``y_z`` and ``x_z`` per (layer, head).

    ``attn`` is a list over layers of ``(B, H, T, T)`` arrays.
    """
    row, px, py = 2 * n, 2 * (z - 1), 2 * (z - 1) + 1
    y = np.stack([a[:, :, row, py].mean(axis=0) for a in attn])
    x = np.stack([a[:, :, row, px].mean(axis=0) for a in attn])
    return y, x


def summarize_heads(per_z_y: np.ndarray, per_z_x: np.ndarray, z_values, threshold=ABDUCTION_THRESHOLD) -> AttnSummary:
    """Aggregate ``(L, H, Z)`` masses into a ranked :class:`AttnSummary`."""
    y_mass, x_mass = per_z_y.mean(axis=2), per_z_x.mean(axis=2)
    L, H = y_mass.shape
    ranked = sorted(((l, h, float(y_mass[l, h])) for l in range(L) for h in range(H)), key=lambda r: -r[2])
    qualifying = [(l, h) for l in range(L) for h in range(H) if np.all(per_z_y[l, h] > threshold)]
    return AttnSummary(y_mass, x_mass, per_z_y, list(z_values), ranked, qualifying, threshold)


def detect_abduction_heads(model, gen_cfg: GenConfig, z_values=(8, 15, 34, 42), batches: int = 10, *,
                           n: int = 50, batch_size: int = 64, threshold: float = ABDUCTION_THRESHOLD) -> AttnSummary:
    """Rank heads by the z-token row's attention to ``y_z``; ``z`` is constant within a batch."""
    state, cfg = model
    if cfg.variant == "mlp_only":
        raise ValueError("mlp_only models have no attention heads")
    per_y = np.zeros((cfg.layers, cfg.heads, len(z_values)))
    per_x = np.zeros_like(per_y)
    for j, z in enumerate(z_values):
        if not 1 <= z <= n:
            raise ValueError(f"z={z} outside 1..{n}")
        g = gen_cfg.replace(fixed_z=int(z), n_range=(n, n))
        for k in range(batches):
            b = datagen.sample_batch(g, ATTN_INDEX_BASE + 1000 * j + k, batch_size, n=n)
            _, tr = models.gpt2_forward(state, b.tokens, cfg)
            y, x = z_row_masses(tr.attn, n, z)
            per_y[:, :, j] += y / batches
            per_x[:, :, j] += x / batches
    return summarize_heads(per_y, per_x, z_values, threshold)


# -------------------------------------------------------------- diversity


@dataclass(frozen=True)
class DiversityRow:
    train_dist: str
    pool: int
    ess: float
    eval_dist: str
    mse: float
    ci_lower: float
    ci_upper: float


def diversity_sweep(pool_sizes, theta_dists, eval_dists, model_cfg, train_cfg, gen_cfg: GenConfig | None = None, *,
                    eval_n: int = 35, seqs: int = 6400, own_pool: bool = False, log=None,
                    trained: dict | None = None) -> list[DiversityRow]:
    """Train one model per (distribution, pool size) and evaluate at ``eval_n`` examples.

    ``eval_dists`` entries are ``uniform`` or ``normal`` (fresh continuous
    latents); ``own_pool`` adds a row evaluated on the training pool itself.
    ``trained`` maps ``(dist, pool)`` to already trained parameters.
    """
    base = gen_cfg or GenConfig()
    rows = []
    for dist in theta_dists:
        for d in pool_sizes:
            g = base.replace(theta_dist=dist, diversity=int(d))
            key = (dist, int(d))
            if trained is not None and key in trained:
                params = trained[key]
            else:
                params = training.train(model_cfg, g, train_cfg, log=log)[0].params
                if trained is not None:
                    trained[key] = params
            pool = datagen.make_pool(g)
            targets = [(e, base.replace(theta_dist=e, diversity=None, seed=base.seed + 1)) for e in eval_dists]
            if own_pool:
                targets.append(("pool", g))
            for name, eg in targets:
                e = _per_sequence_errors(model_predictor(params, model_cfg), eg, eval_n, seqs, 64)
                lo, hi = bootstrap_ci(e, rng=np.random.default_rng([base.seed, int(d)]))
                rows.append(DiversityRow(dist, int(d), datagen.ess(pool.weights), name, float(e.mean()), lo, hi))
    return rows


# ----------------------------------------------------------------- output


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    rows = [dataclasses.asdict(r) if dataclasses.is_dataclass(r) else r for r in rows]
    with path.open("w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    if dataclasses.is_dataclass(obj):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if dataclasses.is_dataclass(o):
        return o.to_dict() if hasattr(o, "to_dict") else dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
