import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iccr import analysis, datagen, models, training
from iccr.datagen import GenConfig

GEN = GenConfig(seed=0)


# --------------------------------------------------------------- bootstrap


def test_bootstrap_constant_samples_zero_width():
    lo, hi = analysis.bootstrap_ci(np.full(50, 3.25))
    assert lo == hi == 3.25


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=60), st.integers(0, 2**31))
def test_bootstrap_brackets_mean(xs, seed):
    lo, hi = analysis.bootstrap_ci(xs, resamples=200, rng=np.random.default_rng(seed))
    m = np.mean(xs)
    assert lo <= m <= hi


def test_bootstrap_symmetric_data_centered():
    x = np.concatenate([np.linspace(-1, 1, 101), -np.linspace(-1, 1, 101)])
    lo, hi = analysis.bootstrap_ci(x)
    assert lo < 0 < hi and abs(lo + hi) < 0.02


def test_bootstrap_coverage_near_nominal():
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(1000):
        lo, hi = analysis.bootstrap_ci(rng.normal(1.0, 2.0, 200), resamples=2000, rng=rng)
        hits += lo <= 1.0 <= hi
    assert abs(hits / 1000 - 0.95) <= 0.02


def test_bootstrap_width_shrinks_as_root_n(rng):
    w = []
    for n in (1600, 6400):
        lo, hi = analysis.bootstrap_ci(rng.normal(size=n), resamples=2000, rng=rng)
        w.append(hi - lo)
    assert 0.4 <= w[1] / w[0] <= 0.6


@pytest.mark.parametrize("args", [dict(samples=[]), dict(samples=[1.0], alpha=0.0), dict(samples=[1.0], alpha=1.0)])
def test_bootstrap_errors(args):
    with pytest.raises(ValueError):
        analysis.bootstrap_ci(**args)


# ------------------------------------------------------------------ curves


def test_oracle_predictor_curve_is_zero():
    c = analysis.eval_curve(analysis.oracle_predictor, GEN, [2, 10, 50], 256, resamples=100)
    assert max(abs(m) for m in c.mean) < 1e-20


def test_zero_predictor_matches_monte_carlo_variance():
    # y_cf is heavy tailed (standard error ~1.8% at 6400 prompts), so compare
    # against the Monte-Carlo variance of the very prompts evaluated
    c = analysis.eval_curve(analysis.zero_predictor, GEN, [5, 35], 6400, resamples=200)
    for n, m in zip(c.lengths, c.mean):
        t = np.concatenate([b.targets for b in analysis._eval_batches(GEN, n, 6400, 64)])
        assert m == pytest.approx(float(t.var()), rel=0.03)
    assert np.mean(c.mean) == pytest.approx(169.0, rel=0.05)


def test_untrained_model_no_better_than_zero():
    cfg = models.TransformerConfig(layers=1, heads=2, hidden=8, max_context=102)
    model = (models.init_model(cfg, 5), cfg)
    zero = analysis.eval_curve(analysis.zero_predictor, GEN, [10], 640, resamples=500)
    rand = analysis.eval_curve(model, GEN, [10], 640, resamples=500)
    assert rand.mean[0] >= zero.lower[0]


def test_curve_rows_and_lookup():
    c = analysis.eval_curve(analysis.zero_predictor, GEN, [3, 4], 64, resamples=50)
    rows = c.rows()
    assert [r["n"] for r in rows] == [3, 4]
    assert set(rows[0]) == {"n", "mse", "ci_lower", "ci_upper", "log_mse", "skipped"}
    assert rows[0]["log_mse"] == pytest.approx(np.log(rows[0]["mse"]))
    assert c.at(4) == (c.mean[1], c.lower[1], c.upper[1])


def test_curve_rejects_bad_interval():
    with pytest.raises(ValueError):
        analysis.EvalCurve([2], [1.0], [2.0], [3.0], 10)


def test_eval_is_deterministic():
    a = analysis.eval_curve(analysis.zero_predictor, GEN, [7], 128, resamples=100)
    b = analysis.eval_curve(analysis.zero_predictor, GEN, [7], 128, resamples=100)
    assert a == b


# --------------------------------------------------------------------- OLS


def _noiseless(batch):
    """Rewrite ys as beta * x + c so the counterfactual is exactly linear."""
    xs = batch.tokens[:, 0:2 * batch.n:2]
    c = 0.7
    tokens = batch.tokens.copy()
    tokens[:, 1:2 * batch.n:2] = batch.beta[:, None, :] * xs + c
    targets = batch.beta * batch.x_cf + c
    return dataclasses.replace(batch, tokens=tokens, targets=targets)


def test_ols_noiseless_is_exact():
    b = _noiseless(datagen.sample_batch(GEN, 0, 500, n=6))
    np.testing.assert_allclose(analysis.ols_predictions(b), b.targets, atol=1e-9)


def test_ols_short_prompts_worse_than_long():
    c = analysis.ols_baseline_curve(GEN, [2, 50], 6400, resamples=200)
    assert np.isfinite(c.mean[0]) and c.mean[0] > c.mean[1]


def test_ols_mse_matches_closed_form():
    # error = (beta_hat - beta)(x_cf - x_z); E[(beta_hat - beta)^2] = E[1/chi2_{n-1}] = 1/(n-3)
    # and E[(x_cf - x_z)^2] = 12 + 13, so MSE ~ 25/(n-3)
    c = analysis.ols_baseline_curve(GEN, [10, 30, 50], 20_000, resamples=200)
    for n, lo, hi in zip(c.lengths, c.lower, c.upper):
        assert lo * 0.97 <= 25 / (n - 3) <= hi * 1.03


def test_ols_matches_scalar_oracle():
    b = datagen.sample_batch(GEN, 3, 20, n=8)
    got = analysis.ols_predictions(b)
    from iccr import scm
    for i in range(20):
        r = b.record(i)
        z = r.meta["z"]
        bh = scm.ols_fit(r.xs[:, 0], r.ys[:, 0])
        ref = scm.ols_cf(bh, r.xs[z - 1, 0], r.ys[z - 1, 0], r.meta["x_cf"][0])
        assert got[i, 0] == pytest.approx(ref, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------------ probes


def _planted(rng, n, D=8):
    theta = rng.uniform(-6, 6, n)
    v = np.linspace(1, 2, D)
    return theta[:, None] * v + 0.01 * rng.normal(size=(n, D)), theta


def test_planted_signal_probe_above_099(rng):
    Xtr, ytr = _planted(rng, 6400)
    Xev, yev = _planted(rng, 1280)
    score, w, ridge = analysis.probe_features(Xtr, ytr, Xev, yev)
    assert score > 0.99 and not ridge and w.shape == (1, 9)


def test_permuted_labels_probe_near_zero(rng):
    Xtr, ytr = _planted(rng, 6400)
    Xev, yev = _planted(rng, 1280)
    score, _, _ = analysis.probe_features(Xtr, rng.permutation(ytr), Xev, rng.permutation(yev))
    assert abs(score) <= 0.05


def test_adjusted_r2_perfect_fit():
    y = np.arange(10.0)
    assert analysis.adjusted_r2(y, y, 3) == 1.0


def test_adjusted_r2_formula():
    y = np.array([1.0, 2.0, 3.0, 4.0, 6.0])
    yhat = np.array([1.1, 1.9, 3.2, 4.1, 5.7])
    r2 = 1 - ((y - yhat) ** 2).sum() / ((y - y.mean()) ** 2).sum()
    assert analysis.adjusted_r2(y, yhat, 2) == pytest.approx(1 - (1 - r2) * 4 / 2)
    with pytest.raises(ValueError):
        analysis.adjusted_r2(y, yhat, 4)


@given(st.integers(0, 2**31))
def test_heldout_adjusted_r2_at_most_one(seed):
    r = np.random.default_rng(seed)
    X, y = r.normal(size=(60, 3)), r.normal(size=60)
    s, _, _ = analysis.probe_features(X[:40], y[:40], X[40:], y[40:])
    assert s <= 1.0


def test_rank_deficient_design_uses_ridge(rng):
    X = rng.normal(size=(50, 2))
    X = np.column_stack([X, X[:, 0]])
    _, ridge = analysis.fit_probe(X, rng.normal(size=50))
    assert ridge


def test_probe_layers_on_small_model():
    cfg = models.TransformerConfig(layers=2, heads=2, hidden=8, max_context=102)
    res = analysis.probe_layers((models.init_model(cfg), cfg), GEN, train_n=256, eval_n=128)
    assert len(res.adj_r2) == 3 and len(res.diff_adj_r2) == 2
    assert res.n_train == 256 and res.n_eval == 128 and len(res.weights_digest) == 64
    with pytest.raises(ValueError):
        analysis.probe_layers((models.init_model(cfg), cfg), GEN, target="gamma")


# --------------------------------------------------------- attention heads


def _attn_with_head_on_y(n, z, L=2, H=3, hot=(1, 2)):
    T = 2 * n + 2
    mats = []
    for l in range(L):
        A = np.tril(np.ones((T, T)))
        A = A / A.sum(axis=1, keepdims=True)
        A = np.broadcast_to(A, (4, H, T, T)).copy()
        if l == hot[0]:
            A[:, hot[1], 2 * n, :] = 0.0
            A[:, hot[1], 2 * n, 2 * (z - 1) + 1] = 1.0
        mats.append(A)
    return mats


def test_planted_abduction_head_ranked_first():
    zs = (8, 15, 34, 42)
    per_y, per_x = np.zeros((2, 3, 4)), np.zeros((2, 3, 4))
    for j, z in enumerate(zs):
        per_y[:, :, j], per_x[:, :, j] = analysis.z_row_masses(_attn_with_head_on_y(50, z), 50, z)
    s = analysis.summarize_heads(per_y, per_x, zs)
    assert s.ranked[0] == (1, 2, 1.0) and s.qualifying == [(1, 2)]
    assert s.x_mass[1, 2] == 0.0


def test_uniform_attention_scores_one_over_positions():
    n, z = 50, 8
    y, x = analysis.z_row_masses(_attn_with_head_on_y(n, z, hot=(9, 9)), n, z)
    np.testing.assert_allclose(y, 1.0 / (2 * n + 1))
    s = analysis.summarize_heads(y[..., None], x[..., None], [z])
    assert s.qualifying == []


def test_head_scores_invariant_to_batch_order():
    cfg = models.TransformerConfig(layers=1, heads=2, hidden=8, max_context=102)
    state = models.init_model(cfg)
    b = datagen.sample_batch(GEN.replace(fixed_z=3, n_range=(10, 10)), 0, 6, n=10)
    _, tr = models.gpt2_forward(state, b.tokens, cfg)
    _, tr2 = models.gpt2_forward(state, b.tokens[::-1], cfg)
    y1, _ = analysis.z_row_masses(tr.attn, 10, 3)
    y2, _ = analysis.z_row_masses(tr2.attn, 10, 3)
    np.testing.assert_allclose(y1, y2, rtol=1e-12)


def test_detect_abduction_heads_shapes():
    cfg = models.TransformerConfig(layers=2, heads=2, hidden=8, max_context=102)
    s = analysis.detect_abduction_heads((models.init_model(cfg), cfg), GEN, batches=1, batch_size=4)
    assert s.per_z.shape == (2, 2, 4) and len(s.ranked) == 4
    json.dumps(s.to_dict())
    with pytest.raises(ValueError):
        analysis.detect_abduction_heads((models.init_model(cfg.replace(variant="mlp_only")),
                                         cfg.replace(variant="mlp_only")), GEN)


# --------------------------------------------------------------- diversity


def test_diversity_sweep_table():
    cfg = models.TransformerConfig(layers=1, heads=1, hidden=8, max_context=102)
    rows = analysis.diversity_sweep([1, 4], ["uniform"], ["uniform", "normal"], cfg,
                                    training.TrainConfig(steps=1, batch=2), GEN, seqs=64, own_pool=True)
    assert len(rows) == 6
    assert [r.ess for r in rows if r.eval_dist == "uniform"] == [1.0, 4.0]
    assert {r.eval_dist for r in rows} == {"uniform", "normal", "pool"}


def test_pool_model_memorises_its_own_theta():
    """With one latent value, a model fit to the pool beats fresh latents on the pool."""
    g = GEN.replace(diversity=1)
    theta = datagen.make_pool(g).values[0]

    def predictor(batch):
        # best constant-beta plug-in for the single pooled latent: beta ~ N(theta, 1)
        xs, ys = batch.tokens[:, 0:2 * batch.n:2, 0], batch.tokens[:, 1:2 * batch.n:2, 0]
        rows = np.arange(len(batch))
        x_z, y_z = xs[rows, batch.z - 1], ys[rows, batch.z - 1]
        return (theta * (batch.x_cf[:, 0] - x_z) + y_z)[:, None]

    own = analysis.eval_curve(predictor, g, [10], 640, resamples=200)
    fresh = analysis.eval_curve(predictor, GEN.replace(seed=1), [10], 640, resamples=200)
    assert own.mean[0] < fresh.mean[0]


def test_write_csv_and_json(tmp_path):
    c = analysis.eval_curve(analysis.zero_predictor, GEN, [2], 16, resamples=10)
    p = analysis.write_csv(c.rows(), tmp_path / "c.csv")
    assert p.read_text().splitlines()[0] == "n,mse,ci_lower,ci_upper,log_mse,skipped"
    q = analysis.write_json({"a": np.float64(1.5), "b": np.arange(2)}, tmp_path / "c.json")
    assert json.loads(q.read_text()) == {"a": 1.5, "b": [0, 1]}
