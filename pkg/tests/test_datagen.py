import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iccr import datagen, scm
from iccr.datagen import ConfigError, GenConfig


def test_layout_and_target():
    rec = datagen.sample_sequence(GenConfig(n_range=(4, 4), seed=3), 0)
    n, z = 4, rec.meta["z"]
    assert rec.tokens.shape == (2 * n + 2, 1)
    np.testing.assert_array_equal(rec.xs[:, 0], rec.meta["u_x"][:, 0])
    assert rec.tokens[2 * n, 0] == z
    assert rec.tokens[-1, 0] == rec.meta["x_cf"][0]
    beta = rec.meta["beta"][0]
    u_y = rec.ys[z - 1, 0] - beta * rec.xs[z - 1, 0]
    assert rec.target[0] == pytest.approx(beta * rec.meta["x_cf"][0] + u_y, rel=1e-12)


def test_continuation_layout_omits_z():
    rec = datagen.sample_sequence(GenConfig(task="continuation", n_range=(5, 5)), 0)
    assert rec.tokens.shape == (11, 1)
    beta, x_cf = rec.meta["beta"][0], rec.meta["x_cf"][0]
    assert rec.target[0] == pytest.approx(beta * x_cf + rec.meta["u_fresh"][0])


def test_records_are_reproducible_and_index_addressed():
    cfg = GenConfig(seed=9)
    assert datagen.sample_sequence(cfg, 17) == datagen.sample_sequence(cfg, 17)
    assert datagen.sample_sequence(cfg, 17) != datagen.sample_sequence(cfg, 18)
    assert datagen.sample_sequence(cfg, 17) != datagen.sample_sequence(cfg.replace(seed=10), 17)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_record_invariants(index, E):
    cfg = GenConfig(E=E, seed=1)
    rec = datagen.sample_sequence(cfg, index)
    n = rec.n
    assert 2 <= n <= 50
    assert 1 <= rec.meta["z"] <= n
    assert rec.tokens.shape == (2 * n + 2, E)
    assert np.all(np.abs(rec.meta["x_cf"]) <= 6)
    assert np.all(rec.tokens[2 * n] == rec.meta["z"])


def test_batch_matches_its_records():
    b = datagen.sample_batch(GenConfig(seed=4), 7, 16)
    assert b.tokens.shape == (16, 2 * b.n + 2, 1)
    for i in (0, 5, 15):
        r = b.record(i)
        np.testing.assert_array_equal(r.target, scm.counterfactual(
            scm.NoiseModelKind(), b.beta[i] * b.x_cf[i], b.beta[i] * r.xs[b.z[i] - 1], r.ys[b.z[i] - 1]))


def test_batch_with_forced_length():
    assert datagen.sample_batch(GenConfig(), 0, 4, n=35).tokens.shape[1] == 72


def test_per_batch_z_is_constant():
    b = datagen.sample_batch(GenConfig(z_mode="per_batch", seed=2), 3, 32)
    assert len(set(b.z.tolist())) == 1


def test_fixed_z_config_errors():
    with pytest.raises(ConfigError):
        GenConfig(fixed_z=14, n_range=(10, 50))
    with pytest.raises(ConfigError):
        datagen.sample_sequence(GenConfig(fixed_z=3, n_range=(3, 50)), 0, n=2)


@pytest.mark.parametrize("bad", [dict(E=0), dict(n_range=(5, 2)), dict(theta_dist="cauchy"),
                                 dict(task="regression"), dict(diversity=0), dict(z_mode="x")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        GenConfig(**bad)


def test_config_round_trip():
    cfg = GenConfig(E=3, kind="multiplicative", diversity=8, seed=5)
    assert GenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_moment_reproduction_small_sample():
    b = datagen.sample_batch(GenConfig(seed=0), 0, 100_000, n=2)
    assert b.targets.var() == pytest.approx(169.0, rel=0.05)
    assert abs(b.targets.mean()) < 0.2


# -------------------------------------------------------------------- pools


@pytest.mark.parametrize("d", [1, 2, 7, 64])
def test_ess_of_uniform_pool_is_pool_size(d):
    pool = datagen.make_pool(GenConfig(diversity=d))
    assert datagen.ess(pool.weights) == pytest.approx(d, rel=1e-12)
    assert len(pool.values) == d


def test_ess_edge_cases():
    assert datagen.ess([1.0]) == 1.0
    assert datagen.ess([0.5, 0.5, 0.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        datagen.ess([-0.1, 1.1])


def test_normal_pool_has_smaller_ess():
    pool = datagen.make_pool(GenConfig(diversity=64, theta_dist="normal"))
    assert 1 < datagen.ess(pool.weights) < 64


def test_pool_restricts_theta():
    cfg = GenConfig(diversity=3, seed=8)
    pool = datagen.make_pool(cfg)
    b = datagen.sample_batch(cfg, 0, 200)
    assert set(np.unique(b.theta)) <= set(pool.values)


# ------------------------------------------------------------ permutation


@given(st.integers(0, 500), st.integers(0, 2**31))
def test_permutation_preserves_counterfactual(index, seed):
    rec = datagen.sample_sequence(GenConfig(seed=2), index)
    perm = np.random.default_rng(seed).permutation(rec.n)
    p = datagen.permute_record(rec, perm)
    np.testing.assert_allclose(p.target, rec.target, rtol=1e-12, atol=1e-12)
    z = p.meta["z"]
    np.testing.assert_array_equal(p.xs[z - 1], rec.xs[rec.meta["z"] - 1])


# -------------------------------------------------------------------- I/O


def test_dataset_round_trip(tmp_path):
    cfg = GenConfig(seed=7)
    path = datagen.write_dataset(cfg, 25, tmp_path / "d.jsonl")
    header, recs = datagen.read_dataset(path)
    assert header["count"] == 25 and header["format"] == datagen.FORMAT
    assert recs[3] == datagen.sample_sequence(cfg, 3)


def test_dataset_bad_format(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text(json.dumps({"format": "other"}) + "\n")
    with pytest.raises(ValueError):
        datagen.read_dataset(p)


def test_dataset_count_mismatch(tmp_path):
    p = datagen.write_dataset(GenConfig(), 3, tmp_path / "d.jsonl")
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError, match="header says 3"):
        datagen.read_dataset(p)


def test_stream_seed_range():
    with pytest.raises(ConfigError):
        datagen.stream(-1, 0, 1)


def test_ess_exact_for_every_uniform_pool_size():
    assert all(datagen.ess(np.full(d, 1.0 / d)) == d for d in range(1, 65))


def test_ess_normalises_and_rejects_zero():
    assert datagen.ess([3.0, 1.0]) == pytest.approx(datagen.ess([0.75, 0.25]))
    with pytest.raises(ValueError):
        datagen.ess([0.0, 0.0])


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=30))
def test_ess_between_one_and_support_size(w):
    e = datagen.ess(w)
    assert 1.0 - 1e-9 <= e <= len(w) + 1e-9
