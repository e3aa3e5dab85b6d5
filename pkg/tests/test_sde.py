import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iccr import sde
from iccr.sde import LVParams, SDEConfig

FAST = SDEConfig(grid_steps=200, n_events=10)


def test_identical_intervention_reproduces_factual_bitwise():
    pair = sde.sample_path_pair(FAST, 0)
    same = sde.counterfactual_path((FAST.seed, 0), pair.params, pair.init, pair.init, FAST,
                                   event_idx=pair.event_idx)
    assert np.array_equal(same.counterfactual, same.factual)


@given(st.integers(0, 300))
def test_shared_noise_telescoping_identity(index):
    assert sde.eq5_residual(sde.sample_path_pair(FAST, index)) < 1e-12


@given(st.integers(0, 300))
def test_sampled_parameters_respect_bounds(index):
    pair = sde.sample_path_pair(FAST, index)
    sde.check_bounds(pair.params, pair.init, FAST)
    assert np.all((pair.init > 1) & (pair.init < 2))


def test_param_bounds_closed_form():
    b = sde.param_bounds(1.5, 1.2, (0.5, 2.0, 0.5, 2.0), 1.0, beta_lv=2.0, delta=3.0)
    assert b.beta_lo == pytest.approx(math.log(4) / 1.5)
    assert b.delta_lo == pytest.approx(math.log(4) / 1.5)
    assert b.alpha_lo == pytest.approx(math.log(2 / 1.5) + 2.0 * 0.5)
    assert b.alpha_hi == pytest.approx(math.log(0.5 / 1.5) + 2.0 * 2.0)
    assert b.gamma_lo == pytest.approx(3.0 * 0.5 - math.log(0.5 / 1.2))
    assert b.gamma_hi == pytest.approx(3.0 * 2.0 - math.log(2.0 / 1.2))


def test_noiseless_paths_from_sampled_parameters_stay_positive():
    cfg = SDEConfig(sigma_x=0.0, sigma_y=0.0, grid_steps=4000, event_range=(0.0, 1.0))
    rng = np.random.default_rng(3)
    inside = 0
    for _ in range(20):
        p, init = sde.sample_lv(np.array([1.5]), cfg, rng)
        path = sde.euler_maruyama(p, init, cfg, np.zeros((cfg.grid_steps, 2, 1)))
        inside += bool(np.all(path > 0))
    assert inside == 20


def test_param_bounds_errors():
    with pytest.raises(sde.BoundsError):
        sde.param_bounds(2.5, 1.0, (0.5, 2.0, 0.5, 2.0), 1.0)
    with pytest.raises(sde.BoundsError):
        SDEConfig(bounds=(2.0, 0.5, 0.5, 2.0))


def test_beta_shape_singular_at_two():
    assert sde.beta_shape(1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sde.beta_shape(2.0)


def test_beta_initial_condition_mode():
    # Beta(k, 2) has mode (k - 1) / k; with k = 1 / (2 - theta) that is theta - 1
    theta = 1.75
    k = sde.beta_shape(theta)
    assert k == pytest.approx(4.0)
    draws = np.random.default_rng(0).beta(k, 2.0, 400_000)
    hist, edges = np.histogram(draws, bins=40, range=(0, 1))
    mode = 0.5 * (edges[hist.argmax()] + edges[hist.argmax() + 1])
    assert mode == pytest.approx(theta - 1, abs=0.05)


def _euler_error(dt_steps, ref_steps, p, init, T=0.5):
    cfg = SDEConfig(sigma_x=0, sigma_y=0, grid_steps=dt_steps, event_range=(0.0, T))
    ref_cfg = SDEConfig(sigma_x=0, sigma_y=0, grid_steps=ref_steps, event_range=(0.0, T))
    coarse = sde.euler_maruyama(p, init, cfg, np.zeros((dt_steps, 2, 1)))
    fine = sde.euler_maruyama(p, init, ref_cfg, np.zeros((ref_steps, 2, 1)))
    return np.abs(coarse - fine[:: ref_steps // dt_steps]).max()


def test_euler_first_order_convergence():
    p = LVParams(np.array([1.1]), np.array([0.9]), np.array([1.0]), np.array([0.8]))
    init = np.array([[1.4], [1.2]])
    e1 = _euler_error(100, 1600, p, init)
    e2 = _euler_error(200, 3200, p, init)
    assert e1 / e2 == pytest.approx(2.0, rel=0.2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reports_step():
    p = LVParams(np.array([0.0]), np.array([0.0]), np.array([0.0]), np.array([1e200]))
    cfg = SDEConfig(sigma_x=0, sigma_y=0, grid_steps=100)
    with pytest.raises(sde.BlowUpError, match="step"):
        sde.euler_maruyama(p, np.array([[1e200], [1e200]]), cfg, np.zeros((100, 2, 1)))


def test_event_times_sorted_distinct_and_in_range():
    idx = sde.sample_event_times(FAST, np.random.default_rng(1))
    assert len(idx) == FAST.n_events and np.all(np.diff(idx) > 0)
    assert idx.min() >= 0 and idx.max() <= FAST.grid_steps


def test_equidistant_event_times():
    idx = sde.sample_event_times(SDEConfig(equidistant=True, n_events=20), None)
    assert len(idx) == 21 and idx[0] == 0 and idx[-1] == 1000


def test_prompt_layout_and_mask():
    pair = sde.sample_path_pair(SDEConfig(), 0)
    tokens, targets, mask = sde.sde_prompt(pair)
    n = 20
    assert tokens.shape == (4 * n + 1, 1)
    assert tokens[2 * n, 0] == sde.DELIMITER
    assert mask.sum() == (n - 1) * 2
    np.testing.assert_array_equal(targets[:-1], tokens[1:])
    # first masked target is the counterfactual prey value at the second event
    first = np.flatnonzero(mask)[0]
    assert targets[first, 0] == pair.counterfactual[pair.event_idx[1], 0, 0]


def test_prompt_with_time_channel():
    tokens, _, _ = sde.sde_prompt(sde.sample_path_pair(FAST, 2), with_times=True)
    assert tokens.shape[1] == 2


def test_times_block_shares_event_times():
    cfg = SDEConfig(grid_steps=200, n_events=10, times_block=4)
    a, b, c = (sde.sample_path_pair(cfg, i).event_idx for i in (0, 3, 4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_sde_config_validation():
    with pytest.raises(ValueError):
        SDEConfig(cf_init="normal")
    with pytest.raises(ValueError):
        SDEConfig(grid_steps=10)


def test_sde_dataset_round_trip(tmp_path):
    p = sde.write_sde_dataset(FAST, 3, tmp_path / "s.jsonl")
    header, recs = sde.read_sde_dataset(p)
    assert header["count"] == 3 and len(recs) == 3
    pair = sde.sample_path_pair(FAST, 1)
    assert recs[1]["meta"]["increments_sha256"] == sde.increments_digest(pair.increments)
