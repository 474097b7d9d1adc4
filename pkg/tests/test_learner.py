import math
import warnings

import numpy as np
import pytest
from scipy import stats

from drivers import fast_vs_dense
from mcbandit.learner import (
    LearnerState,
    StepRecord,
    estimation_errors,
    init_from_matrices,
    make_record,
    run_round,
    sgd_step,
    soft_impute,
    soft_impute_init,
)
from mcbandit.schedule import BanditConfig, propensities_from_predictions
from mcbandit.sim import (
    DESK_RECIPE,
    InitSettings,
    ScheduleRecipe,
    generate_truth,
    initial_estimates,
    make_truth,
    reward,
    run_experiment,
    trial_rng,
)
from oracles import direct_norms


def small_config(d1=30, d2=20, horizon=1000, t0=400, eta=0.002, eps=0.6, **kw):
    return BanditConfig(d1=d1, d2=d2, r=2, k_arms=2, horizon_T=horizon, phase1_len_T0=t0,
                        gamma=1 / 3, epsilon_phase1=eps, c2=10.0, eta_phase1=eta, **kw)


def small_truth(d1=30, d2=20, seed=3, sigma=1.0):
    return generate_truth(d1, d2, 2, 2, 2.0, np.random.default_rng(seed), sigmas=sigma)


def record(state, x, arm, rew, eps=0.5):
    preds = state.predictions(*x)
    pv = propensities_from_predictions(preds, eps)
    return StepRecord(state.t + 1, x, pv, arm, rew, 1)


# --- init_from_matrices -------------------------------------------------------------------

def test_truth_init_is_a_noiseless_fixed_point():
    truth = small_truth(sigma=0.0)
    config = small_config()
    state = init_from_matrices(list(truth.matrices), 2, config)
    assert max(e[0] for e in estimation_errors(state, truth.matrices)) < 1e-10
    g = np.random.default_rng(0)
    for _ in range(300):
        state, _ = run_round(state, g, lambda x, a, gg: reward(truth, x, a, gg))
    for pair, m in zip(state.arms, truth.matrices):
        assert np.max(np.abs(pair.product() - m)) <= 1e-8


def test_zero_init_warns_and_never_learns():
    config = small_config(d1=5, d2=4)
    with pytest.warns(RuntimeWarning, match="zero factors"):
        state = init_from_matrices([np.zeros((5, 4))] * 2, 2, config)
    rec = record(state, (1, 1), 0, 3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        new = sgd_step(state, rec)
    assert not new.arms[0].u.any() and not new.arms[0].v.any()


def test_init_dimension_mismatch():
    with pytest.raises(ValueError):
        init_from_matrices([np.zeros((5, 4)), np.zeros((4, 5))], 2, small_config(d1=5, d2=4))
    with pytest.raises(ValueError):
        init_from_matrices([np.zeros((5, 4))], 2, small_config(d1=5, d2=4))


def test_soft_impute_init_error_is_small_relative_to_lambda_min():
    # recorded on this seeded instance: sqrt(err) / lambda_min is about 0.04
    truth = generate_truth(60, 60, 2, 2, 2.0, np.random.default_rng(1))
    config = DESK_RECIPE.config(truth, 20000)
    mats = initial_estimates(truth, config, InitSettings(), trial_rng(5))
    for m, true in zip(mats, truth.matrices):
        assert np.linalg.norm(m - true) < 0.1 * truth.lambda_min


# --- soft_impute --------------------------------------------------------------------------

def test_soft_impute_full_observation_recovers():
    g = np.random.default_rng(0)
    m = np.outer(g.standard_normal(8), g.standard_normal(6))
    out = soft_impute(m, np.ones_like(m, dtype=bool), lambdas=[1e-9], max_iters=200, tol=1e-14)
    assert np.max(np.abs(out - m)) < 1e-6


def test_soft_impute_half_observed_rank_one():
    g = np.random.default_rng(11)
    m = np.outer(g.uniform(1, 2, 10), g.uniform(1, 2, 10))
    mask = g.random((10, 10)) < 0.5
    out = soft_impute(m, mask, max_iters=500, tol=1e-10, max_rank=1)
    assert np.linalg.norm(out - m) / np.linalg.norm(m) < 0.05


def test_soft_impute_init_averages_and_rejects_empty_arm():
    obs = [((0, 0), 0, 1.0), ((0, 0), 0, 3.0), ((1, 1), 0, 2.0), ((0, 1), 1, 5.0)]
    mats = soft_impute_init(obs, 2, 2, 2, 1, lambdas=[1e-9])
    assert mats[0].shape == (2, 2)
    with pytest.raises(ValueError, match="arm 1"):
        soft_impute_init(obs[:3], 2, 2, 2, 1)


# --- sgd_step -----------------------------------------------------------------------------

def test_zero_step_only_advances_time():
    truth = small_truth()
    config = small_config(eta=0.0)
    state = init_from_matrices(list(truth.matrices + 1.0), 2, config)
    new = sgd_step(state, record(state, (2, 3), 1, 50.0))
    assert new.t == 1
    for a, b in zip(state.arms, new.arms):
        assert a.u is b.u and a.v is b.v


def test_step_from_truth_without_noise_is_stationary():
    truth = small_truth(sigma=0.0)
    config = small_config()
    state = init_from_matrices(list(truth.matrices), 2, config)
    x = (4, 7)
    new = sgd_step(state, record(state, x, 0, float(truth.matrices[0][x])))
    assert np.max(np.abs(new.arms[0].product() - state.arms[0].product())) < 1e-10


def test_fast_path_matches_dense_algorithm():
    truth = small_truth()
    config = small_config(horizon=500, t0=200)
    g = np.random.default_rng(21)
    init = [m + g.standard_normal(m.shape) for m in truth.matrices]
    worst, disagreements = fast_vs_dense(truth, config, init, 500, g)
    assert worst <= 1e-8
    assert disagreements == 0


def test_untouched_arm_is_bit_identical_and_acting_arm_balanced():
    truth = small_truth()
    config = small_config()
    g = np.random.default_rng(2)
    state = init_from_matrices([m + g.standard_normal(m.shape) for m in truth.matrices], 2, config)
    for _ in range(200):
        before = state
        state, rec = run_round(state, g, lambda x, a, gg: reward(truth, x, a, gg))
        other = 1 - rec.action
        assert state.arms[other] is before.arms[other]
        pair = state.arms[rec.action]
        assert pair.balance_defect() <= 1e-8 * np.linalg.norm(pair.u.T @ pair.u)


def test_sgd_step_errors():
    truth = small_truth()
    config = small_config(horizon=3, t0=1)
    state = init_from_matrices(list(truth.matrices), 2, config)
    with pytest.raises(ValueError, match="non-finite"):
        sgd_step(state, record(state, (0, 0), 0, math.nan))
    bad = record(state, (0, 0), 0, 1.0)
    with pytest.raises(ValueError):
        sgd_step(state, StepRecord(5, bad.x, bad.propensities, 0, 1.0, 1))
    pv = propensities_from_predictions([0.0, 1.0], 0.5)
    pv.probs[:] = [0.0, 1.0]
    with pytest.raises(ValueError, match="zero propensity"):
        sgd_step(state, StepRecord(1, (0, 0), pv, 0, 1.0, 1))
    for t in range(1, 4):
        state = sgd_step(state, record(state, (0, 0), 0, 1.0))
    with pytest.raises(ValueError, match="beyond horizon"):
        sgd_step(state, record(state, (0, 0), 0, 1.0))


def test_non_uniform_weight_reduces_to_uniform():
    truth = small_truth()
    uniform = small_config()
    weighted = small_config(sampling_weights=np.full((30, 20), 1 / 600))
    x = (3, 4)
    s1 = init_from_matrices(list(truth.matrices + 0.5), 2, uniform)
    s2 = init_from_matrices(list(truth.matrices + 0.5), 2, weighted)
    n1 = sgd_step(s1, record(s1, x, 1, 10.0))
    n2 = sgd_step(s2, record(s2, x, 1, 10.0))
    np.testing.assert_allclose(n1.arms[1].product(), n2.arms[1].product(), rtol=0, atol=1e-12)


# --- run_round ----------------------------------------------------------------------------

def test_pure_exploration_actions_are_uniform():
    config = BanditConfig(d1=4, d2=4, r=1, k_arms=3, horizon_T=10000, phase1_len_T0=9999, gamma=0.0,
                          epsilon_phase1=1.0, c2=1.0, eta_phase1=0.0)
    g = np.random.default_rng(4)
    state = init_from_matrices([np.ones((4, 4)) * (a + 1) for a in range(3)], 1, config)
    counts = np.zeros(3)
    for _ in range(10000):
        state, rec = run_round(state, g, lambda x, a, gg: 0.0)
        counts[rec.action] += 1
    assert stats.chisquare(counts).pvalue > 1e-3
    assert np.all(np.abs(counts / 10000 - 1 / 3) < 0.02)


def test_run_round_reproducible():
    truth = small_truth()
    config = small_config()

    def stream(seed):
        g = np.random.default_rng(seed)
        state = init_from_matrices(list(truth.matrices + 0.3), 2, config)
        out = []
        for _ in range(100):
            state, rec = run_round(state, g, lambda x, a, gg: reward(truth, x, a, gg))
            out.append((rec.t, rec.x, rec.action, rec.reward, tuple(rec.propensities.probs)))
        return out

    assert stream(9) == stream(9)
    assert stream(9) != stream(10)


def test_constant_exploration_error_shrinks_with_horizon():
    truth = generate_truth(60, 60, 2, 2, 2.0, np.random.default_rng(1))
    recipe = ScheduleRecipe(gamma=0.0, epsilon=0.6, c1=0.025, c2=0.6, t0_scale=0.3)
    ratios = []
    for seed in range(3):
        errs = []
        for horizon in (5000, 20000):
            res = run_experiment(truth, recipe.config(truth, horizon), trial_rng(77, seed), debias=False)
            errs.append(max(e[1] for e in res.final_errors))
        ratios.append(errs[1] / errs[0])
    assert np.median(ratios) < 1.0


@pytest.mark.slow
def test_phase_one_error_contracts():
    truth = generate_truth(60, 60, 2, 2, 2.0, np.random.default_rng(1))
    config = DESK_RECIPE.config(truth, 20000)
    source = lambda x, a, gg: reward(truth, x, a, gg)  # noqa: E731
    below = 0
    for seed in range(50):
        g = trial_rng(99, seed)
        state = init_from_matrices(initial_estimates(truth, config, InitSettings(), g), 2, config)
        start = sum(e[0] for e in estimation_errors(state, truth.matrices))
        for _ in range(config.phase1_len_T0):
            state, _ = run_round(state, g, source)
        below += sum(e[0] for e in estimation_errors(state, truth.matrices)) < start
    assert below >= 48


# --- estimation_errors --------------------------------------------------------------------

def test_estimation_errors_cases():
    m = np.outer([1.0, 2.0], [3.0, 1.0])
    config = small_config(d1=2, d2=2)
    state = init_from_matrices([m, m], 2, config)
    assert all(f < 1e-24 and x < 1e-24 for f, x in estimation_errors(state, [m, m]))
    shifted = m.copy()
    shifted[0, 1] += 1.0
    f, x = estimation_errors(state, [shifted, m])[0]
    assert f == pytest.approx(1.0) and x == pytest.approx(1.0)


def test_estimation_errors_match_direct_norms(rng):
    truth = small_truth()
    state = init_from_matrices([m + rng.standard_normal(m.shape) for m in truth.matrices], 2, small_config())
    for (f, x), pair, m in zip(estimation_errors(state, truth.matrices), state.arms, truth.matrices):
        df, dx = direct_norms(pair.product(), m)
        assert f == pytest.approx(df, rel=1e-12) and x == pytest.approx(dx, rel=1e-12)


def test_make_record_uses_current_estimates():
    truth = make_truth([np.full((2, 2), 1.0), np.full((2, 2), 2.0)], 1, sigmas=0.0)
    config = small_config(d1=2, d2=2, eps=0.4)
    state = init_from_matrices(list(truth.matrices), 1, config)
    rec = make_record(state, (1, 0), np.random.default_rng(0), lambda x, a, g: reward(truth, x, a, g))
    assert rec.propensities.greedy_arm == 1 and rec.t == 1 and rec.phase == 1
    assert isinstance(state, LearnerState)
