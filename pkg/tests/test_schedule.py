import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffuad.denoiser import AnalyticDenoiser
from diffuad.schedule import (forward_sample, linear_schedule, posterior_mean, predict_x0, reverse_mean,
                              reverse_step)

SCHED = linear_schedule()


def test_alpha_bar_matches_running_product():
    prod = 1.0
    for t in range(1, SCHED.T + 1):
        prod *= 1.0 - (1e-4 + (t - 1) * (0.02 - 1e-4) / 999)
        assert abs(SCHED.alpha_bar[t] - prod) < 1e-12


def test_endpoints_and_variance_ordering():
    assert SCHED.beta[1] == pytest.approx(1e-4, abs=1e-15)
    assert SCHED.beta[SCHED.T] == pytest.approx(0.02, abs=1e-15)
    assert SCHED.beta_tilde[1] == 0.0
    assert (SCHED.beta_tilde[1:] < SCHED.beta[1:]).all()
    assert (np.diff(SCHED.alpha_bar) < 0).all()


def test_schedule_is_read_only():
    with pytest.raises(ValueError):
        SCHED.beta[3] = 0.5


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (100, 0.0, 0.02), (100, 0.03, 0.02), (100, 1e-4, 1.0)])
def test_invalid_schedules(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


def test_forward_at_zero_and_shape_check():
    x0 = np.random.default_rng(0).random((4, 4))
    eps = np.random.default_rng(1).standard_normal((4, 4))
    assert np.array_equal(forward_sample(x0, 0, eps, SCHED), x0)
    with pytest.raises(ValueError):
        forward_sample(x0, 5, eps[:3], SCHED)
    with pytest.raises(ValueError):
        forward_sample(x0, SCHED.T + 1, eps, SCHED)


def test_forward_statistics_at_t_max():
    rng = np.random.default_rng(3)
    x0 = np.full(200_000, 0.7)
    xt = forward_sample(x0, SCHED.T, rng.standard_normal(x0.shape), SCHED)
    ab = SCHED.alpha_bar[SCHED.T]
    assert abs(xt.mean() - np.sqrt(ab) * 0.7) < 0.01
    assert abs(xt.var() - (1 - ab)) < 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31))
def test_predict_x0_inverts_forward(t, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.random((3, 5)), rng.standard_normal((3, 5))
    xt = forward_sample(x0, t, eps, SCHED)
    assert np.allclose(predict_x0(xt, t, eps, SCHED), x0, atol=1e-6 * max(1.0, 1 / np.sqrt(SCHED.alpha_bar[t])))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31))
def test_reverse_mean_with_true_eps_equals_posterior_mean(t, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.random(6), rng.standard_normal(6)
    xt = forward_sample(x0, t, eps, SCHED)
    assert np.allclose(reverse_mean(xt, t, eps, SCHED), posterior_mean(x0, xt, t, SCHED), atol=1e-9)


def test_per_item_steps_match_scalar_steps():
    rng = np.random.default_rng(5)
    x0, eps = rng.random((3, 4, 4)), rng.standard_normal((3, 4, 4))
    ts = np.array([1, 200, 1000])
    batched = forward_sample(x0, ts, eps, SCHED)
    for i, t in enumerate(ts):
        assert np.array_equal(batched[i], forward_sample(x0[i], int(t), eps[i], SCHED))


def test_last_step_refuses_noise():
    x = np.zeros(3)
    with pytest.raises(ValueError, match="zero"):
        reverse_step(x, 1, x, np.ones(3), SCHED)
    assert np.array_equal(reverse_step(x, 1, x, np.zeros(3), SCHED), reverse_mean(x, 1, x, SCHED))


def test_csv_export(tmp_path):
    path = tmp_path / "sched.csv"
    SCHED.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == SCHED.T
    assert float(rows[9]["alpha_bar"]) == SCHED.alpha_bar[10]


def test_analytic_chain_reproduces_target_gaussian():
    # 10^4 independent single-pixel chains from pure noise
    m, s2 = 0.5, 0.01
    den = AnalyticDenoiser(m, s2, SCHED)
    rng = np.random.default_rng(11)
    x = rng.standard_normal(10_000)
    for t in range(SCHED.T, 0, -1):
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = reverse_step(x, t, den.predict_eps(x, t), z, SCHED)
    assert abs(x.mean() - m) < abs(m) * 0.02 + 0.01
    assert abs(x.var() - s2) < 0.1 * s2


def test_analytic_posterior_by_quadrature():
    # E[x0 | x_t] by direct numerical integration of the Gaussian prior times likelihood
    from scipy.integrate import quad

    m, s2, t, xt = 0.3, 0.04, 120, 0.55
    ab = SCHED.alpha_bar[t]
    prior = lambda x: np.exp(-(x - m) ** 2 / (2 * s2))  # noqa: E731
    lik = lambda x: np.exp(-(xt - np.sqrt(ab) * x) ** 2 / (2 * (1 - ab)))  # noqa: E731
    num = quad(lambda x: x * prior(x) * lik(x), -5, 5, epsabs=1e-13)[0]
    den = quad(lambda x: prior(x) * lik(x), -5, 5, epsabs=1e-13)[0]
    assert abs(AnalyticDenoiser(m, s2, SCHED).posterior_x0(np.array(xt), t) - num / den) < 1e-8
