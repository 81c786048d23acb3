import numpy as np
import pytest

from histodiff.schedule import NoiseSchedule, linear_schedule, marginal_coeffs


def test_hand_values_t2():
    s = linear_schedule(2, 0.1, 0.2)
    assert np.allclose(s.beta, [0.1, 0.2])
    assert np.allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)
    # beta~_2 = (1 - 0.9) / (1 - 0.72) * 0.2
    assert s.posterior_variance[0] == 0.0
    assert abs(s.posterior_variance[1] - 0.1 / 0.28 * 0.2) < 1e-15


@pytest.mark.parametrize("T", [2, 10, 1000])
def test_invariants(T):
    s = linear_schedule(T)
    assert (s.beta > 0).all() and (s.beta < 1).all()
    assert (np.diff(s.beta) > 0).all()
    assert (np.diff(s.alpha_bar) < 0).all()
    assert s.alpha_bar[0] == 1.0 - s.beta[0]
    # coefficient identity
    ident = s.sqrt_alpha_bar**2 + s.sqrt_one_minus_alpha_bar**2
    assert np.abs(ident - 1.0).max() < 1e-12
    # posterior variance bounds and the t=1 convention
    assert s.posterior_variance[0] == 0.0
    assert (s.posterior_variance >= 0).all()
    assert (s.posterior_variance <= s.beta + 1e-15).all()
    # SNR strictly decreasing
    snr = s.alpha_bar / (1.0 - s.alpha_bar)
    assert (np.diff(snr) < 0).all()
    # log posterior variance is clipped, finite everywhere
    assert np.isfinite(s.log_posterior_variance).all()
    if T > 1:
        assert s.log_posterior_variance[0] == s.log_posterior_variance[1]


def test_rejects_bad_bounds():
    with pytest.raises(ValueError):
        linear_schedule(0)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.0, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.3, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.5, 1.0)
    with pytest.raises(ValueError):
        NoiseSchedule(T=3, beta=np.array([0.1, 0.2]))


def test_marginal_coeffs_values():
    s = linear_schedule(2, 0.1, 0.2)
    a, b = marginal_coeffs(s, 2)
    assert abs(a - np.sqrt(0.72)) < 1e-15
    assert abs(b - np.sqrt(0.28)) < 1e-15
    for t in (1, 2):
        a, b = marginal_coeffs(s, t)
        assert abs(a * a + b * b - 1.0) < 1e-12
    with pytest.raises(ValueError):
        marginal_coeffs(s, 0)
    with pytest.raises(ValueError):
        marginal_coeffs(s, 3)


def test_terminal_signal_paper_scale():
    # Independent route: product over the same linspace in plain Python floats.
    T = 1000
    betas = np.linspace(1e-4, 0.02, T)
    prod = 1.0
    for b in betas:
        prod *= 1.0 - float(b)
    s = linear_schedule(T, 1e-4, 0.02)
    a_T, _ = marginal_coeffs(s, T)
    assert abs(a_T - np.sqrt(prod)) < 1e-12
    assert a_T < 0.01


def test_chain_composition_matches_marginal():
    # Stepping Gaussian corruption T times must match the closed-form
    # marginal in distribution (mean and variance of 1e5 scalar draws).
    T, x0 = 5, 0.7
    s = linear_schedule(T, 0.05, 0.3)
    rng = np.random.default_rng(42)
    n = 100_000
    x = np.full(n, x0)
    for t in range(T):
        x = np.sqrt(1.0 - s.beta[t]) * x + np.sqrt(s.beta[t]) * rng.standard_normal(n)
    a, b = marginal_coeffs(s, T)
    want_mean, want_var = a * x0, b**2
    se_mean = np.sqrt(want_var / n)
    se_var = want_var * np.sqrt(2.0 / (n - 1))
    assert abs(x.mean() - want_mean) < 3 * se_mean
    assert abs(x.var(ddof=1) - want_var) < 3 * se_var
