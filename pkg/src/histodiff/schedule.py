"""Precomputed per-timestep diffusion constants.

All arrays are float64 and indexed by ``t - 1`` for timesteps ``t`` in
``1..T``. The cumulative-product convention sets ``alpha_bar_0 := 1`` so
the posterior variance at t=1 is exactly zero; its log is clipped to the
t=2 value to keep the learned-variance interpolation finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-timestep constants for a T-step diffusion."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    alpha_bar_prev: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)
    posterior_coef_x0: np.ndarray = field(init=False)
    posterior_coef_xt: np.ndarray = field(init=False)
    log_beta: np.ndarray = field(init=False)
    log_posterior_variance: np.ndarray = field(init=False)
    sqrt_alpha_bar: np.ndarray = field(init=False)
    sqrt_one_minus_alpha_bar: np.ndarray = field(init=False)
    sqrt_recip_alpha_bar: np.ndarray = field(init=False)
    sqrt_recip_alpha_bar_minus_one: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) != self.T:
            raise ValueError(f"beta must be a length-{self.T} vector")
        if (beta <= 0).any() or (beta >= 1).any():
            raise ValueError("beta values must lie strictly inside (0, 1)")
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        posterior_variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        # t=1 has zero posterior variance; clip its log to the t=2 value.
        log_pv = np.log(
            np.concatenate([posterior_variance[1:2], posterior_variance[1:]])
            if self.T > 1
            else np.maximum(posterior_variance, 1e-20)
        )
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "alpha_bar_prev", alpha_bar_prev)
        object.__setattr__(self, "posterior_variance", posterior_variance)
        object.__setattr__(self, "posterior_coef_x0", beta * np.sqrt(alpha_bar_prev) / (1.0 - alpha_bar))
        object.__setattr__(self, "posterior_coef_xt", (1.0 - alpha_bar_prev) * np.sqrt(alpha) / (1.0 - alpha_bar))
        object.__setattr__(self, "log_beta", np.log(beta))
        object.__setattr__(self, "log_posterior_variance", log_pv)
        object.__setattr__(self, "sqrt_alpha_bar", np.sqrt(alpha_bar))
        object.__setattr__(self, "sqrt_one_minus_alpha_bar", np.sqrt(1.0 - alpha_bar))
        object.__setattr__(self, "sqrt_recip_alpha_bar", np.sqrt(1.0 / alpha_bar))
        object.__setattr__(self, "sqrt_recip_alpha_bar_minus_one", np.sqrt(1.0 / alpha_bar - 1.0))

    def check_t(self, t: np.ndarray | int) -> np.ndarray:
        t = np.asarray(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"timesteps must lie in 1..{self.T}, got range [{t.min()}, {t.max()}]")
        return t


def linear_schedule(
    T: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule(T=T, beta=np.linspace(beta_start, beta_end, T, dtype=np.float64))


def marginal_coeffs(s: NoiseSchedule, t: np.ndarray | int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form forward-marginal coefficients (sqrt(a_bar_t), sqrt(1 - a_bar_t))."""
    t = s.check_t(t)
    return s.sqrt_alpha_bar[t - 1], s.sqrt_one_minus_alpha_bar[t - 1]
