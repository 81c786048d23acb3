"""Forward corruption, training losses, and the guided ancestral sampler.

The denoiser predicts the added noise plus a per-dimension interpolation
coefficient ``v`` in [0, 1]; the reverse-step log-variance interpolates
between the upper bound ``log beta_t`` (v=1) and the posterior
``log beta~_t`` (v=0). The hybrid objective is the noise-prediction MSE
plus a small weight on the per-step KL to the true posterior, with the
noise path detached inside the KL so it only trains the variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch

from .errors import NumericError
from .schedule import NoiseSchedule

DEFAULT_LAMBDA_VLB = 1e-3


@dataclass
class DenoiserOutput:
    """Predicted noise and variance-interpolation coefficient, both shaped
    like the input image batch; ``v`` is already squashed into [0, 1]."""

    eps_hat: torch.Tensor
    v: torch.Tensor


@dataclass
class LossReport:
    l_simple: float
    l_vlb: float
    l_hybrid: float
    timesteps: np.ndarray  # per-sample t values
    per_sample_simple: np.ndarray
    per_sample_vlb: np.ndarray


class ReverseStats(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor
    log_variance: torch.Tensor
    x0_hat: torch.Tensor


def pixels_to_unit(pixels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """8-bit RGB (..., H, W, 3) or (..., 3, H, W) already-channel-first
    arrays to float in [-1, 1]."""
    if isinstance(pixels, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(pixels))
    else:
        t = pixels
    t = t.float()
    if t.ndim >= 3 and t.shape[-1] == 3:
        t = t.movedim(-1, -3)
    return t / 127.5 - 1.0


def unit_to_pixels(x: torch.Tensor) -> np.ndarray:
    """Float [-1, 1] (B, 3, H, W) to 8-bit RGB (B, H, W, 3)."""
    arr = ((x.detach().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return arr.to(torch.uint8).movedim(-3, -1).numpy()


def guided_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s_guidance: float) -> torch.Tensor:
    """Classifier-free guidance: amplify the conditional prediction by the
    conditional/unconditional gap scaled by ``s_guidance``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_cond + s_guidance * (eps_cond - eps_uncond)


def loss_simple(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def loss_hybrid(l_simple: torch.Tensor, l_vlb: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return l_simple + lam * l_vlb


def normal_kl(mean1, log_var1, mean2, log_var2):
    """KL(N(mean1, var1) || N(mean2, var2)), elementwise, in nats."""
    return 0.5 * (
        log_var2
        - log_var1
        + (torch.exp(log_var1) + (mean1 - mean2) ** 2) * torch.exp(-log_var2)
        - 1.0
    )


def _standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(x: torch.Tensor, mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Log-likelihood of 8-bit pixels (mapped to [-1, 1]) under a Gaussian
    discretized onto the 256-bin lattice; edge bins integrate to the
    open half-lines."""
    centered = x - mean
    inv_std = torch.exp(-0.5 * log_var)
    cdf_upper = _standard_normal_cdf(inv_std * (centered + 1.0 / 255.0))
    cdf_lower = _standard_normal_cdf(inv_std * (centered - 1.0 / 255.0))
    cdf_upper = torch.where(x > 0.999, torch.ones_like(cdf_upper), cdf_upper)
    cdf_lower = torch.where(x < -0.999, torch.zeros_like(cdf_lower), cdf_lower)
    return torch.log((cdf_upper - cdf_lower).clamp(min=1e-12))


class Diffusion:
    """Schedule-bound diffusion math over torch batches.

    Timesteps are 1-based (1..T). Internally the float64 schedule arrays
    are gathered per batch element and cast to the batch dtype.
    """

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        self._consts = {
            name: torch.from_numpy(getattr(schedule, name))
            for name in (
                "beta",
                "alpha_bar",
                "posterior_variance",
                "posterior_coef_x0",
                "posterior_coef_xt",
                "log_beta",
                "log_posterior_variance",
                "sqrt_alpha_bar",
                "sqrt_one_minus_alpha_bar",
                "sqrt_recip_alpha_bar",
                "sqrt_recip_alpha_bar_minus_one",
            )
        }

    @property
    def T(self) -> int:
        return self.schedule.T

    def _gather(self, name: str, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"timesteps must lie in 1..{self.T}")
        consts = self._consts[name].to(like.device)
        vals = consts[(t.long() - 1).to(like.device)].to(like.dtype)
        return vals.reshape(-1, *([1] * (like.ndim - 1)))

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Closed-form forward marginal: sqrt(a_bar) x0 + sqrt(1 - a_bar) eps."""
        if eps.shape != x0.shape:
            raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
        return self._gather("sqrt_alpha_bar", t, x0) * x0 + self._gather(
            "sqrt_one_minus_alpha_bar", t, x0
        ) * eps

    def predict_x0(self, x_t: torch.Tensor, t: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
        """Invert the forward marginal for the implied clean image."""
        return (
            self._gather("sqrt_recip_alpha_bar", t, x_t) * x_t
            - self._gather("sqrt_recip_alpha_bar_minus_one", t, x_t) * eps_hat
        )

    def p_mean_variance(
        self,
        out: DenoiserOutput,
        x_t: torch.Tensor,
        t: torch.Tensor,
        clip_x0: bool = False,
    ) -> ReverseStats:
        """Reverse-step Gaussian from a denoiser output.

        Mean comes from the posterior coefficients applied to the implied
        x0; log-variance is ``v * log beta_t + (1 - v) * log beta~_t``.
        """
        x0_hat = self.predict_x0(x_t, t, out.eps_hat)
        if clip_x0:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        mean = (
            self._gather("posterior_coef_x0", t, x_t) * x0_hat
            + self._gather("posterior_coef_xt", t, x_t) * x_t
        )
        log_var = out.v * self._gather("log_beta", t, x_t) + (1.0 - out.v) * self._gather(
            "log_posterior_variance", t, x_t
        )
        return ReverseStats(mean=mean, variance=torch.exp(log_var), log_variance=log_var, x0_hat=x0_hat)

    def loss_vlb(
        self,
        out: DenoiserOutput,
        x0: torch.Tensor,
        x_t: torch.Tensor,
        t: torch.Tensor,
    ) -> torch.Tensor:
        """Per-step variational term, meaned over batch and dimensions.

        For t > 1 this is KL(p_theta(x_{t-1}|x_t) || q(x_{t-1}|x_t, x0));
        at t = 1 it is the discretized decoder negative log-likelihood.
        The noise path is detached so this term trains only ``v``.
        """
        frozen = DenoiserOutput(eps_hat=out.eps_hat.detach(), v=out.v)
        model = self.p_mean_variance(frozen, x_t, t, clip_x0=False)
        post_mean = (
            self._gather("posterior_coef_x0", t, x_t) * x0
            + self._gather("posterior_coef_xt", t, x_t) * x_t
        )
        post_log_var = self._gather("log_posterior_variance", t, x_t)
        kl = normal_kl(model.mean, model.log_variance, post_mean, post_log_var)
        decoder_nll = -discretized_gaussian_log_likelihood(x0, model.mean, model.log_variance)
        t_is_one = (t.long() == 1).reshape(-1, *([1] * (x0.ndim - 1)))
        return torch.where(t_is_one, decoder_nll, kl).mean()

    def per_sample_losses(
        self, out: DenoiserOutput, x0: torch.Tensor, x_t: torch.Tensor, eps: torch.Tensor, t: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-sample (simple, vlb) values for diagnostics; grad-free."""
        with torch.no_grad():
            dims = tuple(range(1, x0.ndim))
            simple = ((eps - out.eps_hat) ** 2).mean(dim=dims)
            model = self.p_mean_variance(out, x_t, t, clip_x0=False)
            post_mean = (
                self._gather("posterior_coef_x0", t, x_t) * x0
                + self._gather("posterior_coef_xt", t, x_t) * x_t
            )
            post_log_var = self._gather("log_posterior_variance", t, x_t)
            kl = normal_kl(model.mean, model.log_variance, post_mean, post_log_var)
            nll = -discretized_gaussian_log_likelihood(x0, model.mean, model.log_variance)
            t_is_one = (t.long() == 1).reshape(-1, *([1] * (x0.ndim - 1)))
            vlb = torch.where(t_is_one, nll, kl).mean(dim=dims)
        return simple, vlb

    @torch.no_grad()
    def sample(
        self,
        denoiser: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], DenoiserOutput],
        mask: torch.Tensor,
        s_guidance: float = 0.0,
        rng_seed: int | None = 0,
        generator: torch.Generator | None = None,
        clip_x0: bool = True,
        progress: Callable[[int], None] | None = None,
    ) -> np.ndarray:
        """Ancestral sampling from pure noise, guided by ``mask``.

        Every step evaluates the denoiser on a doubled batch (conditional
        plus null mask) and combines the two noise predictions with
        :func:`guided_eps`; the variance comes from the conditional half.
        No noise is added at t=1. Returns 8-bit RGB (B, H, W, 3).
        """
        if generator is None:
            generator = torch.Generator(device="cpu")
            if rng_seed is not None:
                generator.manual_seed(int(rng_seed))
        b, _, h, w = mask.shape
        device = mask.device
        x = torch.randn((b, 3, h, w), generator=generator).to(device)
        null = torch.zeros_like(mask)
        for step in range(self.T, 0, -1):
            t = torch.full((b,), step, dtype=torch.long, device=device)
            out = denoiser(torch.cat([x, x]), torch.cat([mask, null]), torch.cat([t, t]))
            eps = guided_eps(out.eps_hat[:b], out.eps_hat[b:], s_guidance)
            stats = self.p_mean_variance(
                DenoiserOutput(eps_hat=eps, v=out.v[:b]), x, t, clip_x0=clip_x0
            )
            if step > 1:
                z = torch.randn((b, 3, h, w), generator=generator).to(device)
                x = stats.mean + torch.exp(0.5 * stats.log_variance) * z
            else:
                x = stats.mean
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite sample state at timestep t={step}")
            if progress is not None:
                progress(step)
        return unit_to_pixels(x)
