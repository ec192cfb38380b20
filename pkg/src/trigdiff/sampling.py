"""Samplers: deterministic DDIM, second-order DPM solver, classifier-free
guidance, the differentiable unrolled path for trigger optimization, and the
ideal backdoored predictor used only for verification.

The backdoor never modifies the update rule itself; only the noise
prediction carries the trigger shift, which is what makes the attack
sampler-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .schedule import NoiseSchedule, StepPair, ddim_subsequence, zeta_coefficient

SAMPLER_KINDS = ("ddim", "dpmsolver2")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    n_steps: int = 10
    eta: float = 0.0
    guidance_scale: float = 1.0
    clip_latents: bool = False
    differentiable: bool = False

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.differentiable and self.eta != 0:
            raise ValueError("differentiable sampling requires eta = 0")


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    pair: StepPair,
    schedule: NoiseSchedule,
    clip: bool = False,
) -> torch.Tensor:
    """Deterministic update x_{t_prev} from x_t and the predicted noise."""
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x shape {tuple(x_t.shape)}")
    ab_t = schedule.alpha_bar(pair.t)
    ab_p = schedule.alpha_bar(pair.t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    x_p = math.sqrt(ab_p) * x0_hat + math.sqrt(1.0 - ab_p) * eps_hat
    return x_p.clamp(-1.0, 1.0) if clip else x_p


def _ddim_step_stochastic(x_t, eps_hat, pair, schedule, eta, generator, clip):
    """Ancestral variant with sigma_t = eta * DDPM sigma; clean-model use only."""
    ab_t = schedule.alpha_bar(pair.t)
    ab_p = schedule.alpha_bar(pair.t_prev)
    sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
    x_p = (
        math.sqrt(ab_p) * x0_hat
        + math.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps_hat
        + sigma * noise
    )
    return x_p.clamp(-1.0, 1.0) if clip else x_p


def _run_ddim_chain(predict, x, pairs, schedule, cfg, generator=None, latent_hook=None):
    for pair in pairs:
        eps_hat = predict(x, pair)
        if cfg.eta == 0:
            x = ddim_step(x, eps_hat, pair, schedule, clip=cfg.clip_latents)
        else:
            x = _ddim_step_stochastic(
                x, eps_hat, pair, schedule, cfg.eta, generator, cfg.clip_latents
            )
        if latent_hook is not None:
            latent_hook(pair.t_prev, x)
    return x


def sample_unconditional(
    model,
    x_T: torch.Tensor,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    generator=None,
    latent_hook=None,
) -> torch.Tensor:
    """Full sampling chain from caller-supplied initial noise (clean or triggered)."""
    if cfg.kind == "dpmsolver2":
        return dpmsolver2_sample(model, x_T, cfg, schedule, latent_hook=latent_hook)
    if cfg.eta != 0 and generator is None:
        raise ValueError("stochastic sampling (eta != 0) needs a generator")
    pairs = ddim_subsequence(schedule.T, cfg.n_steps)
    with torch.no_grad():
        return _run_ddim_chain(
            lambda x, pair: model(x, pair.t),
            x_T,
            pairs,
            schedule,
            cfg,
            generator=generator,
            latent_hook=latent_hook,
        )


def oracle_backdoor_predictor(
    x_t: torch.Tensor,
    pair: StepPair,
    y: torch.Tensor,
    delta: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """The ideal backdoored model output: implied noise plus the zeta shift.

    Verification-only; never trained. The implied noise inverts the
    backdoored forward marginal at (x_t, t).
    """
    ab_t = schedule.alpha_bar(pair.t)
    if ab_t >= 1.0:
        raise ValueError(f"alpha_bar({pair.t}) = 1: implied noise undefined at t=0")
    eps_implied = (x_t - math.sqrt(ab_t) * y - (1.0 - math.sqrt(ab_t)) * delta) / math.sqrt(
        1.0 - ab_t
    )
    return eps_implied + zeta_coefficient(schedule, pair) * delta


def sample_oracle_backdoor(
    x_T: torch.Tensor,
    y: torch.Tensor,
    delta: torch.Tensor,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    latent_hook=None,
) -> torch.Tensor:
    """DDIM chain driven by the ideal backdoored predictor (verification aid)."""
    pairs = ddim_subsequence(schedule.T, cfg.n_steps)
    with torch.no_grad():
        return _run_ddim_chain(
            lambda x, pair: oracle_backdoor_predictor(x, pair, y, delta, schedule),
            x_T,
            pairs,
            schedule,
            cfg,
            latent_hook=latent_hook,
        )


def sample_guided(
    model,
    x_T: torch.Tensor,
    masked_image: torch.Tensor,
    mask: torch.Tensor,
    text,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    latent_hook=None,
) -> torch.Tensor:
    """Classifier-free-guided chain: (1-gamma) eps(null) + gamma eps(text).

    gamma = 0 and gamma = 1 short-circuit to the single-branch call, so the
    collapse is exact (and saves the second model evaluation).
    """
    gamma = cfg.guidance_scale
    if not math.isfinite(gamma):
        raise ValueError(f"guidance scale must be finite, got {gamma!r}")
    pairs = ddim_subsequence(schedule.T, cfg.n_steps)

    def predict(x, pair):
        if gamma == 1.0:
            return model(x, pair.t, masked_image, mask, text)
        if gamma == 0.0:
            return model(x, pair.t, masked_image, mask, None)
        eps_null = model(x, pair.t, masked_image, mask, None)
        eps_text = model(x, pair.t, masked_image, mask, text)
        return (1.0 - gamma) * eps_null + gamma * eps_text

    with torch.no_grad():
        return _run_ddim_chain(predict, x_T, pairs, schedule, cfg, latent_hook=latent_hook)


def sample_differentiable(
    model,
    x_T: torch.Tensor,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    conditioning=None,
    latent_hook=None,
) -> torch.Tensor:
    """Unrolled deterministic chain exposing gradients w.r.t. the inputs.

    All intermediates stay on the autograd tape, so any scalar of the output
    can be differentiated w.r.t. trigger parameters feeding x_T or the
    conditioning. Model parameters are frozen for the duration of the call
    and receive no gradient. The conditional chain runs single-branch (text
    or null), never with guidance mixing.
    """
    if not cfg.differentiable:
        raise ValueError("config must set differentiable=True")
    if cfg.eta != 0:
        raise ValueError("differentiable sampling rejects stochastic steps (eta != 0)")
    pairs = ddim_subsequence(schedule.T, cfg.n_steps)
    if conditioning is None:
        predict = lambda x, pair: model(x, pair.t)
    else:
        masked_image, mask, text = conditioning
        predict = lambda x, pair: model(x, pair.t, masked_image, mask, text)

    params = getattr(model, "parameters", lambda: ())()
    frozen = [p for p in params if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        with torch.enable_grad():
            return _run_ddim_chain(predict, x_T, pairs, schedule, cfg, latent_hook=latent_hook)
    finally:
        for p in frozen:
            p.requires_grad_(True)


def _log_snr(ab: float) -> float:
    return 0.5 * (math.log(ab) - math.log(1.0 - ab))


def dpmsolver2_sample(
    model,
    x_T: torch.Tensor,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    latent_hook=None,
) -> torch.Tensor:
    """Second-order multistep solver in log-SNR time on the DDIM step grid.

    The first step (no history) and the final step to t=0 (infinite log-SNR)
    run first order; first order on this discrete grid coincides exactly with
    the DDIM update. The per-step coefficient sigma_t (e^h - 1) is evaluated
    in the algebraically equivalent form a_t s_s / a_s - s_t, which stays
    finite at t=0.
    """
    if cfg.n_steps < 2:
        raise ValueError("second-order solver needs n_steps >= 2")
    pairs = ddim_subsequence(schedule.T, cfg.n_steps)
    ts = [pairs[0].t] + [p.t_prev for p in pairs]

    x = x_T
    m_prev = None
    lam_prev = None
    with torch.no_grad():
        for i in range(len(ts) - 1):
            s, t = ts[i], ts[i + 1]
            ab_s, ab_t = schedule.alpha_bar(s), schedule.alpha_bar(t)
            a_s, a_t = math.sqrt(ab_s), math.sqrt(ab_t)
            sig_s, sig_t = math.sqrt(1.0 - ab_s), math.sqrt(1.0 - ab_t)
            lam_s = _log_snr(ab_s)
            m = model(x, s)
            coef = a_t * sig_s / a_s - sig_t  # sigma_t * (e^h - 1), stable at t=0
            if m_prev is None or t == 0:
                x = (a_t / a_s) * x - coef * m
            else:
                h = _log_snr(ab_t) - lam_s
                h_prev = lam_s - lam_prev
                d1 = (h / h_prev) * (m - m_prev)
                x = (a_t / a_s) * x - coef * (m + 0.5 * d1)
            if cfg.clip_latents:
                x = x.clamp(-1.0, 1.0)
            if latent_hook is not None:
                latent_hook(t, x)
            m_prev, lam_prev = m, lam_s
    return x
