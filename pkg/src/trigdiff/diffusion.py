"""Forward processes (clean and backdoored) and every training loss.

All squared-error losses use the mean over elements, so values are
resolution-independent and comparable across experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .sampling import SamplerConfig, sample_differentiable
from .schedule import NoiseSchedule, StepPair, consecutive_zeta_table, zeta_coefficient
from .trigger import insert_noise_trigger

ORIGINS = ("clean", "poisoned")


def _coeff(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Gather values[t] shaped to broadcast over ``like``.

    Scalar t broadcasts directly; a batched t of shape (B,) is reshaped to
    (B, 1, ..., 1) against a batched ``like``.
    """
    tt = torch.as_tensor(t, dtype=torch.long, device=values.device)
    out = values[tt].to(like.dtype)
    if out.ndim == 0:
        return out
    if out.shape[0] != like.shape[0]:
        raise ValueError(f"batched t of length {out.shape[0]} against batch {like.shape[0]}")
    return out.reshape((-1,) + (1,) * (like.ndim - 1))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def forward_marginal_clean(
    x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _check_same_shape(x0, eps, "forward_marginal_clean")
    ab = _coeff(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def forward_marginal_backdoored(
    y: torch.Tensor, delta: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """x'_t = sqrt(ab_t) y + (1 - sqrt(ab_t)) delta + sqrt(1 - ab_t) eps.

    The marginal mean is shifted by (1 - sqrt(ab_t)) delta, which at t = T
    lands the chain on (approximately) N(delta, I).
    """
    _check_same_shape(y, eps, "forward_marginal_backdoored")
    if delta.shape != y.shape and delta.shape != y.shape[-delta.ndim :]:
        raise ValueError(f"delta shape {tuple(delta.shape)} incompatible with {tuple(y.shape)}")
    ab = _coeff(schedule.alpha_bars, t, y)
    sqrt_ab = ab.sqrt()
    return sqrt_ab * y + (1.0 - sqrt_ab) * delta + (1.0 - ab).sqrt() * eps


def loss_clean(model, x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule):
    """Mean squared error between eps and the model prediction at x_t."""
    x_t = forward_marginal_clean(x0, t, eps, schedule)
    return (eps - model(x_t, t)).square().mean()


def loss_backdoor_unconditional(
    model,
    y: torch.Tensor,
    delta: torch.Tensor,
    t,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    pair: StepPair | None = None,
):
    """Backdoored noise-prediction loss: target eps + zeta_t delta at x'_t.

    ``pair`` defaults to the training-time convention, the consecutive pair
    (t-1, t) of the full chain; batched t uses the per-step zeta table.
    """
    if pair is not None:
        if torch.is_tensor(t) and t.ndim > 0:
            raise ValueError("explicit pair requires scalar t")
        if pair.t != int(t):
            raise ValueError(f"pair.t={pair.t} inconsistent with t={int(t)}")
        zeta = torch.as_tensor(zeta_coefficient(schedule, pair))
    else:
        table = consecutive_zeta_table(schedule)
        zeta = _coeff(table, t, eps)
    x_t = forward_marginal_backdoored(y, delta, t, eps, schedule)
    target = eps + zeta.to(eps.dtype) * delta
    return (target - model(x_t, t)).square().mean()


def loss_outer_unconditional(
    model, sample: torch.Tensor, origin: str, delta, y, t, eps, schedule: NoiseSchedule
):
    """Two-branch outer loss: clean items train the plain noise objective,
    poisoned items the backdoored one (with the target image, not the sample)."""
    if origin == "clean":
        return loss_clean(model, sample, t, eps, schedule)
    if origin == "poisoned":
        return loss_backdoor_unconditional(model, y, delta, t, eps, schedule)
    raise ValueError(f"unknown origin tag {origin!r}; expected one of {ORIGINS}")


def _check_trigger_masked_out(trigger: torch.Tensor, mask: torch.Tensor) -> None:
    m = mask
    if m.ndim == trigger.ndim - 1:
        m = m.unsqueeze(-3)
    if bool((trigger * (1.0 - m.to(trigger.dtype))).abs().max() > 0):
        raise ValueError("trigger must be exactly zero where mask == 0")


def loss_outer_conditional(
    model,
    item: torch.Tensor,
    mask: torch.Tensor,
    text,
    trigger_perturbation,
    y,
    t,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    origin: str = "clean",
):
    """Outer loss for the inpainting pipeline.

    Clean branch: predict eps from (x_t, t, item * mask, mask, text).
    Poisoned branch: ``item`` is a clean image drawn from the clean split;
    predict eps from (y_t, t, item * mask + trigger, mask, text) where y_t is
    the noisy target.
    """
    m = mask if mask.ndim == item.ndim else mask.unsqueeze(-3)
    m = m.to(item.dtype)
    masked = item * m
    if origin == "clean":
        x_t = forward_marginal_clean(item, t, eps, schedule)
        return (eps - model(x_t, t, masked, mask, text)).square().mean()
    if origin == "poisoned":
        if trigger_perturbation is None:
            raise ValueError("poisoned branch requires a trigger perturbation")
        _check_trigger_masked_out(trigger_perturbation, mask)
        y_t = forward_marginal_clean(y.expand_as(eps), t, eps, schedule)
        cond = masked + trigger_perturbation
        return (eps - model(y_t, t, cond, mask, text)).square().mean()
    raise ValueError(f"unknown origin tag {origin!r}; expected one of {ORIGINS}")


@dataclass(frozen=True)
class CondPrior:
    """Prior of the inpainting pipeline: initial noise plus conditioning."""

    noise: torch.Tensor
    masked_image: torch.Tensor
    mask: torch.Tensor
    text: object = None


def loss_inner(model, prior, trigger_output: torch.Tensor, y: torch.Tensor,
               cfg: SamplerConfig, schedule: NoiseSchedule):
    """Trigger-training loss: squared distance between the sampled output and
    the target, differentiated through the whole unrolled chain.

    ``prior`` is an initial-noise tensor (unconditional; the trigger is added
    to the noise) or a CondPrior (the trigger is added to the masked image
    and the chain runs single-branch on the given text).
    """
    if cfg.eta != 0:
        raise ValueError("inner loss requires the deterministic path (eta = 0)")
    if not cfg.differentiable:
        raise ValueError("inner loss requires a differentiable sampler config")
    if isinstance(prior, CondPrior):
        conditioning = (prior.masked_image + trigger_output, prior.mask, prior.text)
        out = sample_differentiable(model, prior.noise, cfg, schedule, conditioning=conditioning)
    else:
        x_T = insert_noise_trigger(prior, trigger_output)
        out = sample_differentiable(model, x_T, cfg, schedule)
    return (out - y).square().mean()
