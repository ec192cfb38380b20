"""Trigger parameterizations, the insertion function, and the l-inf projection.

Three trigger families: a fixed universal perturbation, a trigger
distribution (fixed mean, unit-variance draws), and an input-aware generator
network for the inpainting pipeline whose emissions are mask-constrained and
norm-bounded by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn


def project_linf(grid: torch.Tensor, bound: float) -> torch.Tensor:
    """Elementwise clamp to [-bound, bound]; identity inside the ball, idempotent.

    The bound is cast to the grid dtype rounding toward zero, so the result
    satisfies the l-inf constraint exactly even when the cast would otherwise
    round the bound up.
    """
    if not bound > 0:
        raise ValueError(f"projection bound must be positive, got {bound!r}")
    b = torch.as_tensor(bound, dtype=grid.dtype)
    if float(b) > bound:
        b = torch.nextafter(b, torch.zeros_like(b))
    return grid.clamp(-b, b)


def insert_noise_trigger(eps: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Trigger insertion for noise priors: delta + eps.

    ``delta`` may be unbatched (C,H,W) against a batched ``eps``.
    """
    if delta.shape != eps.shape and delta.shape != eps.shape[-delta.ndim :]:
        raise ValueError(f"trigger shape {tuple(delta.shape)} incompatible with noise {tuple(eps.shape)}")
    return delta + eps


@dataclass
class UniversalTrigger:
    """One fixed perturbation applied to every initial noise draw."""

    delta: torch.Tensor
    bound: float
    identifier: str = "universal-0"

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError(f"bound must be positive, got {self.bound!r}")
        if float(self.delta.abs().max()) > self.bound:
            raise ValueError("delta violates its l-inf bound")

    @classmethod
    def zeros(cls, shape, bound: float, identifier: str = "universal-0", dtype=torch.float32):
        return cls(torch.zeros(shape, dtype=dtype), bound, identifier)

    def draw(self, eps: torch.Tensor, generator=None) -> torch.Tensor:
        return insert_noise_trigger(eps, self.delta.to(eps.dtype))


@dataclass
class DistributionalTrigger:
    """Trigger distribution N(delta_mean, I); a fresh draw per poisoned input."""

    delta_mean: torch.Tensor
    bound: float
    identifier: str = "distributional-0"

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError(f"bound must be positive, got {self.bound!r}")
        if float(self.delta_mean.abs().max()) > self.bound:
            raise ValueError("delta_mean violates its l-inf bound")

    @classmethod
    def zeros(cls, shape, bound: float, identifier: str = "distributional-0", dtype=torch.float32):
        return cls(torch.zeros(shape, dtype=dtype), bound, identifier)

    def draw(self, eps: torch.Tensor, generator=None) -> torch.Tensor:
        """Poisoned input delta' + eps with delta' ~ N(delta_mean, I)."""
        return insert_noise_trigger(eps, self.sample(eps.shape, generator, eps.dtype))

    def sample(self, shape, generator=None, dtype=None) -> torch.Tensor:
        dtype = dtype or self.delta_mean.dtype
        xi = torch.randn(shape, generator=generator, dtype=dtype)
        return self.delta_mean.to(dtype) + xi


def sample_distribution_trigger(trigger: DistributionalTrigger, generator=None) -> torch.Tensor:
    """One draw delta' = delta_mean + xi, xi ~ N(0, I)."""
    return trigger.sample(trigger.delta_mean.shape, generator)


class TriggerGeneratorNet(nn.Module):
    """Input-aware trigger generator for masked images.

    Takes the masked image, the mask, and the target image (channel
    concatenated) and emits a raw perturbation through a tanh head scaled by
    the norm bound, so the downstream projection is mostly inactive.
    """

    def __init__(self, channels: int = 3, base_width: int = 32, bound: float = 0.1):
        super().__init__()
        if not bound > 0:
            raise ValueError(f"bound must be positive, got {bound!r}")
        self.channels = channels
        self.base_width = base_width
        self.bound = bound
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels + 1, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, channels, 3, padding=1),
        )

    def forward(self, masked_image, mask, target):
        squeeze = masked_image.ndim == 3
        if squeeze:
            masked_image = masked_image[None]
        b = masked_image.shape[0]
        if mask.ndim == 2:
            mask = mask[None, None]
        elif mask.ndim == 3:
            mask = mask[:, None]
        if target.ndim == 3:
            target = target[None]
        mask = mask.expand(b, -1, -1, -1).to(masked_image.dtype)
        target = target.expand(b, -1, -1, -1)
        h = torch.cat([masked_image, mask, target], dim=1)
        out = torch.tanh(self.net(h)) * self.bound
        return out[0] if squeeze else out


def build_trigger_generator(
    channels: int, base_width: int, bound: float, seed: int, dtype=torch.float32
) -> TriggerGeneratorNet:
    torch.manual_seed(seed)
    return TriggerGeneratorNet(channels, base_width, bound).to(dtype)


def _as_mask_channel(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Mask (H,W) / (B,H,W) / (B,1,H,W) broadcastable over image channels."""
    if mask.ndim == 2:
        mask = mask[None, None] if like.ndim == 4 else mask[None]
    elif mask.ndim == 3 and like.ndim == 4:
        mask = mask[:, None]
    return mask.to(like.dtype)


def generate_conditional_trigger(
    net: TriggerGeneratorNet,
    masked_image: torch.Tensor,
    mask: torch.Tensor,
    target: torch.Tensor,
    bound: float,
) -> torch.Tensor:
    """Emission pipeline of the conditional trigger: mask-multiply, then project.

    The result is exactly zero wherever mask == 0 and l-inf bounded by
    ``bound``, regardless of the raw network output.
    """
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be strictly binary")
    raw = net(masked_image, mask, target)
    return project_linf(raw * _as_mask_channel(mask, raw), bound)


@dataclass
class TriggerTargetPair:
    """A trigger and the image it maps to; a model may carry several."""

    trigger: object  # UniversalTrigger | DistributionalTrigger | TriggerGeneratorNet
    target: torch.Tensor
    identifier: str = "pair-0"
    target_name: str = ""

    def __post_init__(self):
        if float(self.target.abs().max()) > 1.0:
            raise ValueError("target image must lie in [-1, 1]")
