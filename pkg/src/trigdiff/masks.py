"""Random binary masks for the inpainting pipeline.

Convention: 1 = kept/visible pixel, 0 = region to be edited. Training masks
must contain at least one of each. Generation is a pure function of
(shape, params, generator state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class StrokeParams:
    """Free-form brush parameters: random-walk polylines with bounded turning
    angle, dilated to a circular brush."""

    num_strokes: tuple[int, int] = (4, 8)
    width_frac: tuple[float, float] = (0.10, 0.25)
    max_vertices: int = 8
    max_angle: float = math.pi / 4
    length_frac: tuple[float, float] = (0.15, 0.40)


@dataclass(frozen=True)
class MaskConfig:
    kinds: tuple[str, ...] = ("rect", "freeform")
    min_area_frac: float = 0.1
    max_area_frac: float = 0.5
    strokes: StrokeParams = field(default_factory=StrokeParams)

    def __post_init__(self):
        for k in self.kinds:
            if k not in ("rect", "freeform"):
                raise ValueError(f"unknown mask kind {k!r}")
        if not self.kinds:
            raise ValueError("at least one mask kind required")


def validate_binary_mask(mask: torch.Tensor, training: bool = False) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must contain only 0 and 1")
    if training:
        if not bool((mask == 0).any()) or not bool((mask == 1).any()):
            raise ValueError("training mask needs at least one kept and one edited pixel")


def random_rect_mask(
    shape: tuple[int, int],
    min_area_frac: float,
    max_area_frac: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Single axis-aligned rectangle of zeros with area fraction in
    [min_area_frac, max_area_frac], uniformly positioned."""
    H, W = shape
    if not 0 < min_area_frac <= max_area_frac < 1:
        raise ValueError(
            f"need 0 < min <= max < 1, got ({min_area_frac}, {max_area_frac})"
        )
    area = H * W
    feasible = []
    for h in range(1, H + 1):
        w_lo = max(1, math.ceil(min_area_frac * area / h))
        w_hi = min(W, math.floor(max_area_frac * area / h))
        if w_lo <= w_hi:
            feasible.append((h, w_lo, w_hi))
    if not feasible:
        raise ValueError(
            f"no integer rectangle on {H}x{W} has area fraction in "
            f"[{min_area_frac}, {max_area_frac}]"
        )
    h, w_lo, w_hi = feasible[int(torch.randint(len(feasible), (1,), generator=generator))]
    w = int(torch.randint(w_lo, w_hi + 1, (1,), generator=generator))
    top = int(torch.randint(H - h + 1, (1,), generator=generator))
    left = int(torch.randint(W - w + 1, (1,), generator=generator))
    mask = torch.ones(H, W)
    mask[top : top + h, left : left + w] = 0.0
    return mask


def _rand(generator, lo=0.0, hi=1.0) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=generator))


def free_form_mask(
    shape: tuple[int, int],
    params: StrokeParams = StrokeParams(),
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Zeros drawn as random brush strokes (polyline random walks dilated to
    the brush width)."""
    H, W = shape
    side = min(H, W)
    yy, xx = torch.meshgrid(
        torch.arange(H, dtype=torch.float32),
        torch.arange(W, dtype=torch.float32),
        indexing="ij",
    )
    painted = torch.zeros(H, W, dtype=torch.bool)
    lo_s, hi_s = params.num_strokes
    n_strokes = int(torch.randint(lo_s, hi_s + 1, (1,), generator=generator)) if hi_s > lo_s else lo_s
    for _ in range(n_strokes):
        x = _rand(generator, 0, W - 1)
        y = _rand(generator, 0, H - 1)
        angle = _rand(generator, 0, 2 * math.pi)
        radius = max(0.5, _rand(generator, *params.width_frac) * side / 2)
        n_vertices = int(torch.randint(1, params.max_vertices + 1, (1,), generator=generator))
        for _ in range(n_vertices):
            angle += _rand(generator, -params.max_angle, params.max_angle)
            length = _rand(generator, *params.length_frac) * side
            x2 = x + length * math.cos(angle)
            y2 = y + length * math.sin(angle)
            n_pts = max(2, int(length / max(radius / 2, 0.5)) + 1)
            for k in range(n_pts):
                f = k / (n_pts - 1)
                cx, cy = x + f * (x2 - x), y + f * (y2 - y)
                painted |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
            x = min(max(x2, 0.0), W - 1.0)
            y = min(max(y2, 0.0), H - 1.0)
    return 1.0 - painted.float()


def draw_training_mask(
    shape: tuple[int, int],
    cfg: MaskConfig,
    generator: torch.Generator | None = None,
    max_tries: int = 20,
) -> torch.Tensor:
    """Fresh valid training mask; degenerate draws (all kept / all edited)
    are redrawn."""
    for _ in range(max_tries):
        if len(cfg.kinds) == 1:
            kind = cfg.kinds[0]
        else:
            kind = cfg.kinds[int(torch.randint(len(cfg.kinds), (1,), generator=generator))]
        if kind == "rect":
            mask = random_rect_mask(shape, cfg.min_area_frac, cfg.max_area_frac, generator)
        else:
            mask = free_form_mask(shape, cfg.strokes, generator)
        if bool((mask == 0).any()) and bool((mask == 1).any()):
            return mask
    raise RuntimeError(f"no valid training mask after {max_tries} draws")


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked image x * M with the mask broadcast over channels."""
    m = mask
    if m.ndim == image.ndim - 1:
        m = m.unsqueeze(-3)
    return image * m.to(image.dtype)
