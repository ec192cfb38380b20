"""Noise schedule, derived coefficients, and accelerated-sampling step grids.

Everything downstream (forward processes, losses, samplers) reads its
coefficients from here. Schedules are stored in float64 so the closed-form
verification suite can hold tight tolerances; consumers cast to the dtype of
their tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DegenerateStepError

# Below this, a step's zeta denominator is treated as a configuration error.
ZETA_DENOM_EPS = 1e-12


@dataclass(frozen=True)
class StepPair:
    """One reverse jump t -> t_prev of a sampling subsequence (t_prev < t)."""

    t: int
    t_prev: int

    def __post_init__(self) -> None:
        if not 0 <= self.t_prev < self.t:
            raise ValueError(
                f"step pair requires 0 <= t_prev < t, got t={self.t}, t_prev={self.t_prev}"
            )


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables of a discrete diffusion chain.

    ``betas[i]`` is the variance increment of step ``t = i + 1`` (length T);
    ``alpha_bars`` is indexed directly by ``t`` in ``0..T`` with the
    convention ``alpha_bars[0] = 1``.
    """

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"beta defined for 1 <= t <= {self.T}, got {t}")
        return float(self.betas[t - 1])

    def alpha_bar(self, t):
        """alpha_bar at time index t; t may be an int or an index tensor."""
        if isinstance(t, torch.Tensor):
            return self.alpha_bars[t.long()]
        return float(self.alpha_bars[int(t)])


def build_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Standard DDPM-style linear beta schedule with alpha_bars[0] = 1."""
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cat(
        [torch.ones(1, dtype=torch.float64), torch.cumprod(alphas, dim=0)]
    )
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def zeta_coefficient(schedule: NoiseSchedule, pair: StepPair) -> float:
    """Trigger-shift coefficient of the backdoored noise target for one step.

    zeta = (sqrt(ab_prev) - sqrt(ab_t))
           / (sqrt(ab_prev) sqrt(1-ab_t) - sqrt(ab_t) sqrt(1-ab_prev))

    With ab_prev = 1 this reduces to (1 - sqrt(ab_t)) / sqrt(1 - ab_t).
    """
    if pair.t > schedule.T:
        raise ValueError(f"pair.t={pair.t} exceeds schedule horizon T={schedule.T}")
    ab_t = schedule.alpha_bar(pair.t)
    ab_prev = schedule.alpha_bar(pair.t_prev)
    num = math.sqrt(ab_prev) - math.sqrt(ab_t)
    den = math.sqrt(ab_prev) * math.sqrt(1.0 - ab_t) - math.sqrt(ab_t) * math.sqrt(
        1.0 - ab_prev
    )
    if abs(den) < ZETA_DENOM_EPS:
        raise DegenerateStepError(
            f"degenerate step ({pair.t}->{pair.t_prev}): zeta denominator {den!r} "
            f"below {ZETA_DENOM_EPS}"
        )
    return num / den


def consecutive_zeta_table(schedule: NoiseSchedule) -> torch.Tensor:
    """zeta for every consecutive pair (t-1, t), indexed by t in 1..T.

    Entry 0 is NaN (no step ends below t=0). Used for batched training
    losses; built through the scalar path so it matches per-pair
    ``zeta_coefficient`` bit for bit (torch's vectorized sqrt can differ
    from math.sqrt by 1 ulp).
    """
    table = torch.full((schedule.T + 1,), float("nan"), dtype=torch.float64)
    for t in range(1, schedule.T + 1):
        table[t] = zeta_coefficient(schedule, StepPair(t, t - 1))
    return table


def ddim_subsequence(T: int, n_steps: int) -> list[StepPair]:
    """Evenly spaced descending step pairs from T to 0.

    Grid indices are floor(i * T / n_steps) for i = 0..n_steps (integer
    arithmetic, so exact), deduplicated; returned pairs tile [0, T] with the
    t_prev of each pair equal to the t of the next.
    """
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not isinstance(n_steps, int) or not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= n_steps <= T={T}, got {n_steps!r}")
    grid: list[int] = []
    for i in range(n_steps + 1):
        v = (i * T) // n_steps
        if not grid or v != grid[-1]:
            grid.append(v)
    return [StepPair(t=grid[k], t_prev=grid[k - 1]) for k in range(len(grid) - 1, 0, -1)]
