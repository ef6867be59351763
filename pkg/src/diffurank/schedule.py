"""Cumulative noise schedules for the continuous-time forward process.

A schedule maps a timestamp ``t`` in ``[0, 1]`` to the cumulative
signal coefficient ``alpha_bar(t)`` in ``(0, 1]``.  The forward process
mixes a clean vector ``x0`` with Gaussian noise ``eps`` as

    x_t = sqrt(alpha_bar(t)) * x0 + sqrt(1 - alpha_bar(t)) * eps

so ``alpha_bar(0) = 1`` means "no noise" and values near 0 mean
"almost pure noise".  Schedules here are continuous in ``t``; backends
that define a discrete step ladder can be adapted by interpolating
their cumulative coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# alpha_bar(1) must be at most this, otherwise late timestamps carry too
# much signal for the score estimate to discriminate anything.
MAX_TERMINAL_ALPHA_BAR = 0.01

# Floor applied by the cosine schedule so alpha_bar stays strictly positive.
COSINE_ALPHA_BAR_FLOOR = 1e-5


class ScheduleError(ValueError):
    """A schedule violates the alpha_bar contract."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Continuous cumulative-noise schedule.

    ``alpha_bar`` accepts a float or ndarray of timestamps in [0, 1] and
    returns values in (0, 1].  It must be monotonically non-increasing,
    with ``alpha_bar(0) == 1`` and ``alpha_bar(1) <= 0.01``.
    """

    alpha_bar: Callable[[np.ndarray | float], np.ndarray | float]
    name: str = field(default="unnamed")

    def signal_level(self, t: np.ndarray | float) -> np.ndarray | float:
        """sqrt(alpha_bar(t)): the coefficient applied to the clean vector."""
        return np.sqrt(self.alpha_bar(t))

    def noise_level(self, t: np.ndarray | float) -> np.ndarray | float:
        """sqrt(1 - alpha_bar(t)): the coefficient applied to the noise."""
        return np.sqrt(1.0 - np.asarray(self.alpha_bar(t)))


def linear_alpha_bar_schedule(slope: float = 0.99) -> NoiseSchedule:
    """Default schedule, linear in alpha_bar: ``alpha_bar(t) = 1 - slope * t``.

    At ``slope=0.99`` the terminal value is exactly 0.01.
    """
    if not 0.99 <= slope < 1.0:
        raise ScheduleError(f"slope must be in [0.99, 1) to satisfy the terminal bound, got {slope}")

    def alpha_bar(t):
        return 1.0 - slope * np.asarray(t, dtype=np.float64)

    return NoiseSchedule(alpha_bar=alpha_bar, name=f"linear-{slope}")


def cosine_alpha_bar_schedule(offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine schedule with a small offset, floored away from zero."""

    def alpha_bar(t):
        t = np.asarray(t, dtype=np.float64)
        f = np.cos((t + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        f0 = np.cos(offset / (1.0 + offset) * np.pi / 2.0) ** 2
        return np.maximum(f / f0, COSINE_ALPHA_BAR_FLOOR)

    return NoiseSchedule(alpha_bar=alpha_bar, name="cosine")


def validate_schedule(schedule: NoiseSchedule, grid_size: int = 1024) -> None:
    """Check the schedule contract on a dense grid; raise ScheduleError on violation.

    Checks: alpha_bar(0) == 1 within 1e-12, alpha_bar(1) <= 0.01, values in
    (0, 1], and monotone non-increase over ``grid_size`` evenly spaced points.
    """
    t = np.linspace(0.0, 1.0, grid_size)
    values = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    if values.shape != t.shape:
        raise ScheduleError(f"schedule '{schedule.name}' is not vectorized over t")
    if abs(float(schedule.alpha_bar(0.0)) - 1.0) > 1e-12:
        raise ScheduleError(f"schedule '{schedule.name}': alpha_bar(0) != 1")
    if float(schedule.alpha_bar(1.0)) > MAX_TERMINAL_ALPHA_BAR + 1e-12:
        raise ScheduleError(
            f"schedule '{schedule.name}': alpha_bar(1) = {float(schedule.alpha_bar(1.0)):.6g} "
            f"exceeds {MAX_TERMINAL_ALPHA_BAR}"
        )
    if np.any(values <= 0.0) or np.any(values > 1.0):
        raise ScheduleError(f"schedule '{schedule.name}': values leave (0, 1]")
    if np.any(np.diff(values) > 1e-15):
        raise ScheduleError(f"schedule '{schedule.name}': alpha_bar is not non-increasing")


DEFAULT_SCHEDULE = linear_alpha_bar_schedule()
