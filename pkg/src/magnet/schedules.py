"""Scalar schedules driving the iterative decoder.

Three schedules are indexed by the iteration of a level's decode loop of s
total iterations:

* masking rate  gamma(i) = cos(pi * (i - 1) / (2 s)) for 1-based i, so
  gamma(1) = 1 and the rate decays toward (but never reaches) zero;
* guidance coefficient lambda = gamma * lambda0 + (1 - gamma) * lambda1,
  annealing from lambda0 down to lambda1 as the masking rate decays;
* sampling temperature tau(i) = tau0 * (s - i + 1) / s, floored at a small
  epsilon so the final iterations sharpen without degenerating the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TEMP_FLOOR = 1e-4


@dataclass(frozen=True)
class ScheduleParams:
    """Bundle of schedule constants shared by decoding and the CLI."""

    total_steps: int = 20
    lambda0: float = 10.0
    lambda1: float = 1.0
    tau0: float = 3.0
    top_p: float = 0.9

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError(
                f"lambda0 and lambda1 must be >= 0, got {self.lambda0}, {self.lambda1}"
            )
        if self.tau0 < 0:
            raise ValueError(f"tau0 must be >= 0, got {self.tau0}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


def gamma(i: int, s: int) -> float:
    """Masking-rate schedule, cos(pi * (i - 1) / (2 s)) for 1-based i in 1..s."""
    _check_step(i, s)
    return math.cos(math.pi * (i - 1) / (2 * s))


def gamma_from_zero(j: int, s: int) -> float:
    """Zero-based variant: cos(pi * j / (2 s)) for j in 0..s-1.

    Identical values to :func:`gamma` at j = i - 1; the decode loop counts
    iterations from zero and uses this form.
    """
    if s < 1:
        raise ValueError(f"total steps s must be >= 1, got {s}")
    if not 0 <= j < s:
        raise ValueError(f"iteration j must be in [0, {s}), got {j}")
    return math.cos(math.pi * j / (2 * s))


def cfg_coeff(gamma_val: float, lambda0: float, lambda1: float) -> float:
    """Guidance coefficient: linear interpolation between lambda1 and lambda0.

    Returns gamma_val * lambda0 + (1 - gamma_val) * lambda1, so the guidance
    sits at lambda0 while everything is masked (gamma = 1) and anneals to
    lambda1 as the masked fraction vanishes.
    """
    if not 0.0 <= gamma_val <= 1.0:
        raise ValueError(f"gamma_val must be in [0, 1], got {gamma_val}")
    return gamma_val * lambda0 + (1.0 - gamma_val) * lambda1


def temperature(i: int, s: int, tau0: float = 3.0) -> float:
    """Linearly decaying temperature, clamped below at TEMP_FLOOR.

    tau0 = 0 is allowed and yields the floor at every step, i.e. argmax
    sampling.
    """
    _check_step(i, s)
    if tau0 < 0:
        raise ValueError(f"tau0 must be >= 0, got {tau0}")
    return max(tau0 * (s - i + 1) / s, TEMP_FLOOR)


def _check_step(i: int, s: int) -> None:
    if s < 1:
        raise ValueError(f"total steps s must be >= 1, got {s}")
    if not 1 <= i <= s:
        raise ValueError(f"iteration i must be in [1, {s}], got {i}")
