"""Loss-gap decomposition for growth-at-tau versus training big from scratch.

The schedule-weighted average loss difference splits into two interpretable
parts: a capacity term (the fraction of learning-rate mass spent before the
growth step, times the gap between the small and big models' attainable
losses) and an initialization term (how much closer the grown initialization
sits to the big reference point than a random one, per unit of remaining
learning-rate mass).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericError
from .model import Schedule


@dataclass
class BoundInputs:
    schedule: Schedule
    tau: int
    lstar_small: float  # best loss attainable at the small size
    lstar_big: float  # best loss attainable at the big size
    dist_up_sq: float  # ||theta_new(grown) - theta_new(reference)||^2
    dist_rand_sq: float  # ||theta_new(random) - theta_new(reference)||^2

    def validate(self) -> "BoundInputs":
        if not 0 <= self.tau <= self.schedule.total_steps:
            raise InvalidInputError("tau must lie in [0, total_steps]")
        if self.dist_up_sq < 0 or self.dist_rand_sq < 0:
            raise InvalidInputError("squared distances must be >= 0")
        return self


def lr_sum(schedule: Schedule, t0: int, t1: int) -> float:
    """Brute-force sum of lr_at over [t0, t1)."""
    if not 0 <= t0 <= t1 <= schedule.total_steps:
        raise InvalidInputError("range outside the schedule")
    return float(sum(schedule.lr_at(t) for t in range(t0, t1)))


def term1(inp: BoundInputs) -> float:
    """Capacity term: lr mass spent before growth, times the size gap."""
    inp.validate()
    total = lr_sum(inp.schedule, 0, inp.schedule.total_steps)
    if total <= 0.0:
        raise NumericError("schedule has zero learning-rate mass")
    return lr_sum(inp.schedule, 0, inp.tau) / total * (inp.lstar_small - inp.lstar_big)


def term2(inp: BoundInputs) -> float:
    """Initialization term: change in squared distance to the reference point,
    per twice the total learning-rate mass. Negative means the grown start is
    closer than a random one (an initialization gain)."""
    inp.validate()
    total = lr_sum(inp.schedule, 0, inp.schedule.total_steps)
    if total <= 0.0:
        raise NumericError("schedule has zero learning-rate mass")
    return (inp.dist_up_sq - inp.dist_rand_sq) / (2.0 * total)


def bound(inp: BoundInputs) -> float:
    return term1(inp) + term2(inp)


def weighted_avg_loss(losses: Sequence[float], schedule: Schedule, t0: int = 0, t1: int | None = None) -> float:
    """Learning-rate-weighted average of per-step losses over steps [t0, t1).
    losses[t] must be the loss at global step t, so the sequence covers at
    least t1 entries."""
    if t1 is None:
        t1 = schedule.total_steps
    if not 0 <= t0 <= t1 <= schedule.total_steps:
        raise InvalidInputError("range outside the schedule")
    arr = np.asarray(losses, dtype=np.float64)
    if arr.ndim != 1 or arr.size < t1:
        raise InvalidInputError("need one loss per step up to the end of the range")
    lrs = np.array([schedule.lr_at(t) for t in range(t0, t1)])
    mass = lrs.sum()
    if mass <= 0.0:
        raise NumericError("zero learning-rate mass over the range")
    return float((lrs * arr[t0:t1]).sum() / mass)