"""Progressive augmentation schedule: when to supervise on synthetic views.

The preference weight ``w(t) = base + amplitude * t**(a-1) * (1-t)**(b-1)``
uses the *unnormalised* Beta kernel. Two mappings to a probability exist:
``odds`` (``w / (1 + w)``, synthetic weight against a ground-truth weight of
one) and ``clamp`` (``min(1, w)``).

Draws use numpy's Philox counter-based generator, which gives the same
stream on every platform for a given seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .scene import Role


class Interpretation(str, enum.Enum):
    ODDS = "odds"
    CLAMP = "clamp"


@dataclass
class ScheduleParams:
    base: float = 0.1
    amplitude: float = 20.0
    alpha: float = 2.0
    beta: float = 4.0
    interpretation: Interpretation = Interpretation.ODDS
    seed: int = 0
    # when set, overrides the schedule with a constant probability
    constant_p: float | None = None

    def __post_init__(self):
        self.interpretation = Interpretation(self.interpretation)
        if self.base < 0 or self.amplitude < 0:
            raise ValueError("schedule base and amplitude must be non-negative")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta shape parameters must be positive")
        if self.constant_p is not None and not 0 <= self.constant_p <= 1:
            raise ValueError(f"constant_p must lie in [0, 1], got {self.constant_p}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"training progress t must lie in [0, 1], got {t}")
    return t


def schedule_weight(t: float, params: ScheduleParams | None = None) -> float:
    p = params or ScheduleParams()
    t = _check_t(t)
    return float(p.base + p.amplitude * t ** (p.alpha - 1) * (1 - t) ** (p.beta - 1))


def sample_probability(t: float, params: ScheduleParams | None = None) -> float:
    p = params or ScheduleParams()
    if p.constant_p is not None:
        _check_t(t)
        return float(p.constant_p)
    w = schedule_weight(t, p)
    if p.interpretation is Interpretation.ODDS:
        return w / (1.0 + w)
    return min(1.0, w)


def mode(params: ScheduleParams | None = None) -> float:
    """Location of the kernel maximum, ``(a - 1) / (a + b - 2)``."""
    p = params or ScheduleParams()
    return (p.alpha - 1) / (p.alpha + p.beta - 2)


def sample_source(t: float, params: ScheduleParams, rng: np.random.Generator,
                  n_ground_truth: int, n_synthetic: int, *, degrade: bool = True) -> tuple[Role, int]:
    """Pick the supervision branch and a view index within that role.

    Always consumes exactly two uniforms (branch, then view), so runs that
    differ only in their view sets stay on the same random stream. If the
    drawn role has no views, ``degrade`` switches to the other role;
    otherwise the drawn role is returned with index -1.
    """
    if n_ground_truth + n_synthetic == 0:
        raise ValueError("no training views to sample from")
    u_branch, u_view = rng.random(2)
    synthetic = bool(u_branch < sample_probability(t, params))
    count = n_synthetic if synthetic else n_ground_truth
    if count == 0:
        if not degrade:
            return (Role.SYNTHETIC if synthetic else Role.GROUND_TRUTH), -1
        synthetic = not synthetic
        count = n_synthetic if synthetic else n_ground_truth
    return (Role.SYNTHETIC if synthetic else Role.GROUND_TRUTH), min(int(u_view * count), count - 1)


def schedule_table(iterations: int, params: ScheduleParams | None = None) -> list[tuple[int, float, float, float]]:
    """Rows ``(iteration, t, w, p)`` for every iteration."""
    p = params or ScheduleParams()
    rows = []
    for it in range(iterations):
        t = it / max(iterations - 1, 1)
        rows.append((it, t, schedule_weight(t, p), sample_probability(t, p)))
    return rows
