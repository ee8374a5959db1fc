"""Cosine masking scheduler.

Training side: draw a masking probability p = cos(u), u ~ U[0, pi/2], then
mask each grid position independently with probability p. Sampling side: the
number of still-masked positions after step n follows
ceil(total * cos(pi/2 * n / n_steps)), forced to 0 at the final step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codegram import MaskTensor
from .errors import ValidationError


@dataclass(frozen=True)
class TrainMaskDraw:
    """One training mask together with the probability it was drawn at."""

    p: float
    mask: MaskTensor


def draw_train_mask(length: int, levels: int, rng: np.random.Generator,
                    u: float | None = None) -> TrainMaskDraw:
    """Draw p = cos(u) and an independent Bernoulli(p) flag per position.

    `u` can be forced for tests; by default it is drawn from U[0, pi/2].
    """
    if length < 1 or levels < 1:
        raise ValidationError(f"grid shape must be positive, got {length}x{levels}")
    if u is None:
        u = rng.uniform(0.0, math.pi / 2.0)
    p = math.cos(u)
    flags = rng.random((length, levels)) < p
    return TrainMaskDraw(p=p, mask=MaskTensor(flags))


@dataclass(frozen=True)
class SampleSchedule:
    """Masked-position counts across sampling steps.

    masked_counts has n_steps+1 entries: full grid at step 0, zero at the end.
    kappas[n] is how many positions get committed during step n.
    """

    total_positions: int
    n_steps: int
    masked_counts: tuple[int, ...]

    @property
    def kappas(self) -> tuple[int, ...]:
        return tuple(
            self.masked_counts[n] - self.masked_counts[n + 1] for n in range(self.n_steps)
        )


def build_sample_schedule(total: int, n_steps: int) -> SampleSchedule:
    """Cosine count schedule: ceil(total * cos(pi/2 * n/n_steps)), final step 0."""
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    if total < 0:
        raise ValidationError(f"total must be >= 0, got {total}")
    counts = [
        math.ceil(total * math.cos(math.pi / 2.0 * n / n_steps)) for n in range(n_steps)
    ]
    counts.append(0)
    counts[0] = total
    return SampleSchedule(total_positions=total, n_steps=n_steps,
                          masked_counts=tuple(counts))


def schedule_dump(schedule: SampleSchedule) -> str:
    """CSV dump: step, masked_count (after the step), kappa committed in it."""
    lines = ["step,masked_count,kappa"]
    for n, kappa in enumerate(schedule.kappas):
        lines.append(f"{n},{schedule.masked_counts[n + 1]},{kappa}")
    return "\n".join(lines) + "\n"
