"""Discretization-level hierarchy, its work model and warm-up allocation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def work_model(level: int, base_work: float, rate: float) -> float:
    """Work of a single sample on ``level``: ``base_work * 2**(rate * level)``."""
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    if base_work <= 0:
        raise ValueError(f"base_work must be positive, got {base_work}")
    return float(base_work) * 2.0 ** (rate * level)


@dataclass(frozen=True)
class LevelHierarchy:
    """Levels ``0..L`` with per-sample work ``W_l`` and a model resolution token.

    ``resolution`` holds one opaque token per level that is handed to the model
    (the level index itself unless configured otherwise).
    """

    work: tuple[float, ...]
    work_rate: float = 4.0
    resolution: tuple = field(default=())

    def __post_init__(self):
        work = tuple(float(w) for w in self.work)
        if not work:
            raise ValueError("hierarchy needs at least one level")
        if any(w <= 0 for w in work):
            raise ValueError("work per sample must be positive")
        if any(b <= a for a, b in zip(work, work[1:])):
            raise ValueError("work per sample must be strictly increasing in the level")
        object.__setattr__(self, "work", work)
        if not self.resolution:
            object.__setattr__(self, "resolution", tuple(range(len(work))))
        elif len(self.resolution) != len(work):
            raise ValueError("one resolution token per level is required")

    @classmethod
    def geometric(cls, num_levels: int, base_work: float = 1.0, rate: float = 4.0):
        if num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if rate <= 0:
            raise ValueError("work growth rate must be positive")
        work = tuple(work_model(l, base_work, rate) for l in range(num_levels))
        return cls(work=work, work_rate=rate)

    @property
    def num_levels(self) -> int:
        return len(self.work)

    @property
    def finest(self) -> int:
        return len(self.work) - 1

    def pair_work(self, level: int) -> float:
        """Cost of one sample of difference level ``level`` (fine + coarse solve)."""
        if level == 0:
            return self.work[0]
        return self.work[level] + self.work[level - 1]

    def pair_costs(self) -> np.ndarray:
        return np.array([self.pair_work(l) for l in range(self.num_levels)])


def warmup_allocation(hierarchy: LevelHierarchy) -> list[int]:
    """Level-dependent warm-up counts ``ceil(W_L / W_l * 2**-(L-l))``.

    The finest level always receives a single sample.
    """
    work = hierarchy.work
    top = hierarchy.finest
    counts = []
    for level, w in enumerate(work):
        # exact for power-of-two work ratios, avoids ceil(8.000000001)
        ratio = work[top] / w * 2.0 ** (level - top)
        counts.append(max(1, math.ceil(round(ratio, 9))))
    return counts
