"""Model interface shared by all built-in models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


@dataclass
class ModelSample:
    """One model evaluation: scalar QoIs, optional time series, work and validity."""

    qoi: dict
    series: dict = field(default_factory=dict)
    work: float = 0.0
    valid: bool = True
    reason: str = ""

    def __post_init__(self):
        for name, (grid, values) in self.series.items():
            grid = np.asarray(grid, dtype=float)
            if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
                raise ValueError(f"series {name!r}: grid must be strictly increasing")
            if np.shape(values) != grid.shape:
                raise ValueError(f"series {name!r}: values do not match the grid")

    def to_dict(self) -> dict:
        return {
            "qoi": {k: float(v) for k, v in self.qoi.items()},
            "series": {
                k: {"grid": np.asarray(g).tolist(), "values": np.asarray(v).tolist()}
                for k, (g, v) in self.series.items()
            },
            "work": float(self.work),
            "valid": bool(self.valid),
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSample":
        series = {
            k: (np.asarray(v["grid"], dtype=float), np.asarray(v["values"], dtype=float))
            for k, v in d.get("series", {}).items()
        }
        return cls(
            qoi=dict(d["qoi"]),
            series=series,
            work=float(d.get("work", 0.0)),
            valid=bool(d.get("valid", True)),
            reason=d.get("reason", ""),
        )

    @classmethod
    def invalid(cls, reason: str, work: float = 0.0) -> "ModelSample":
        return cls(qoi={}, work=work, valid=False, reason=reason)


class Model(Protocol):
    name: str
    qoi_names: tuple

    def sample(self, omega: int, level: int) -> ModelSample: ...

    def params(self) -> dict: ...


def coupled_pair(omega: int, level: int, model):
    """Evaluate the same random input on ``level`` and ``level - 1``.

    Level 0 returns ``(sample, None)``.  Exceptions from either side propagate
    to the caller; the scheduler turns them into failed entries.
    """
    fine = model.sample(omega, level)
    if level == 0:
        return fine, None
    coarse = model.sample(omega, level - 1)
    return fine, coarse


def pair_valid(fine, coarse) -> bool:
    return fine.valid and (coarse is None or coarse.valid)
