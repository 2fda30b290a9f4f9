"""Analytic synthetic hierarchy used to verify the estimator.

``q_l = mean + X + c * 2**(-s*l) * Z_l`` with ``X, Z_0, Z_1, ...`` independent
standard normals drawn from the sample stream in that order, so

    V[q_l] = 1 + c**2 * 4**(-s*l),   Cov[q_l, q_{l-1}] = 1.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..streams import stream_from
from .base import ModelSample


@dataclass
class SyntheticModel:
    decay: float = 1.0
    amplitude: float = 1.0
    mean: float = 0.0
    base_work: float = 1.0
    work_rate: float = 4.0
    series_points: int = 0

    name = "synthetic"
    qoi_names = ("q",)

    def value(self, omega: int, level: int) -> float:
        z = stream_from(omega).standard_normal(level + 2)
        return self.mean + z[0] + self.amplitude * 2.0 ** (-self.decay * level) * z[level + 1]

    def sample(self, omega: int, level: int) -> ModelSample:
        if level < 0:
            raise ValueError("level must be non-negative")
        q = self.value(omega, level)
        series = {}
        if self.series_points:
            t = np.linspace(0.0, 1.0, self.series_points)
            series["trace"] = (t, q * np.sin(math.pi * t) + t)
        return ModelSample(
            qoi={"q": q},
            series=series,
            work=self.base_work * 2.0 ** (self.work_rate * level),
        )

    def draw_pairs(self, rng: np.random.Generator, level: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` coupled (fine, coarse) pairs from one generator, for large-sample checks.

        Same law as ``sample`` but vectorised; values differ from the keyed streams.
        """
        if level < 1:
            raise ValueError("pairs need level >= 1")
        x, zc, zf = rng.standard_normal((3, n))
        c = self.amplitude
        fine = self.mean + x + c * 2.0 ** (-self.decay * level) * zf
        coarse = self.mean + x + c * 2.0 ** (-self.decay * (level - 1)) * zc
        return fine, coarse

    def params(self) -> dict:
        return asdict(self)

    # analytic moments
    def variance(self, level: int) -> float:
        return 1.0 + self.amplitude**2 * 4.0 ** (-self.decay * level)

    def covariance(self, level: int) -> float:
        return 1.0

    def correlation(self, level: int) -> float:
        return 1.0 / math.sqrt(self.variance(level) * self.variance(level - 1))

    def difference_variance(self, level: int) -> float:
        c2 = self.amplitude**2
        return c2 * (4.0 ** (-self.decay * level) + 4.0 ** (-self.decay * (level - 1)))

    def weighted_variances(self, alpha) -> np.ndarray:
        """Exact variances of the alpha-weighted differences."""
        alpha = np.asarray(alpha, dtype=float)
        out = np.empty(alpha.size)
        out[0] = alpha[0] ** 2 * self.variance(0)
        for l in range(1, alpha.size):
            out[l] = (
                alpha[l] ** 2 * self.variance(l)
                + alpha[l - 1] ** 2 * self.variance(l - 1)
                - 2 * alpha[l] * alpha[l - 1] * self.covariance(l)
            )
        return out
