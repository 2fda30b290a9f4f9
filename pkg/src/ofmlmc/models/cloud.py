"""Random spherical bubble clouds and their geometric metrics.

Lengths are in millimetres.  Draw order per cavity (fixed, so that every
evaluation of the same random input rebuilds the identical cloud):

1. log-normal radius, redrawn until inside ``[r_min, r_max]``;
2. three uniforms for the centre, redrawn until inside the ball of radius
   ``cloud_radius - r``;
3. on overlap with an already placed cavity, start again at 1.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import CloudGenerationError

# random close packing of equal spheres
PACKING_LIMIT = 0.64


@dataclass
class CloudParams:
    n_bubbles: int = 500
    cloud_radius: float = 20.0
    r_min: float = 0.8
    r_max: float = 1.2
    log_mean: float = 0.0  # ln(1 mm)
    log_sigma: float = 0.1
    center: tuple = (50.0, 50.0, 50.0)
    core_radius: float = 10.0
    max_attempts: int = 20_000

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        if self.n_bubbles < 1:
            raise ValueError("n_bubbles must be >= 1")
        if not 0 < self.r_min <= self.r_max < self.cloud_radius:
            raise ValueError("need 0 < r_min <= r_max < cloud_radius")


@dataclass
class CloudConfiguration:
    positions: np.ndarray
    radii: np.ndarray
    center: np.ndarray
    cloud_radius: float
    core_radius: float = 10.0
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        if not self.metrics:
            self.metrics = cloud_metrics(
                self.positions, self.radii, self.center, self.cloud_radius, self.core_radius
            )

    @property
    def n_bubbles(self) -> int:
        return self.radii.size

    def violations(self, r_min=None, r_max=None, atol=1e-9) -> list[str]:
        """Names of violated invariants (empty when the cloud is valid)."""
        out = []
        dist = np.linalg.norm(self.positions - self.center, axis=1)
        if np.any(dist + self.radii > self.cloud_radius + atol):
            out.append("outside-cloud")
        if r_min is not None and np.any(self.radii < r_min - atol):
            out.append("radius-below-min")
        if r_max is not None and np.any(self.radii > r_max + atol):
            out.append("radius-above-max")
        if self.n_bubbles > 1:
            d = np.linalg.norm(self.positions[:, None, :] - self.positions[None, :, :], axis=-1)
            gap = d - (self.radii[:, None] + self.radii[None, :])
            np.fill_diagonal(gap, np.inf)
            if np.any(gap < -atol):
                out.append("overlap")
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z", "r"])
            for (x, y, z), r in zip(self.positions, self.radii):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(r))])

    @classmethod
    def from_csv(cls, path, center, cloud_radius, core_radius=10.0):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :3], data[:, 3], center, cloud_radius, core_radius)


def _third_moment(x: np.ndarray) -> np.ndarray:
    if x.shape[0] == 0:
        return np.zeros(3)
    return np.mean((x - x.mean(axis=0)) ** 3, axis=0)


def cloud_metrics(positions, radii, center, cloud_radius, core_radius=10.0) -> dict:
    """Gas fraction, average radius, interaction parameter, skewness, central distance.

    The interaction parameter is ``gas_fraction * (cloud_radius / avg_radius)**2``;
    skewness is the centred third moment of cavity positions per axis (mm^3).
    The ``core_*`` entries repeat the computation for cavities whose centre lies
    within ``core_radius`` of the cloud centre.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    radii = np.asarray(radii, dtype=float)
    center = np.asarray(center, dtype=float)
    dist = np.linalg.norm(positions - center, axis=1)
    gas = float(np.sum(radii**3) / cloud_radius**3)
    avg = float(np.mean(radii))
    skew = _third_moment(positions)
    out = {
        "gas_fraction": gas,
        "avg_radius": avg,
        "beta": gas * (cloud_radius / avg) ** 2,
        "skewness_x": float(skew[0]),
        "skewness_y": float(skew[1]),
        "skewness_z": float(skew[2]),
        "skewness": float(np.linalg.norm(skew)),
        "central_distance": float(dist.min()),
    }
    core = dist <= core_radius
    if np.any(core):
        core_gas = float(np.sum(radii[core] ** 3) / core_radius**3)
        core_skew = _third_moment(positions[core])
        out["core_gas_fraction"] = core_gas
        out["core_beta"] = core_gas * (core_radius / float(np.mean(radii[core]))) ** 2
        out["core_skewness"] = float(np.linalg.norm(core_skew))
    else:
        out["core_gas_fraction"] = 0.0
        out["core_beta"] = 0.0
        out["core_skewness"] = 0.0
    return out


def _draw_radius(rng: np.random.Generator, p: CloudParams) -> float:
    if p.r_min == p.r_max:
        # degenerate clip: fixed radius, draw kept so the stream layout is unchanged
        rng.lognormal(p.log_mean, p.log_sigma)
        return float(p.r_min)
    for _ in range(p.max_attempts):
        r = rng.lognormal(p.log_mean, p.log_sigma)
        if p.r_min <= r <= p.r_max:
            return float(r)
    raise CloudGenerationError("log-normal radius distribution rarely falls inside [r_min, r_max]")


def _draw_position(rng: np.random.Generator, reach: float) -> np.ndarray:
    while True:
        x = rng.uniform(-1.0, 1.0, 3)
        if x @ x <= 1.0:
            return x * reach


def generate_cloud(rng: np.random.Generator, params: CloudParams | None = None) -> CloudConfiguration:
    """Random non-overlapping cavities inside a sphere."""
    p = params or CloudParams()
    if p.n_bubbles * p.r_min**3 > PACKING_LIMIT * p.cloud_radius**3:
        raise CloudGenerationError(
            f"{p.n_bubbles} cavities of radius >= {p.r_min} cannot fit in radius {p.cloud_radius}"
        )
    center = np.asarray(p.center, dtype=float)
    pos = np.empty((p.n_bubbles, 3))
    rad = np.empty(p.n_bubbles)
    for k in range(p.n_bubbles):
        for _ in range(p.max_attempts):
            r = _draw_radius(rng, p)
            x = _draw_position(rng, p.cloud_radius - r)
            if k == 0:
                break
            gap = np.sqrt(np.sum((pos[:k] - x) ** 2, axis=1)) - rad[:k] - r
            if gap.min() >= 0.0:
                break
        else:
            raise CloudGenerationError(f"could not place cavity {k} after {p.max_attempts} attempts")
        pos[k] = x
        rad[k] = r
    return CloudConfiguration(pos + center, rad, center, p.cloud_radius, p.core_radius)


def gas_fraction_for(n_bubbles: int, radius: float, cloud_radius: float) -> float:
    return n_bubbles * radius**3 / cloud_radius**3


def cloud_radius_for(n_bubbles: int, radius: float, gas_fraction: float) -> float:
    """Cloud radius giving ``gas_fraction`` for equal cavities of ``radius``."""
    return radius * (n_bubbles / gas_fraction) ** (1.0 / 3.0)


def params_dict(p: CloudParams) -> dict:
    d = asdict(p)
    d["center"] = list(p.center)
    return d

