"""Interacting-bubble collapse surrogate.

Each cavity follows a Rayleigh-Plesset equation forced by a delayed far-field
pressure ramp and by the radiated pressure of all other cavities,

    R_i R_i'' + 3/2 R_i'^2 = (p_b,i - p_inf,i(t)) / rho
                             - sum_{j != i} (R_j^2 R_j'' + 2 R_j R_j'^2) / d_ij,

with polytropic gas pressure ``p_b,i = p_gas0 (R0_i / R_i)**(3 gamma)`` and a
viscous wall term ``-4 mu R_i' / R_i`` added to ``p_b,i``.  With
``compressible`` set, the single-bubble part carries the first-order
acoustic corrections of the Keller-Miksis form, which bound the final
collapse of focused inner cavities.  The
level selects the fixed time step ``dt0 * 2**-level`` of a classic RK4
integrator, so every level solves the same random cloud.

SI units inside; cloud geometry comes in millimetres.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..streams import stream_from
from .base import ModelSample
from .cloud import CloudConfiguration, CloudParams, generate_cloud, params_dict

MM = 1e-3


def _desk_cloud() -> CloudParams:
    # about 6% gas, like the full 500-cavity cloud, at a fraction of the cost
    return CloudParams(n_bubbles=32, cloud_radius=8.0, core_radius=4.0)


@dataclass
class SurrogateParams:
    cloud: CloudParams = field(default_factory=_desk_cloud)
    rho_liquid: float = 1000.0
    p_gas0: float = 0.5e6
    p_inf: float = 10e6
    gamma: float = 1.4
    viscosity: float = 1e-3
    compressible: bool = True
    sound_speed: float = 1500.0
    ramp_time: float = 1e-6
    wave_delay: bool = True
    t_end: float = 40e-6
    dt0: float = 40e-9
    output_points: int = 256
    radius_floor: float = 1e-3
    max_step_change: float = 0.5
    coupling: str = "implicit"

    def __post_init__(self):
        if isinstance(self.cloud, dict):
            self.cloud = CloudParams(**self.cloud)
        if self.coupling not in ("implicit", "lagged"):
            raise ValueError("coupling must be 'implicit' or 'lagged'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cloud"] = params_dict(self.cloud)
        return d


def _ramp(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(math.pi * u))


@dataclass
class BubbleDynamics:
    """Coupled Rayleigh-Plesset system for one fixed cloud."""

    positions: np.ndarray  # m
    r0: np.ndarray  # m
    center: np.ndarray  # m
    cloud_radius: float  # m
    params: SurrogateParams

    def __post_init__(self):
        p = self.params
        self.n = self.r0.size
        d = np.linalg.norm(self.positions[:, None, :] - self.positions[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        self.inv_dist = 1.0 / d
        dc = np.linalg.norm(self.positions - self.center, axis=1)
        self.center_distance = dc
        # sensor inside a cavity sees the pressure at that cavity's wall
        self.inv_sensor_dist = 1.0 / np.maximum(dc, self.r0)
        if p.wave_delay:
            self.delay = np.maximum(self.cloud_radius - dc, 0.0) / p.sound_speed
            self.center_delay = self.cloud_radius / p.sound_speed
        else:
            self.delay = np.zeros(self.n)
            self.center_delay = 0.0
        self.prev_accel = np.zeros(self.n)

    def far_field(self, t: float, delay) -> np.ndarray:
        p = self.params
        if p.ramp_time <= 0:
            frac = np.where(t >= delay, 1.0, 0.0)
        else:
            frac = _ramp((t - delay) / p.ramp_time)
        return p.p_gas0 + (p.p_inf - p.p_gas0) * frac

    def gas_pressure(self, r: np.ndarray) -> np.ndarray:
        p = self.params
        return p.p_gas0 * (self.r0 / r) ** (3.0 * p.gamma)

    def acceleration(self, t: float, r: np.ndarray, v: np.ndarray) -> np.ndarray:
        p = self.params
        # stage values may undershoot the floor between steps
        r = np.maximum(r, p.radius_floor * self.r0)
        pg = self.gas_pressure(r)
        forcing = (pg - 4.0 * p.viscosity * v / r - self.far_field(t, self.delay)) / p.rho_liquid
        if p.compressible:
            mach = v / p.sound_speed
            # first-order acoustic terms; dp_gas/dt = -3 gamma p_gas R'/R
            rhs = (1.0 + mach) * forcing - 3.0 * p.gamma * pg * mach / p.rho_liquid
            rhs = rhs - 1.5 * v * v * (1.0 - mach / 3.0)
            diag = (1.0 - mach) / r
        else:
            rhs = forcing - 1.5 * v * v
            diag = 1.0 / r
        if self.n == 1:
            return rhs / (diag * r * r)
        rhs = rhs - self.inv_dist @ (2.0 * r * v * v)
        if p.coupling == "lagged":
            return (rhs - self.inv_dist @ (r * r * self.prev_accel)) / (diag * r * r)
        # (diag + G) y = rhs with y = R^2 R''
        a = self.inv_dist.copy()
        a[np.diag_indices(self.n)] = diag
        y = np.linalg.solve(a, rhs)
        return y / (r * r)

    def radiated(self, r, v, acc, inv_d) -> float:
        return float(self.params.rho_liquid * np.sum((r * r * acc + 2.0 * r * v * v) * inv_d))


def integrate(dyn: BubbleDynamics, dt: float, t_end: float, record_radii: bool = False):
    """Fixed-step RK4.  Returns the per-step history needed for the QoIs.

    Returns None on a non-finite state or when one step changes some radius by
    more than ``max_step_change`` of its value (the step cannot resolve the
    collapse).  ``record_radii`` adds the full radius history under "radii".
    """
    p = dyn.params
    steps = int(round(t_end / dt))
    r = dyn.r0.copy()
    v = np.zeros(dyn.n)
    floor = p.radius_floor * dyn.r0
    times = np.empty(steps + 1)
    sensor = np.empty(steps + 1)
    peak = np.empty(steps + 1)
    peak_idx = np.empty(steps + 1, dtype=int)
    volume = np.empty(steps + 1)
    radii = np.empty((steps + 1, dyn.n)) if record_radii else None
    t = 0.0
    for n in range(steps + 1):
        t = n * dt
        a1 = dyn.acceleration(t, r, v)
        if not (np.all(np.isfinite(a1)) and np.all(np.isfinite(r))):
            return None
        times[n] = t
        sensor[n] = dyn.far_field(t, dyn.center_delay) + dyn.radiated(r, v, a1, dyn.inv_sensor_dist)
        pb = dyn.gas_pressure(r)
        peak_idx[n] = int(np.argmax(pb))
        peak[n] = pb[peak_idx[n]]
        volume[n] = 4.0 / 3.0 * math.pi * np.sum(r**3)
        if record_radii:
            radii[n] = r
        if n == steps:
            break
        dyn.prev_accel = a1
        k1r, k1v = v, a1
        k2r = v + 0.5 * dt * k1v
        k2v = dyn.acceleration(t + 0.5 * dt, r + 0.5 * dt * k1r, k2r)
        k3r = v + 0.5 * dt * k2v
        k3v = dyn.acceleration(t + 0.5 * dt, r + 0.5 * dt * k2r, k3r)
        k4r = v + dt * k3v
        k4v = dyn.acceleration(t + dt, r + dt * k3r, k4r)
        r_new = r + dt / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
        v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if np.any(np.abs(r_new - r) > p.max_step_change * r):
            return None
        r = r_new
        low = r < floor
        if np.any(low):
            r = np.where(low, floor, r)
            v = np.where(low & (v < 0), 0.0, v)
    out = {
        "time": times,
        "sensor": sensor,
        "peak": peak,
        "peak_bubble": peak_idx,
        "volume": volume,
        "steps": steps,
    }
    if record_radii:
        out["radii"] = radii
    return out


def _refine_max(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Location and value of the maximum, refined by a parabola through 3 points."""
    k = int(np.argmax(y))
    if 0 < k < y.size - 1:
        y0, y1, y2 = y[k - 1], y[k], y[k + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom < 0:
            s = 0.5 * (y0 - y2) / denom
            h = t[k + 1] - t[k]
            return float(t[k] + s * h), float(y1 - 0.25 * (y0 - y2) * s)
    return float(t[k]), float(y[k])


class BubbleCloudSurrogate:
    """Stochastic model: random cloud from ``omega``, collapse on level-dependent steps."""

    name = "surrogate"
    qoi_names = (
        "peak_pressure",
        "collapse_time",
        "sensor_pressure",
        "peak_location_distance",
        "gas_fraction",
        "beta",
        "skewness",
        "central_distance",
        "core_beta",
        "core_skewness",
    )

    def __init__(self, params: SurrogateParams | None = None, **overrides):
        if params is None:
            params = SurrogateParams(**overrides)
        self.p = params

    def params(self) -> dict:
        return self.p.to_dict()

    def time_step(self, level: int) -> float:
        return self.p.dt0 * 2.0 ** (-level)

    def cloud(self, omega: int) -> CloudConfiguration:
        return generate_cloud(stream_from(omega), self.p.cloud)

    def dynamics(self, cloud: CloudConfiguration) -> BubbleDynamics:
        return BubbleDynamics(
            positions=cloud.positions * MM,
            r0=cloud.radii * MM,
            center=np.asarray(cloud.center) * MM,
            cloud_radius=cloud.cloud_radius * MM,
            params=self.p,
        )

    def run_cloud(self, cloud: CloudConfiguration, level: int) -> ModelSample:
        dyn = self.dynamics(cloud)
        with np.errstate(all="ignore"):
            hist = integrate(dyn, self.time_step(level), self.p.t_end)
        work = float((self.p.t_end / self.time_step(level)) * cloud.n_bubbles**2)
        if hist is None:
            return ModelSample.invalid("integration blow-up or unresolved collapse", work=work)
        t = hist["time"]
        collapse_time, sensor_peak = _refine_max(t, hist["sensor"])
        k = int(np.argmax(hist["peak"]))
        _, peak = _refine_max(t, hist["peak"])
        bubble = hist["peak_bubble"][k]
        qoi = {
            "peak_pressure": peak,
            "collapse_time": collapse_time,
            "sensor_pressure": sensor_peak,
            "peak_location_distance": float(dyn.center_distance[bubble] / MM),
        }
        for name in ("gas_fraction", "beta", "skewness", "central_distance", "core_beta", "core_skewness"):
            qoi[name] = float(cloud.metrics[name])
        if not all(np.isfinite(v) for v in qoi.values()):
            return ModelSample.invalid("non-finite quantity of interest", work=work)
        grid = np.linspace(0.0, self.p.t_end, self.p.output_points)
        series = {
            "sensor_pressure": (grid, np.interp(grid, t, hist["sensor"])),
            "peak_pressure": (grid, np.interp(grid, t, hist["peak"])),
            "gas_volume": (grid, np.interp(grid, t, hist["volume"])),
        }
        return ModelSample(qoi=qoi, series=series, work=work)

    def sample(self, omega: int, level: int) -> ModelSample:
        if level < 0:
            raise ValueError("level must be non-negative")
        return self.run_cloud(self.cloud(omega), level)


def rayleigh_collapse_time(r0: float, rho: float, delta_p: float) -> float:
    """Classical empty-cavity collapse time ``0.915 R0 sqrt(rho / dp)``."""
    return 0.915 * r0 * math.sqrt(rho / delta_p)
