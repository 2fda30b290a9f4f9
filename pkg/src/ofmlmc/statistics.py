"""Post-processing estimators built from stored multi-level samples.

Sample collections follow the estimator convention: entry 0 holds level-0
samples, entry ``l >= 1`` holds ``(fine, coarse)`` pairs (a tuple of arrays or
an ``(n, 2)`` array for scalars).  Time series are arrays with one row per
sample.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .estimator import of_mlmc_expectation, split_level

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)
# internal binning grid for the fast kernel sums
BIN_POINTS = 4096


class DegenerateSampleWarning(RuntimeWarning):
    pass


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    meta: dict = field(default_factory=dict)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass
class JointDensity:
    grid_x: np.ndarray
    grid_y: np.ndarray
    density: np.ndarray  # shape (len(grid_x), len(grid_y))
    bandwidth: tuple
    meta: dict = field(default_factory=dict)

    def integral(self) -> float:
        return float(np.trapezoid(np.trapezoid(self.density, self.grid_y, axis=1), self.grid_x))


@dataclass
class CorrelationMatrix:
    names: list
    matrix: np.ndarray

    def hinton(self) -> list[dict]:
        """Magnitude/sign records, one per ordered pair, for Hinton-style plots."""
        rows = []
        for i, a in enumerate(self.names):
            for j, b in enumerate(self.names):
                v = self.matrix[i, j]
                missing = not np.isfinite(v)
                rows.append(
                    {
                        "row": a,
                        "col": b,
                        "value": None if missing else float(v),
                        "magnitude": None if missing else abs(float(v)),
                        "sign": None if missing else int(np.sign(v)),
                    }
                )
        return rows


# ---------------------------------------------------------------- bands


def finest_populated(samples, minimum: int = 2) -> int:
    """Index of the finest level whose fine side has at least ``minimum`` samples."""
    for level in range(len(samples) - 1, -1, -1):
        fine, _ = split_level(level, samples[level])
        if fine.shape[0] >= minimum:
            return level
    raise ValueError(f"no level has {minimum} or more samples")


def percentile(values, q, axis=0):
    """Nearest-rank percentile; ties between two ranks are averaged."""
    return np.percentile(np.asarray(values, dtype=float), q, axis=axis, method="averaged_inverted_cdf")


def confidence_bands(samples, alpha, percentiles=(50, 90)) -> dict:
    """Telescoping mean plus median and central bands per time point.

    Band bounds are single-level percentile estimates on the fine samples of
    the finest level holding at least two samples.
    """
    level = finest_populated(samples)
    fine, _ = split_level(level, samples[level])
    out = {
        "mean": np.asarray(of_mlmc_expectation(samples, alpha)),
        "median": percentile(fine, 50),
        "level": level,
        "n": int(fine.shape[0]),
        "bands": {},
    }
    for p in percentiles:
        lo, hi = 50 - p / 2, 50 + p / 2
        out["bands"][p] = (percentile(fine, lo), percentile(fine, hi))
    return out


# ---------------------------------------------------------------- KDE


def _normalise_weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("one weight per sample is required")
    total = w.sum()
    if total == 0:
        raise ValueError("weights sum to zero")
    return w / total


def _linear_bin(x, w, lo, delta, m):
    pos = (x - lo) / delta
    i = np.clip(np.floor(pos).astype(int), 0, m - 2)
    frac = pos - i
    counts = np.zeros(m)
    np.add.at(counts, i, w * (1.0 - frac))
    np.add.at(counts, i + 1, w * frac)
    return counts


def _gauss_derivative(u, r):
    phi = np.exp(-0.5 * u * u) / SQRT_2PI
    if r == 0:
        return phi
    if r == 4:
        return (u**4 - 6 * u**2 + 3) * phi
    if r == 6:
        return (u**6 - 15 * u**4 + 45 * u**2 - 15) * phi
    raise ValueError("unsupported derivative order")


def _fft_kernel_sum(counts, delta, kernel):
    """``sum_j counts_j * kernel(x_i - x_j)`` on the bin grid (zero padded)."""
    m = counts.size
    lags = np.arange(-(m - 1), m) * delta
    k = kernel(lags)
    size = 1 << int(math.ceil(math.log2(3 * m)))
    conv = np.fft.irfft(np.fft.rfft(counts, size) * np.fft.rfft(k, size), size)
    return conv[m - 1 : 2 * m - 1]


class _Binned:
    """Weighted samples binned once for repeated kernel functional estimates."""

    def __init__(self, x, w, m=BIN_POINTS):
        self.lo, hi = float(x.min()), float(x.max())
        span = hi - self.lo
        self.lo -= 0.05 * span
        hi += 0.05 * span
        self.delta = (hi - self.lo) / (m - 1)
        self.counts = _linear_bin(x, w, self.lo, self.delta, m)

    def psi(self, r: int, g: float) -> float:
        """Integrated squared-derivative functional ``sum_ij w_i w_j phi_g^(r)(x_i - x_j)``."""
        def kernel(u):
            return _gauss_derivative(u / g, r) / g ** (r + 1)

        return float(self.counts @ _fft_kernel_sum(self.counts, self.delta, kernel))


def _iqr(x, w):
    order = np.argsort(x)
    cw = np.cumsum(w[order])
    q1 = x[order][np.searchsorted(cw, 0.25 * cw[-1])]
    q3 = x[order][min(np.searchsorted(cw, 0.75 * cw[-1]), x.size - 1)]
    return float(q3 - q1)


def _weighted_std(x, w):
    mu = np.sum(w * x)
    return math.sqrt(max(float(np.sum(w * (x - mu) ** 2)), 0.0))


def silverman_bandwidth(x, weights=None) -> float:
    x = np.asarray(x, dtype=float)
    w = _normalise_weights(x.size, weights)
    n_eff = 1.0 / np.sum(w * w)
    sd = _weighted_std(x, w)
    iqr = _iqr(x, w) / 1.34
    scale = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * scale * n_eff ** (-0.2)


def sj_bandwidth(x, weights=None, iterations: int = 60) -> tuple[float, str]:
    """Solve-the-equation plug-in bandwidth for a Gaussian kernel.

    Solves ``h = [R(K) / (n psi4(g(h)))]**(1/5)`` with the pilot bandwidth
    ``g(h) = 1.357 (psi4(a) / -psi6(b))**(1/7) h**(5/7)`` by bisection over
    ``[1e-3, 1e3] * std``.  Falls back to Silverman's rule when the
    functionals are not usable or no sign change is bracketed.  Returns the
    bandwidth and the method used.
    """
    x = np.asarray(x, dtype=float)
    w = _normalise_weights(x.size, weights)
    n = 1.0 / np.sum(w * w)
    sd = _weighted_std(x, w)
    lam = _iqr(x, w)
    if lam <= 0:
        lam = 1.349 * sd
    if sd <= 0 or lam <= 0 or x.size < 3:
        return silverman_bandwidth(x, weights), "silverman"
    binned = _Binned(x, w)
    a = 0.920 * lam * n ** (-1.0 / 7.0)
    b = 0.912 * lam * n ** (-1.0 / 9.0)
    sd_a = binned.psi(4, a)
    td_b = -binned.psi(6, b)
    if not (sd_a > 0 and td_b > 0):
        return silverman_bandwidth(x, weights), "silverman"
    rk = 1.0 / (2.0 * math.sqrt(math.pi))
    ratio = 1.357 * (sd_a / td_b) ** (1.0 / 7.0)

    def equation(h):
        g = ratio * h ** (5.0 / 7.0)
        s = binned.psi(4, g)
        if s <= 0:
            return math.nan
        return h - (rk / (n * s)) ** 0.2

    lo, hi = 1e-3 * sd, 1e3 * sd
    f_lo, f_hi = equation(lo), equation(hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        return silverman_bandwidth(x, weights), "silverman"
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        f_mid = equation(mid)
        if not np.isfinite(f_mid):
            return silverman_bandwidth(x, weights), "silverman"
        if f_lo * f_mid <= 0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi), "solve-the-equation"


def _default_grid(x, h, points=512):
    return np.linspace(x.min() - 4 * h, x.max() + 4 * h, points)


def _binned_density(x, w, h, grid):
    """Gaussian KDE with signed weights via linear binning on a fine grid."""
    lo = min(float(x.min()), float(grid[0])) - 5 * h
    hi = max(float(x.max()), float(grid[-1])) + 5 * h
    m = max(BIN_POINTS, int(min((hi - lo) / (h / 8.0), 1 << 16)))
    delta = (hi - lo) / (m - 1)
    counts = _linear_bin(x, w, lo, delta, m)

    def kernel(u):
        return _gauss_derivative(u / h, 0) / h

    dens = _fft_kernel_sum(counts, delta, kernel)
    nodes = lo + delta * np.arange(m)
    return np.interp(grid, nodes, dens)


def _finish(grid, dens):
    negative = dens < 0
    clamped = float(-np.trapezoid(np.where(negative, dens, 0.0), grid))
    dens = np.where(negative, 0.0, dens)
    total = float(np.trapezoid(dens, grid))
    if total > 0:
        dens = dens / total
    return dens, {"clamped_mass": clamped, "renormalised_from": total}


def _degenerate_bandwidth(x):
    return 1e-3 * max(1.0, float(np.max(np.abs(x))))


def kde_1d(samples, weights=None, grid=None, bandwidth=None) -> DensityEstimate:
    """Gaussian kernel density with a solve-the-equation bandwidth.

    ``weights`` may be signed (telescoping combinations); negative density
    values are clamped to zero and the result renormalised on ``grid``.
    Samples without spread get a narrow kernel and a warning.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    w = _normalise_weights(x.size, weights)
    method = "given"
    if bandwidth is None:
        # spread below rounding of the data scale is no spread at all
        if np.ptp(x) <= 1e-12 * max(1.0, float(np.max(np.abs(x)))):
            bandwidth = _degenerate_bandwidth(x)
            method = "degenerate"
            if x.size > 1:
                msg = "samples have zero spread; using a narrow kernel"
                log.warning(msg)
                warnings.warn(msg, DegenerateSampleWarning, stacklevel=2)
        elif np.any(w < 0):
            positive = w > 0
            bandwidth, method = sj_bandwidth(x[positive], w[positive])
        else:
            bandwidth, method = sj_bandwidth(x, w)
        if not (np.isfinite(bandwidth) and bandwidth > 0):
            bandwidth, method = _degenerate_bandwidth(x), "degenerate"
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    grid = _default_grid(x, bandwidth) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    dens, meta = _finish(grid, _binned_density(x, w, bandwidth, grid))
    meta.update({"method": method, "n": int(x.size)})
    return DensityEstimate(grid, dens, float(bandwidth), meta)


def level_weights(samples, alpha):
    """Flattened values and signed telescoping weights for a multilevel KDE."""
    values, weights = [], []
    for level, data in enumerate(samples):
        fine, coarse = split_level(level, data)
        n = fine.shape[0]
        if n == 0:
            raise ValueError(f"level {level} has no samples")
        values.append(fine)
        weights.append(np.full(n, alpha[level] / n))
        if coarse is not None:
            values.append(coarse)
            weights.append(np.full(n, -alpha[level - 1] / n))
    return np.concatenate(values), np.concatenate(weights)


def multilevel_kde(samples, alpha, grid=None, bandwidth=None) -> DensityEstimate:
    """Telescoping density: level-0 kernels plus alpha-weighted pair corrections.

    One bandwidth is shared by all levels; by default it is selected on the
    level-0 samples, the most numerous set.
    """
    x, w = level_weights(samples, alpha)
    if bandwidth is None:
        base, _ = split_level(0, samples[0])
        if base.size >= 2 and np.ptp(base) > 0:
            bandwidth, _ = sj_bandwidth(base)
        else:
            bandwidth = _degenerate_bandwidth(x)
    est = kde_1d(x, w, grid=grid, bandwidth=bandwidth)
    est.meta["levels"] = len(samples)
    return est


def kde_2d(x, y, weights=None, grid_x=None, grid_y=None, bandwidth=None, points=128) -> JointDensity:
    """Product-Gaussian joint density; per-axis bandwidths follow :func:`kde_1d`."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size == 0:
        raise ValueError("x and y need the same, non-zero, number of samples")
    w = _normalise_weights(x.size, weights)
    if bandwidth is None:
        hs = []
        for v in (x, y):
            if np.ptp(v) == 0:
                hs.append(_degenerate_bandwidth(v))
            else:
                hs.append(sj_bandwidth(v, w if np.all(w >= 0) else None)[0])
        bandwidth = tuple(hs)
    hx, hy = bandwidth
    grid_x = _default_grid(x, hx, points) if grid_x is None else np.asarray(grid_x, dtype=float)
    grid_y = _default_grid(y, hy, points) if grid_y is None else np.asarray(grid_y, dtype=float)

    m = 512
    axes = []
    for v, h, g in ((x, hx, grid_x), (y, hy, grid_y)):
        lo = min(float(v.min()), float(g[0])) - 5 * h
        hi = max(float(v.max()), float(g[-1])) + 5 * h
        mm = max(m, int(min((hi - lo) / (h / 4.0), 2048)))
        axes.append((lo, (hi - lo) / (mm - 1), mm))
    (lx, dx, mx), (ly, dy, my) = axes
    px = (x - lx) / dx
    py = (y - ly) / dy
    ix = np.clip(np.floor(px).astype(int), 0, mx - 2)
    iy = np.clip(np.floor(py).astype(int), 0, my - 2)
    fx, fy = px - ix, py - iy
    counts = np.zeros((mx, my))
    for ox, wx in ((0, 1 - fx), (1, fx)):
        for oy, wy in ((0, 1 - fy), (1, fy)):
            np.add.at(counts, (ix + ox, iy + oy), w * wx * wy)
    dens = np.apply_along_axis(
        _fft_kernel_sum, 0, counts, dx, lambda u: _gauss_derivative(u / hx, 0) / hx
    )
    dens = np.apply_along_axis(
        _fft_kernel_sum, 1, dens, dy, lambda u: _gauss_derivative(u / hy, 0) / hy
    )
    nodes = (lx + dx * np.arange(mx), ly + dy * np.arange(my))
    interp = RegularGridInterpolator(nodes, dens)
    gx, gy = np.meshgrid(grid_x, grid_y, indexing="ij")
    out = interp(np.column_stack([gx.ravel(), gy.ravel()])).reshape(gx.shape)
    out = np.maximum(out, 0.0)
    total = float(np.trapezoid(np.trapezoid(out, grid_y, axis=1), grid_x))
    if total > 0:
        out = out / total
    return JointDensity(grid_x, grid_y, out, (float(hx), float(hy)), {"n": int(x.size), "renormalised_from": total})


# ---------------------------------------------------------------- correlation


def correlation_matrix(variables: dict) -> CorrelationMatrix:
    """Pearson correlations; pairs involving a constant variable are NaN."""
    names = list(variables)
    data = [np.asarray(variables[k], dtype=float).ravel() for k in names]
    n = {d.size for d in data}
    if len(n) != 1:
        raise ValueError("all variables need the same number of samples")
    if n.pop() < 2:
        raise ValueError("at least two samples are required")
    centred = [d - d.mean() for d in data]
    norms = [math.sqrt(float(c @ c)) for c in centred]
    k = len(names)
    mat = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            if norms[i] == 0 or norms[j] == 0:
                continue
            r = float(centred[i] @ centred[j]) / (norms[i] * norms[j])
            r = min(1.0, max(-1.0, r))
            mat[i, j] = mat[j, i] = r
        if norms[i] > 0:
            mat[i, i] = 1.0
    return CorrelationMatrix(names, mat)


# ---------------------------------------------------------------- smoothing


def gaussian_kernel(n: int, width: float) -> np.ndarray:
    """Normalised circular discrete Gaussian of standard deviation ``width``."""
    if width < 0:
        raise ValueError("width must be >= 0")
    k = np.zeros(n)
    if width == 0:
        k[0] = 1.0
        return k
    j = np.arange(n)
    d = np.minimum(j, n - j).astype(float)
    with np.errstate(over="ignore", under="ignore"):
        k = np.exp(-0.5 * (d / width) ** 2)
    return k / k.sum()


def gaussian_smooth(series, width: float, axis: int = -1) -> np.ndarray:
    """Circular Gaussian smoothing along ``axis`` through the real FFT."""
    values = np.asarray(series, dtype=float)
    if width == 0:
        return values.copy()
    n = values.shape[axis]
    k = gaussian_kernel(n, width)
    spectrum = np.fft.rfft(values, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = -1
    return np.fft.irfft(spectrum * np.fft.rfft(k).reshape(shape), n, axis=axis)


def sphere_average(field, center, radius: float, spacing=1.0, origin=0.0) -> float:
    """Mean of a gridded field over cells whose centres lie within ``radius``.

    Cell ``(i, j, k)`` has centre ``origin + (index + 0.5) * spacing``.
    """
    field = np.asarray(field, dtype=float)
    if field.ndim != 3:
        raise ValueError("field must be three-dimensional")
    if radius <= 0:
        raise ValueError("radius must be positive")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    origin = np.broadcast_to(np.asarray(origin, dtype=float), (3,))
    center = np.asarray(center, dtype=float)
    upper = origin + spacing * np.array(field.shape)
    if np.any(center - radius < origin - 1e-12) or np.any(center + radius > upper + 1e-12):
        raise ValueError("sphere extends beyond the field")
    coords = [origin[a] + (np.arange(field.shape[a]) + 0.5) * spacing[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    mask = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2 <= radius**2
    if not np.any(mask):
        raise ValueError("no cell centre lies inside the sphere")
    return float(field[mask].mean())


# ---------------------------------------------------------------- export


def _write_csv(path: Path, header, columns) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([repr(float(v)) for v in row])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)


def export_density(est: DensityEstimate, stem) -> None:
    """``<stem>.csv`` with grid and density, ``<stem>.json`` with metadata."""
    stem = Path(stem)
    _write_csv(stem.with_suffix(".csv"), ["x", "density"], [est.grid, est.density])
    _write_json(stem.with_suffix(".json"), {"bandwidth": est.bandwidth, **est.meta})


def export_joint(est: JointDensity, stem) -> None:
    stem = Path(stem)
    gx, gy = np.meshgrid(est.grid_x, est.grid_y, indexing="ij")
    _write_csv(stem.with_suffix(".csv"), ["x", "y", "density"], [gx.ravel(), gy.ravel(), est.density.ravel()])
    _write_json(stem.with_suffix(".json"), {"bandwidth": list(est.bandwidth), **est.meta})


def export_bands(bands: dict, grid, stem) -> None:
    stem = Path(stem)
    header, columns = ["t", "mean", "median"], [grid, bands["mean"], bands["median"]]
    for p, (lo, hi) in sorted(bands["bands"].items()):
        header += [f"lower_{p:g}", f"upper_{p:g}"]
        columns += [lo, hi]
    _write_csv(stem.with_suffix(".csv"), header, columns)
    _write_json(
        stem.with_suffix(".json"),
        {"level": bands["level"], "n": bands["n"], "percentiles": sorted(bands["bands"]),
         "band_method": "single-level percentiles on the finest populated level"},
    )


def export_correlation(corr: CorrelationMatrix, stem) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + corr.names)
        for name, row in zip(corr.names, corr.matrix):
            writer.writerow([name] + ["" if not np.isfinite(v) else repr(float(v)) for v in row])
    _write_json(stem.with_suffix(".json"), {"names": corr.names, "hinton": corr.hinton()})
