"""Fourier spectra of time slices and Wasserstein distances between them.

Spectra are one-sided DFT magnitudes. Distances between spectra use the
1-D Wasserstein distance with unit spacing between frequency bins, computed
from cumulative sums of the L1-normalized magnitudes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .refsol import fmt

CLIP_FLOOR = 1e-3


@dataclass
class Spectrum:
    magnitudes: np.ndarray
    n_spatial: int
    t: float = 0.0

    def normalized(self):
        total = self.magnitudes.sum()
        if not total > 0:
            raise DegenerateInputError(f"all-zero spectrum at t={self.t}")
        return self.magnitudes / total


def _check_uniform(xs):
    xs = np.asarray(xs, dtype=np.float64)
    steps = np.diff(xs)
    if len(steps) and (np.any(steps <= 0) or np.ptp(steps) > 1e-9 * abs(steps[0])):
        raise ConfigError("spatial grid must be uniform and increasing")


def _prepare(values, includes_endpoint):
    v = np.asarray(values, dtype=np.float64)
    if includes_endpoint:
        v = v[..., :-1]  # periodic duplicate of the first sample
    if v.shape[-1] < 4:
        raise ConfigError(f"need at least 4 spatial samples, got {v.shape[-1]}")
    return v


def dft_magnitude(values, t=0.0, xs=None, includes_endpoint=False):
    """One-sided magnitudes |X_k|, k = 0..N//2, of a slice on a uniform grid.

    The grid is taken to exclude its right endpoint; set ``includes_endpoint``
    for grids that sample both ends, whose last sample is then dropped.
    """
    if xs is not None:
        _check_uniform(xs)
    v = _prepare(values, includes_endpoint)
    return Spectrum(np.abs(np.fft.rfft(v)), v.shape[-1], float(t))


def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DegenerateInputError(f"{name} must be a finite non-negative vector")
    if abs(p.sum() - 1.0) > 1e-6:
        raise DegenerateInputError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def wasserstein_1d(p, q):
    """W1 between two distributions on the bins 0, 1, ..., n-1."""
    p, q = _check_distribution(p, "p"), _check_distribution(q, "q")
    if p.shape != q.shape:
        raise DegenerateInputError(f"length mismatch {p.shape} vs {q.shape}")
    return float(np.abs(np.cumsum(p) - np.cumsum(q)).sum())


def wf_distance(u1, u2, includes_endpoint=False):
    """Wasserstein-Fourier distance between two slices from the same grid."""
    a = dft_magnitude(u1, includes_endpoint=includes_endpoint)
    b = dft_magnitude(u2, includes_endpoint=includes_endpoint)
    if a.n_spatial != b.n_spatial:
        raise ConfigError("slices come from different grids")
    return wasserstein_1d(a.normalized(), b.normalized())


def _normalized_cdfs(slices):
    mags = np.abs(np.fft.rfft(slices, axis=-1))
    totals = mags.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise DegenerateInputError("all-zero slice in solution grid")
    return np.cumsum(mags / totals, axis=-1)


def _time_index(grid_ts, ts):
    idx = []
    for t in ts:
        hit = np.flatnonzero(np.isclose(grid_ts, t, rtol=0, atol=1e-12))
        if not len(hit):
            raise ConfigError(f"time {t} is not on the solution grid")
        idx.append(int(hit[0]))
    return np.array(idx)


@dataclass
class DistanceMatrix:
    ts: np.ndarray
    values: np.ndarray

    def to_csv(self, path, clip=False):
        """``t1,t2,wf`` rows; ``clip`` floors exported values at 1e-3."""
        vals = np.maximum(self.values, CLIP_FLOOR) if clip else self.values
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t1", "t2", "wf"])
            for i, t1 in enumerate(self.ts):
                for j, t2 in enumerate(self.ts):
                    w.writerow([fmt(t1), fmt(t2), fmt(vals[i, j])])


def _slices(grid, ts, channel, includes_endpoint):
    ts = grid.ts if ts is None else np.asarray(ts, dtype=np.float64)
    _check_uniform(grid.xs)
    rows = grid.channel(channel)[_time_index(grid.ts, ts)]
    return ts, _prepare(rows, includes_endpoint)


def pairwise_matrix(grid, ts=None, channel=0, includes_endpoint=False):
    """WF distances between every pair of requested time slices of ``grid``."""
    ts, rows = _slices(grid, ts, channel, includes_endpoint)
    cdf = _normalized_cdfs(rows)
    values = np.abs(cdf[:, None, :] - cdf[None, :, :]).sum(axis=-1)
    return DistanceMatrix(ts, values)


def difference_matrix(a, b):
    if not np.array_equal(a.ts, b.ts):
        raise ConfigError("distance matrices are on different time grids")
    return DistanceMatrix(a.ts, np.abs(a.values - b.values))


@dataclass(frozen=True)
class WwfConfig:
    interp_grid: tuple
    extrap_grid: tuple
    t_max: float
    normalize: bool = True

    def __post_init__(self):
        i = np.asarray(self.interp_grid, dtype=np.float64)
        e = np.asarray(self.extrap_grid, dtype=np.float64)
        if not len(i) or not len(e):
            raise ConfigError("WWF needs non-empty interpolation and extrapolation grids")
        if np.any(np.diff(i) <= 0) or np.any(np.diff(e) <= 0):
            raise ConfigError("WWF grids must be sorted and free of duplicates")
        if i.min() < 0 or i.max() >= e.min() or e.max() > self.t_max:
            raise ConfigError("WWF grids must satisfy 0 <= I < E <= t_max")
        object.__setattr__(self, "interp_grid", tuple(float(v) for v in i))
        object.__setattr__(self, "extrap_grid", tuple(float(v) for v in e))


def wwf_config(problem, ts, normalize=True):
    """Split a time grid at the problem's training horizon."""
    ts = np.asarray(ts, dtype=np.float64)
    t_train = problem.domain.t_train
    return WwfConfig(tuple(ts[ts <= t_train]), tuple(ts[ts > t_train]), problem.domain.t_max,
                     normalize)


def wwf_terms(grid, cfg, channel=0, includes_endpoint=False):
    """Weights (T_max + s - t) and WF distances for every (s in I, t in E)."""
    s = np.array(cfg.interp_grid)
    e = np.array(cfg.extrap_grid)
    _, rows_i = _slices(grid, s, channel, includes_endpoint)
    _, rows_e = _slices(grid, e, channel, includes_endpoint)
    ci, ce = _normalized_cdfs(rows_i), _normalized_cdfs(rows_e)
    dist = np.abs(ci[:, None, :] - ce[None, :, :]).sum(axis=-1)
    weight = cfg.t_max + s[:, None] - e[None, :]
    return weight, dist


def wwf_both(grid, cfg, channel=0, includes_endpoint=False):
    """(raw double sum, sum divided by the number of pairs)."""
    weight, dist = wwf_terms(grid, cfg, channel, includes_endpoint)
    raw = float(np.sum(weight * dist))
    return raw, raw / dist.size


def wwf(grid, cfg, channel=0, includes_endpoint=False):
    """Weighted Wasserstein-Fourier distance; pair-count normalized if ``cfg.normalize``."""
    raw, norm = wwf_both(grid, cfg, channel, includes_endpoint)
    return norm if cfg.normalize else raw


def spectra_table(grid, channel=0, includes_endpoint=False):
    """(t, magnitudes) for every slice of ``grid``."""
    _check_uniform(grid.xs)
    rows = _prepare(grid.channel(channel), includes_endpoint)
    return grid.ts, np.abs(np.fft.rfft(rows, axis=-1))


def write_spectra(grid, path, channel=0, includes_endpoint=False):
    ts, mags = spectra_table(grid, channel, includes_endpoint)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "bin", "magnitude"])
        for t, row in zip(ts, mags):
            for k, m in enumerate(row):
                w.writerow([fmt(t), k, fmt(m)])


def spectral_grid(problem):
    """(xs, includes_endpoint) used for spectra of ``problem``.

    Allen-Cahn is sampled on 201 points covering both ends of [-1, 1]; the
    duplicate end sample is dropped before transforming. Everything else
    uses 256 points with the right end excluded.
    """
    dom = problem.domain
    if problem.kind == "allen_cahn":
        return np.linspace(dom.x_min, dom.x_max, 201), True
    return dom.x_min + dom.length * np.arange(256) / 256, False
