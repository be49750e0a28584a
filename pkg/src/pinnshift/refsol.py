"""Reference solutions on arbitrary space-time grids.

Closed forms are used where they exist. Burgers goes through the Cole-Hopf
integral, Allen-Cahn through a finite-difference method of lines and the
nonlinear Schrödinger equation through split-step Fourier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .errors import ConfigError, UnsupportedError
from .neural import Jet
from .pdes import DR_MODES, make_problem

CLOSED_FORM = ("diffusion", "diffusion_reaction", "k_family", "m_family", "heat", "beltrami")


@dataclass
class SolutionGrid:
    """Samples ``values[i, j, k]`` of output ``k`` at ``(xs[j], ts[i])``."""

    xs: np.ndarray
    ts: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.shape[:2] != (len(self.ts), len(self.xs)):
            raise ConfigError(f"values shape {self.values.shape} does not match "
                              f"{len(self.ts)} times x {len(self.xs)} points")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("solution grid contains non-finite values")

    @property
    def n_outputs(self):
        return self.values.shape[2]

    def channel(self, k):
        """(n_t, n_x) array of output ``k``."""
        return self.values[:, :, k]

    def to_csv(self, path):
        """Write ``t,x,channel,value`` rows, ordered by t then x then channel."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "channel", "value"])
            for i, t in enumerate(self.ts):
                for j, x in enumerate(self.xs):
                    for k in range(self.n_outputs):
                        w.writerow([fmt(t), fmt(x), k, fmt(self.values[i, j, k])])

    @classmethod
    def from_csv(cls, path):
        rows = list(csv.DictReader(open(path)))
        ts = sorted({float(r["t"]) for r in rows})
        xs = sorted({float(r["x"]) for r in rows})
        n_out = 1 + max(int(r["channel"]) for r in rows)
        ti = {t: i for i, t in enumerate(ts)}
        xi = {x: j for j, x in enumerate(xs)}
        values = np.full((len(ts), len(xs), n_out), np.nan)
        for r in rows:
            values[ti[float(r["t"])], xi[float(r["x"])], int(r["channel"])] = float(r["value"])
        return cls(np.array(xs), np.array(ts), values)


def fmt(v):
    """17 significant digits, enough to round-trip any float64."""
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# closed forms


def _sine_series(problem):
    """(decay rate, wavenumbers, amplitudes) for u = e^{-rate t} sum a_j sin(k_j x)."""
    kind, p = problem.kind, problem.params
    if kind == "diffusion":
        return 1.0, np.array([np.pi]), np.array([1.0])
    if kind == "heat":
        return p["alpha"] * np.pi ** 2, np.array([np.pi]), np.array([1.0])
    if kind in ("diffusion_reaction", "m_family"):
        js = np.array(DR_MODES, dtype=np.float64)
        return (p["M"] if kind == "m_family" else 1.0), js, 1.0 / js
    if kind == "k_family":
        js = np.arange(1, p["K"] + 1, dtype=np.float64)
        return 1.0, js, 1.0 / js
    raise UnsupportedError(f"no closed-form solution for {kind}")


def exact(problem, x, t):
    """Exact solution values with a trailing output axis.

    For Beltrami ``x`` carries (x, y, z) on its last axis and the outputs are
    (u, v, w, p).
    """
    if problem.kind not in CLOSED_FORM:
        raise UnsupportedError(f"{problem.kind} has no closed-form solution; "
                               "use sample_reference")
    if problem.kind == "beltrami":
        return np.stack([j.u for j in _beltrami_jets(problem, x, t)], axis=-1)
    return exact_jets(problem, x, t)[0].u[..., None]


def exact_jets(problem, x, t):
    """Analytic jets of the exact solution, one :class:`Jet` per output."""
    if problem.kind == "beltrami":
        return _beltrami_jets(problem, x, t)
    rate, ks, amps = _sine_series(problem)
    x, t = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64))
    decay = np.exp(-rate * t)
    arg = x[..., None] * ks
    s = np.sin(arg) @ amps
    c = np.cos(arg) @ (amps * ks)
    s2 = np.sin(arg) @ (amps * ks * ks)
    u = decay * s
    return [Jet(u=u, du_dx=decay * c, du_dt=-rate * u, d2u_dx2=-decay * s2)]


def _beltrami_parts(a, d, x, y, z):
    """F = -a [e^{ax} sin(ay+dz) + e^{az} cos(ax+dy)], its gradient and Hessian diagonal."""
    ex, ez = np.exp(a * x), np.exp(a * z)
    s1, c1 = np.sin(a * y + d * z), np.cos(a * y + d * z)
    s2, c2 = np.sin(a * x + d * y), np.cos(a * x + d * y)
    A, B = ex * s1, ez * c2
    grad = (-a * (a * A - a * ez * s2),
            -a * (a * ex * c1 - d * ez * s2),
            -a * (d * ex * c1 + a * B))
    hess = (-a * (a * a * A - a * a * B),
            -a * (-a * a * A - d * d * B),
            -a * (-d * d * A + a * a * B))
    return -a * (A + B), grad, hess


def _pressure_parts(a, d, x, y, z):
    """G = e^{2ax} + 2 sin(ax+dy) cos(az+dx) e^{a(y+z)} and its gradient."""
    sa, ca = np.sin(a * x + d * y), np.cos(a * x + d * y)
    sb, cb = np.sin(a * z + d * x), np.cos(a * z + d * x)
    e = np.exp(a * (y + z))
    e2 = np.exp(2 * a * x)
    g = e2 + 2 * sa * cb * e
    gx = 2 * a * e2 + 2 * (a * ca * cb - d * sa * sb) * e
    gy = 2 * (d * ca * cb + a * sa * cb) * e
    gz = 2 * (-a * sa * sb + a * sa * cb) * e
    return g, (gx, gy, gz)


def _beltrami_jets(problem, pts, t):
    p = problem.params
    a, d, re = p["a"], p["d"], p["Re"]
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ConfigError("beltrami points need (x, y, z) on the last axis")
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    t = np.asarray(t, dtype=np.float64)
    rate = d * d / re
    decay = np.exp(-rate * t)
    # v and w are cyclic relabelings of u: v(x,y,z) = F(y,z,x), w(x,y,z) = F(z,x,y)
    perms = [((x, y, z), (0, 1, 2)), ((y, z, x), (2, 0, 1)), ((z, x, y), (1, 2, 0))]
    jets = []
    for args, order in perms:
        f, grad, hess = _beltrami_parts(a, d, *args)
        # derivative along original axis i is F's derivative in argument slot order[i]
        g = [grad[order[i]] for i in range(3)]
        h = [hess[order[i]] for i in range(3)]
        u = f * decay
        jets.append(Jet(u=u, du_dx=g[0] * decay, du_dt=-rate * u, d2u_dx2=h[0] * decay,
                        du_dy=g[1] * decay, du_dz=g[2] * decay,
                        d2u_dy2=h[1] * decay, d2u_dz2=h[2] * decay))
    q = np.zeros(np.broadcast(x, t).shape)
    dq = [np.zeros_like(q) for _ in range(3)]
    for args, order in perms:
        g, grad = _pressure_parts(a, d, *args)
        q = q + g
        for i in range(3):
            dq[i] = dq[i] + grad[order[i]]
    scale = -0.5 * a * a * decay * decay
    pr = scale * q
    jets.append(Jet(u=pr, du_dx=scale * dq[0], du_dt=-2 * rate * pr, d2u_dx2=None,
                    du_dy=scale * dq[1], du_dz=scale * dq[2]))
    return jets


# ---------------------------------------------------------------------------
# Burgers via Cole-Hopf


@lru_cache(maxsize=8)
def _hermgauss(order):
    z, w = np.polynomial.hermite.hermgauss(order)
    return z, np.log(w)


def _cole_hopf_ratio(nu, x, eta, log_w):
    """-sum sin(pi y) f(y) w / sum f(y) w with y = x - eta, f = exp(-cos(pi y)/(2 pi nu))."""
    y = x[:, None] - eta[None, :]
    lg = -np.cos(np.pi * y) / (2 * np.pi * nu) + log_w
    lg -= lg.max(axis=1, keepdims=True)
    e = np.exp(lg)
    return -(np.sin(np.pi * y) * e).sum(axis=1) / e.sum(axis=1)


def _burgers_window(nu, t):
    # the integrand in eta is below e^{-40} of its peak outside this window
    return np.sqrt(4 * t * (1 / np.pi + 40 * nu))


def burgers_slice(nu, xs, t, order=200, method="auto"):
    """Burgers solution u(xs, t) from the Cole-Hopf integral.

    ``method='hermite'`` substitutes eta = 2 sqrt(nu t) z and applies
    Gauss-Hermite quadrature. For small ``nu`` the integrand's mass sits
    beyond the outermost Hermite node, so ``'auto'`` then switches to a
    log-sum-exp trapezoid rule over a window that contains it.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if t < 1e-30:
        # |u - u0| <= t max|u_t|, far below rounding; also avoids subnormal widths
        return -np.sin(np.pi * xs)
    z, log_w = _hermgauss(order)
    scale = 2 * np.sqrt(nu * t)
    window = _burgers_window(nu, t)
    if method == "hermite" or (method == "auto" and scale * z[-1] >= window):
        return _cole_hopf_ratio(nu, xs, scale * z, log_w)
    if method not in ("auto", "trapezoid"):
        raise ConfigError(f"unknown quadrature method {method!r}")
    # peak width of the integrand in eta; 16 nodes per width resolves it to rounding
    width = np.sqrt(2 * nu * t / (np.pi * t + 1))
    n = int(np.ceil(2 * window / (width / 16))) | 1
    eta = np.linspace(-window, window, n)
    return _cole_hopf_ratio(nu, xs, eta, -eta * eta / (4 * nu * t))


def solve_burgers(nu, xs, ts, order=200, method="auto"):
    """u_t + u u_x = nu u_xx on [-1, 1], u(x, 0) = -sin(pi x), u(+-1, t) = 0."""
    if not nu > 0:
        raise ConfigError(f"viscosity must be positive, got {nu}")
    if order < 100:
        raise ConfigError("Gauss-Hermite order must be at least 100")
    xs, ts = np.asarray(xs, dtype=np.float64), np.asarray(ts, dtype=np.float64)
    values = np.stack([burgers_slice(nu, xs, float(t), order, method) for t in ts])
    return SolutionGrid(xs, ts, values[..., None])


# ---------------------------------------------------------------------------
# Allen-Cahn via finite differences


def _time_segments(ts, dt_max):
    """Yield (index, n_steps, dt) covering 0 -> ts[i] in uniform sub-steps."""
    prev = 0.0
    for i, t in enumerate(ts):
        span = t - prev
        n = int(np.ceil(span / dt_max - 1e-9)) if span > 0 else 0
        yield i, n, (span / n if n else 0.0)
        prev = t


def _check_times(ts):
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 1 or np.any(ts < 0) or np.any(np.diff(ts) <= 0):
        raise ConfigError("times must be non-negative and strictly increasing")
    return ts


def allen_cahn_nodes(d, ts, n_interior=4095, dt_max=1e-4):
    """Node values (n_t, n_interior + 2) and node positions of the FD solution.

    Second-order centered differences; Crank-Nicolson for diffusion and
    variable-step second-order Adams-Bashforth for the reaction 5(u - u^3).
    """
    ts = _check_times(ts)
    x = np.linspace(-1.0, 1.0, n_interior + 2)
    h = x[1] - x[0]
    u = (x * x * np.cos(np.pi * x))[1:-1]
    lam = d / (h * h)

    def reaction(v):
        return 5.0 * (v - v * v * v)

    bc = np.zeros(n_interior)
    bc[0] = bc[-1] = -lam  # boundary value -1 entering the Laplacian
    out = np.empty((len(ts), n_interior + 2))
    f_prev, dt_prev = None, None
    for i, n, dt in _time_segments(ts, dt_max):
        if n:
            ab = np.empty((3, n_interior))
            ab[0], ab[1], ab[2] = -0.5 * dt * lam, 1 + dt * lam, -0.5 * dt * lam
            for _ in range(n):
                f = reaction(u)
                if f_prev is None:
                    expl = f
                else:
                    r = dt / dt_prev
                    expl = (1 + 0.5 * r) * f - 0.5 * r * f_prev
                lap = np.empty_like(u)
                lap[1:-1] = u[:-2] - 2 * u[1:-1] + u[2:]
                lap[0] = u[1] - 2 * u[0]
                lap[-1] = u[-2] - 2 * u[-1]
                rhs = u + 0.5 * dt * lam * lap + dt * bc + dt * expl
                u = solve_banded((1, 1), ab, rhs, check_finite=False)
                f_prev, dt_prev = f, dt
        out[i, 1:-1] = u
        out[i, 0] = out[i, -1] = -1.0
    return x, out


def solve_allen_cahn(d, xs, ts, n_interior=4095, dt_max=1e-4):
    """u_t = d u_xx + 5(u - u^3) on [-1, 1], u(x,0) = x^2 cos(pi x), u(+-1,t) = -1."""
    if not d > 0:
        raise ConfigError(f"diffusion coefficient must be positive, got {d}")
    if n_interior < 512 or dt_max > 1e-4:
        raise ConfigError("need at least 512 interior nodes and dt <= 1e-4")
    xs = np.asarray(xs, dtype=np.float64)
    nodes, vals = allen_cahn_nodes(d, ts, n_interior, dt_max)
    values = CubicSpline(nodes, vals, axis=1)(xs)
    values[:, (xs == -1.0) | (xs == 1.0)] = -1.0
    return SolutionGrid(xs, _check_times(ts), values[..., None])


# ---------------------------------------------------------------------------
# nonlinear Schrödinger via split-step Fourier

SCHRODINGER_BOX = (-5.0, 5.0)


def schrodinger_modes(ts, amplitude=2.0, n_modes=256, dt_max=5e-5):
    """Periodic-grid values h (n_t, n_modes) of i h_t + h_xx/2 + |h|^2 h = 0.

    Strang splitting: half linear step in Fourier space, full nonlinear phase
    rotation, half linear step.
    """
    ts = _check_times(ts)
    lo, hi = SCHRODINGER_BOX
    x = lo + (hi - lo) * np.arange(n_modes) / n_modes
    k = 2 * np.pi * np.fft.fftfreq(n_modes, d=(hi - lo) / n_modes)
    h = (amplitude / np.cosh(x)).astype(np.complex128)
    out = np.empty((len(ts), n_modes), dtype=np.complex128)
    for i, n, dt in _time_segments(ts, dt_max):
        if n:
            half = np.exp(-0.5j * k * k * (dt / 2))
            hh = np.fft.fft(h)
            for _ in range(n):
                h = np.fft.ifft(hh * half)
                h *= np.exp(1j * (h.real ** 2 + h.imag ** 2) * dt)
                hh = np.fft.fft(h) * half
            h = np.fft.ifft(hh)
        out[i] = h
    return x, out


def trig_interpolate(values, xs, lo, hi):
    """Evaluate the trigonometric interpolant of periodic samples at ``xs``.

    ``values`` has samples on its last axis; the Nyquist mode (even count)
    is split symmetrically so real data give real interpolants.
    """
    n = values.shape[-1]
    coef = np.fft.fft(values, axis=-1) / n
    m = np.fft.fftfreq(n, d=1.0 / n)
    weights = np.ones(n)
    if n % 2 == 0:
        m[n // 2] = n // 2
        weights[n // 2] = 0.5
    phase = 2j * np.pi * np.outer(np.asarray(xs, dtype=np.float64) - lo, m) / (hi - lo)
    basis = np.exp(phase) * weights
    out = coef @ basis.T
    if n % 2 == 0:
        out = out + (coef[..., n // 2:n // 2 + 1] * 0.5) * np.exp(-phase[:, n // 2])
    return out


def solve_schrodinger(xs, ts, amplitude=2.0, n_modes=256, dt_max=5e-5):
    """Channels (Re h, Im h) at arbitrary ``xs`` in [-5, 5] by spectral interpolation."""
    if n_modes < 256 or dt_max > 1e-4:
        raise ConfigError("need at least 256 modes and dt <= 1e-4")
    _, h = schrodinger_modes(ts, amplitude, n_modes, dt_max)
    vals = trig_interpolate(h, xs, *SCHRODINGER_BOX)
    return SolutionGrid(xs, _check_times(ts), np.stack([vals.real, vals.imag], axis=-1))


def schrodinger_mass(h, n_modes=256):
    """Rectangle-rule mass sum |h|^2 dx on the periodic grid."""
    lo, hi = SCHRODINGER_BOX
    return np.sum(np.abs(h) ** 2, axis=-1) * (hi - lo) / n_modes


# ---------------------------------------------------------------------------
# dispatch


def sample_reference(problem, xs, ts):
    """Reference values of ``problem`` on the grid ``xs`` x ``ts``."""
    if isinstance(problem, str):
        problem = make_problem(problem)
    xs, ts = np.asarray(xs, dtype=np.float64), np.asarray(ts, dtype=np.float64)
    kind, p = problem.kind, problem.params
    if kind == "beltrami":
        if xs.ndim != 2 or xs.shape[1] != 3:
            raise ConfigError("beltrami references need (n, 3) spatial points")
        values = np.stack([exact(problem, xs, t) for t in ts])
        return SolutionGrid(np.arange(len(xs), dtype=np.float64), ts, values)
    if kind == "burgers":
        return solve_burgers(p["nu"], xs, ts)
    if kind == "allen_cahn":
        return solve_allen_cahn(p["d"], xs, ts)
    if kind == "schrodinger":
        return solve_schrodinger(xs, ts, amplitude=p["amplitude"])
    xx, tt = np.meshgrid(xs, ts)
    return SolutionGrid(xs, ts, exact(problem, xx, tt))


def spatial_grid(problem, n=256):
    """``n`` equally spaced points over the spatial interval, right end excluded."""
    dom = problem.domain
    return dom.x_min + dom.length * np.arange(n) / n


def time_grid(problem, n=100):
    """``n`` slices 0, t_max/n, ..., excluding t_max (0, 0.01, ..., 0.99 for t_max = 1)."""
    return problem.domain.t_max * np.arange(n) / n


def save_grid(grid, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    grid.to_csv(path)
