"""Catalog of the PDE problems: residual operators, domains and side conditions.

Residuals are written with plain arithmetic so the same code runs on floats,
numpy arrays and :class:`~pinnshift.autodiff.Var` nodes. Every residual is
arranged as ``u_t + N(u)`` (unit coefficient on the time derivative).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UnsupportedError

KINDS = ("burgers", "allen_cahn", "diffusion", "diffusion_reaction", "k_family",
         "m_family", "heat", "schrodinger", "beltrami")

DR_MODES = (1, 2, 3, 4, 8)

# default parameter values; the key set of each entry is the full parameter set
_DEFAULT_PARAMS = {
    "burgers": {"nu": 0.01},
    "allen_cahn": {"d": 0.001},
    "diffusion": {},
    "diffusion_reaction": {},
    "k_family": {"K": 2},
    "m_family": {"M": 1.0},
    "heat": {"alpha": 0.4},
    "schrodinger": {"amplitude": 2.0},
    "beltrami": {"a": 1.0, "d": 1.0, "Re": 1.0},
}

_N_OUTPUTS = {"schrodinger": 2, "beltrami": 4}


@dataclass(frozen=True)
class Domain:
    x_min: float
    x_max: float
    t_train: float
    t_max: float
    spatial_dim: int = 1

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ConfigError(f"empty spatial domain [{self.x_min}, {self.x_max}]")
        if not 0.0 < self.t_train < self.t_max:
            raise ConfigError(f"need 0 < t_train < t_max, got {self.t_train}, {self.t_max}")

    @property
    def length(self):
        return self.x_max - self.x_min

    def is_extrapolation(self, t):
        return np.asarray(t) > self.t_train


_DOMAINS = {
    "burgers": Domain(-1.0, 1.0, 0.5, 1.0),
    "allen_cahn": Domain(-1.0, 1.0, 0.5, 1.0),
    "diffusion": Domain(-1.0, 1.0, 0.5, 1.0),
    "diffusion_reaction": Domain(-np.pi, np.pi, 0.5, 1.0),
    "k_family": Domain(-np.pi, np.pi, 0.5, 1.0),
    "m_family": Domain(-np.pi, np.pi, 0.5, 1.0),
    "heat": Domain(0.0, 1.0, 0.5, 1.0),
    "schrodinger": Domain(-5.0, 5.0, np.pi / 4, np.pi / 2),
    "beltrami": Domain(-1.0, 1.0, 0.5, 1.0, spatial_dim=3),
}


def default_domain(kind):
    if kind not in KINDS:
        raise ConfigError(f"unknown PDE {kind!r}; choose from {', '.join(KINDS)}")
    return _DOMAINS[kind]


@dataclass(frozen=True)
class PdeProblem:
    kind: str
    params: dict = field(default_factory=dict)
    domain: Domain = None
    n_outputs: int = 1

    @property
    def id(self):
        return self.kind

    def describe(self):
        items = ", ".join(f"{k}={v!r}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({items})"


def make_problem(kind, params=None, domain=None, **kwargs):
    """Build a problem from its string id, filling in default parameters.

    Unknown parameter names and non-positive physical constants are rejected.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown PDE {kind!r}; choose from {', '.join(KINDS)}")
    given = dict(params or {})
    given.update(kwargs)
    defaults = _DEFAULT_PARAMS[kind]
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{kind}: unknown parameter(s) {unknown}; expected {sorted(defaults)}")
    merged = {**defaults, **given}
    for key, value in merged.items():
        try:
            value = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{kind}: parameter {key} must be a number") from exc
        if not np.isfinite(value) or value <= 0:
            raise ConfigError(f"{kind}: parameter {key} must be positive, got {value}")
        merged[key] = value
    if kind == "k_family":
        if merged["K"] != int(merged["K"]):
            raise ConfigError("k_family: K must be an integer")
        merged["K"] = int(merged["K"])
    return PdeProblem(kind, merged, domain or _DOMAINS[kind], _N_OUTPUTS.get(kind, 1))


@dataclass
class ResidualInput:
    """Jets of every output channel at some points, plus the coordinates.

    ``y`` and ``z`` are only used by 3-D problems.
    """

    jets: list
    x: object
    t: object
    y: object = None
    z: object = None


def _check(problem, inp):
    if len(inp.jets) != problem.n_outputs:
        raise ConfigError(f"{problem.kind} expects {problem.n_outputs} output jets, "
                          f"got {len(inp.jets)}")


def dr_forcing(x, t, modes=DR_MODES, decay=1.0):
    """Source term e^{-decay t} sum_j (j^2 - decay)/j sin(jx)."""
    x = np.asarray(x, dtype=np.float64)
    total = sum((j * j - decay) / j * np.sin(j * x) for j in modes)
    return np.exp(-decay * np.asarray(t, dtype=np.float64)) * total


def residual(problem, inp):
    """PDE residual(s) as a list with one entry per governing equation."""
    _check(problem, inp)
    kind, p = problem.kind, problem.params
    x, t = inp.x, inp.t
    if kind == "schrodinger":
        return _schrodinger_residual(*inp.jets)
    if kind == "beltrami":
        return _beltrami_residual(inp.jets, 1.0 / p["Re"])
    j = inp.jets[0]
    if kind == "burgers":
        return [j.du_dt + j.u * j.du_dx - p["nu"] * j.d2u_dx2]
    if kind == "allen_cahn":
        return [j.du_dt - p["d"] * j.d2u_dx2 - 5.0 * (j.u - j.u ** 3)]
    if kind == "diffusion":
        s = np.sin(np.pi * np.asarray(x, dtype=np.float64))
        return [j.du_dt - j.d2u_dx2 + np.exp(-np.asarray(t, dtype=np.float64)) * (s - np.pi ** 2 * s)]
    if kind == "diffusion_reaction":
        return [j.du_dt - j.d2u_dx2 - dr_forcing(x, t)]
    if kind == "k_family":
        return [j.du_dt - j.d2u_dx2 - dr_forcing(x, t, range(1, p["K"] + 1))]
    if kind == "m_family":
        return [j.du_dt - j.d2u_dx2 - dr_forcing(x, t, DR_MODES, p["M"])]
    if kind == "heat":
        return [j.du_dt - p["alpha"] * j.d2u_dx2]
    raise ConfigError(f"unknown PDE {kind!r}")


def _schrodinger_residual(ju, jv):
    # i h_t + h_xx / 2 + |h|^2 h = 0 with h = u + iv, split into imaginary and real parts
    m = ju.u * ju.u + jv.u * jv.u
    return [ju.du_dt + 0.5 * jv.d2u_dx2 + m * jv.u,
            jv.du_dt - 0.5 * ju.d2u_dx2 - m * ju.u]


def _beltrami_residual(jets, inv_re):
    ju, jv, jw, jp = jets
    vel = (ju, jv, jw)
    grad_p = (jp.du_dx, jp.du_dy, jp.du_dz)
    out = []
    for comp, dp in zip(vel, grad_p):
        adv = ju.u * comp.du_dx + jv.u * comp.du_dy + jw.u * comp.du_dz
        lap = comp.d2u_dx2 + comp.d2u_dy2 + comp.d2u_dz2
        out.append(comp.du_dt + adv + dp - inv_re * lap)
    out.append(ju.du_dx + jv.du_dy + jw.du_dz)
    return out


def _sech(x):
    return 1.0 / np.cosh(x)


def initial_condition(problem, x):
    """Initial values, shape (n_outputs,) per point (leading axes follow ``x``).

    For Beltrami ``x`` holds (x, y, z) along its last axis.
    """
    kind, p = problem.kind, problem.params
    x = np.asarray(x, dtype=np.float64)
    if kind == "beltrami":
        from .refsol import exact
        return exact(problem, x, 0.0)
    if kind == "burgers":
        vals = [-np.sin(np.pi * x)]
    elif kind == "allen_cahn":
        vals = [x * x * np.cos(np.pi * x)]
    elif kind in ("diffusion", "heat"):
        vals = [np.sin(np.pi * x)]
    elif kind in ("diffusion_reaction", "m_family"):
        vals = [sum(np.sin(j * x) / j for j in DR_MODES)]
    elif kind == "k_family":
        vals = [sum(np.sin(j * x) / j for j in range(1, p["K"] + 1))]
    elif kind == "schrodinger":
        vals = [p["amplitude"] * _sech(x), np.zeros_like(x)]
    else:
        raise ConfigError(f"unknown PDE {kind!r}")
    return np.stack(vals, axis=-1)


@dataclass(frozen=True)
class PeriodicConstraint:
    """Boundary descriptor: value and listed derivatives match across the two ends."""

    left: float
    right: float
    derivatives: tuple = (0, 1)


SIDES = ("left", "right")


def boundary_condition(problem, t, side, point=None):
    """Dirichlet boundary values (n_outputs,) at time ``t`` on ``side``.

    Schrödinger returns a :class:`PeriodicConstraint` instead of values.
    Beltrami needs the boundary ``point`` (x, y, z) since its data vary along
    each face.
    """
    if side not in SIDES:
        raise ConfigError(f"side must be one of {SIDES}, got {side!r}")
    kind = problem.kind
    t = np.asarray(t, dtype=np.float64)
    if kind == "schrodinger":
        return PeriodicConstraint(problem.domain.x_min, problem.domain.x_max)
    if kind == "beltrami":
        if point is None:
            raise ConfigError("beltrami boundary values need the boundary point (x, y, z)")
        from .refsol import exact
        return exact(problem, point, t)
    value = -1.0 if kind == "allen_cahn" else 0.0
    return np.full(t.shape + (1,), value)


def boundary_x(problem, side):
    return problem.domain.x_min if side == "left" else problem.domain.x_max


def require_1d(problem, what):
    if problem.domain.spatial_dim != 1:
        raise UnsupportedError(f"{what} is only implemented for 1-D problems, not {problem.kind}")
