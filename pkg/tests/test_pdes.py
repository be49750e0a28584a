import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnshift.errors import ConfigError
from pinnshift.neural import Jet
from pinnshift.pdes import (KINDS, PeriodicConstraint, ResidualInput, boundary_condition,
                            initial_condition, make_problem, residual)
from pinnshift.refsol import exact_jets

CLOSED = [("diffusion", {}), ("diffusion_reaction", {}), ("k_family", {"K": 2}),
          ("k_family", {"K": 10}), ("k_family", {"K": 20}), ("m_family", {"M": 1.0}),
          ("m_family", {"M": 3.0}), ("m_family", {"M": 5.5}), ("heat", {})]


def _points(problem, n, seed):
    rng = np.random.default_rng(seed)
    dom = problem.domain
    return rng.uniform(dom.x_min, dom.x_max, n), rng.uniform(0, dom.t_max, n)


def test_burgers_residual_arithmetic():
    p = make_problem("burgers", nu=0.01)
    r = residual(p, ResidualInput([Jet(u=1.0, du_dx=3.0, du_dt=2.0, d2u_dx2=4.0)], 0.0, 0.0))
    assert r[0] == pytest.approx(4.96, abs=1e-15)


def test_allen_cahn_residual_vanishes_at_u_one():
    for d in (1e-4, 1e-3, 0.1):
        p = make_problem("allen_cahn", d=d)
        r = residual(p, ResidualInput([Jet(u=1.0, du_dx=0.3, du_dt=0.0, d2u_dx2=0.0)], 0.2, 0.1))
        assert r[0] == 0.0


@pytest.mark.parametrize("kind,params", CLOSED)
def test_exact_solution_has_zero_residual(kind, params):
    p = make_problem(kind, params)
    x, t = _points(p, 1000, 1)
    r = residual(p, ResidualInput(exact_jets(p, x, t), x, t))
    assert np.max(np.abs(r[0])) < 1e-8


@pytest.mark.parametrize("re", [1.0, 0.95, 1.1])
def test_beltrami_exact_solution_has_zero_residual(re):
    p = make_problem("beltrami", Re=re)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (1000, 3))
    t = rng.uniform(0, 1, 1000)
    res = residual(p, ResidualInput(exact_jets(p, pts, t), pts[:, 0], t, pts[:, 1], pts[:, 2]))
    assert len(res) == 4
    assert max(np.max(np.abs(r)) for r in res) < 1e-8


def test_schrodinger_residual_of_soliton():
    # h = sech(x) e^{it/2} solves i h_t + h_xx/2 + |h|^2 h = 0
    p = make_problem("schrodinger")
    x = np.linspace(-5, 5, 101)
    t = 0.3
    s, th = 1 / np.cosh(x), np.tanh(x)
    c, sn = np.cos(t / 2), np.sin(t / 2)
    sxx = s * (1 - 2 * s * s)
    ju = Jet(u=s * c, du_dx=-s * th * c, du_dt=-0.5 * s * sn, d2u_dx2=sxx * c)
    jv = Jet(u=s * sn, du_dx=-s * th * sn, du_dt=0.5 * s * c, d2u_dx2=sxx * sn)
    res = residual(p, ResidualInput([ju, jv], x, t))
    assert max(np.max(np.abs(r)) for r in res) < 1e-14


@given(st.sampled_from([k for k in KINDS if k not in ("schrodinger", "beltrami")]),
       st.floats(-1, 1), st.floats(-5, 5), st.floats(-3, 3))
@settings(max_examples=60, deadline=None)
def test_residual_linear_in_time_derivative(kind, u, ut, delta):
    p = make_problem(kind)
    jet = Jet(u=u, du_dx=0.4, du_dt=ut, d2u_dx2=-1.3)
    moved = Jet(u=u, du_dx=0.4, du_dt=ut + delta, d2u_dx2=-1.3)
    r0 = residual(p, ResidualInput([jet], 0.3, 0.2))[0]
    r1 = residual(p, ResidualInput([moved], 0.3, 0.2))[0]
    assert r1 - r0 == pytest.approx(delta, abs=1e-12)


def test_initial_conditions():
    assert initial_condition(make_problem("burgers"), 0.5)[0] == pytest.approx(-1.0, abs=1e-15)
    assert initial_condition(make_problem("allen_cahn"), 1.0)[0] == pytest.approx(-1.0, abs=1e-15)
    assert initial_condition(make_problem("k_family", K=2), np.pi / 2)[0] == pytest.approx(1.0, abs=1e-15)
    sch = initial_condition(make_problem("schrodinger"), 0.0)
    assert sch.tolist() == [2.0, 0.0]


def test_boundary_conditions():
    for side in ("left", "right"):
        assert boundary_condition(make_problem("diffusion"), 0.3, side)[0] == 0.0
        assert boundary_condition(make_problem("allen_cahn"), 0.7, side)[0] == -1.0
        assert boundary_condition(make_problem("heat"), 0.1, side)[0] == 0.0
    per = boundary_condition(make_problem("schrodinger"), 0.2, "left")
    assert isinstance(per, PeriodicConstraint) and (per.left, per.right) == (-5.0, 5.0)
    with pytest.raises(ConfigError):
        boundary_condition(make_problem("diffusion"), 0.1, "top")


def test_heat_domain_matches_its_boundary_points():
    dom = make_problem("heat").domain
    assert (dom.x_min, dom.x_max) == (0.0, 1.0)


def test_problem_validation():
    with pytest.raises(ConfigError):
        make_problem("navier_stokes")
    with pytest.raises(ConfigError):
        make_problem("burgers", d=0.1)
    with pytest.raises(ConfigError):
        make_problem("burgers", nu=-0.01)
    with pytest.raises(ConfigError):
        make_problem("k_family", K=2.5)
    p = make_problem("schrodinger")
    assert p.n_outputs == 2 and p.domain.t_max == pytest.approx(np.pi / 2)
    assert make_problem("beltrami").n_outputs == 4


def test_jet_count_checked():
    p = make_problem("schrodinger")
    with pytest.raises(ConfigError):
        residual(p, ResidualInput([Jet(u=0.0)], 0.0, 0.0))
