import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pinnshift import neural
from pinnshift.autodiff import Var
from pinnshift.errors import ConfigError, NumericError
from pinnshift.neural import (FourierFeatureConfig, Network, fourier_embed, forward,
                              init_xavier_normal, jet, param_gradient)


def fd_jet(net, x, t, h=1e-4):
    """Central finite-difference oracle for (u_x, u_t, u_xx)."""
    f = lambda a, b: forward(net, a, b)
    ux = (f(x + h, t) - f(x - h, t)) / (2 * h)
    ut = (f(x, t + h) - f(x, t - h)) / (2 * h)
    uxx = (f(x + h, t) - 2 * f(x, t) + f(x - h, t)) / h ** 2
    return ux, ut, uxx


def fd_param_grad(net, loss_fn, h=1e-6):
    grads = []
    for arr in net.params():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn()
            arr[idx] = old - h
            down = loss_fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return np.concatenate([g.ravel() for g in grads])


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# ---------------------------------------------------------------------------
# initialization


def test_xavier_default_architecture():
    net = init_xavier_normal([2, 50, 50, 50, 50, 1], "tanh", seed=0)
    assert [w.shape for w in net.weights] == [(2, 50), (50, 50), (50, 50), (50, 50), (50, 1)]
    assert all(np.all(b == 0) for b in net.biases)


def test_xavier_variance():
    draws = np.array([init_xavier_normal([1, 1], seed=s).weights[0][0, 0] for s in range(20000)])
    # widths [1, 1]: variance 2 / (1 + 1) = 1
    assert abs(draws.mean()) < 0.03
    assert abs(draws.var() - 1.0) < 0.05
    big = init_xavier_normal([1, 100000], seed=1).weights[0].ravel()
    assert abs(big.var() - 2 / 100001) / (2 / 100001) < 0.05


def test_xavier_deterministic():
    a = init_xavier_normal([2, 8, 1], seed=3)
    b = init_xavier_normal([2, 8, 1], seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_empty_widths_rejected():
    with pytest.raises(ConfigError):
        init_xavier_normal([])


# ---------------------------------------------------------------------------
# forward and jets


def test_zero_network_outputs_zero():
    net = init_xavier_normal([2, 5, 5, 1], seed=0)
    for w in net.weights:
        w[...] = 0.0
    assert forward(net, 0.3, 0.7) == 0.0
    assert np.all(forward(net, np.linspace(-1, 1, 7), 0.2) == 0.0)


def test_single_tanh_neuron():
    w = [np.array([[1.0], [0.0]]), np.array([[1.0]])]
    b = [np.zeros(1), np.zeros(1)]
    net = Network([2, 1, 1], w, b, "tanh")
    assert forward(net, 0.0, 0.5) == 0.0


def test_linear_identity_jet():
    net = Network([2, 1], [np.array([[1.0], [0.0]])], [np.zeros(1)])
    j = jet(net, 0.37, 0.2)
    assert (j.u, j.du_dx, j.du_dt, j.d2u_dx2) == (0.37, 1.0, 0.0, 0.0)


def test_sin_neuron_jet():
    net = Network([2, 1, 1], [np.array([[1.0], [0.0]]), np.array([[1.0]])],
                  [np.zeros(1), np.zeros(1)], "sin")
    j = jet(net, 0.0, 0.3)
    assert (j.u, j.du_dx, j.du_dt, j.d2u_dx2) == (0.0, 1.0, 0.0, 0.0)


@pytest.mark.parametrize("activation", ["tanh", "sin"])
def test_jet_matches_finite_differences(activation):
    rng = np.random.default_rng(0)
    net = init_xavier_normal([2, 16, 16, 16, 1], activation, seed=1)
    x, t = rng.uniform(-1, 1, 100), rng.uniform(0, 1, 100)
    j = jet(net, x, t)
    ux, ut, uxx = fd_jet(net, x, t)
    assert rel_err(j.du_dx, ux) < 1e-4
    assert rel_err(j.du_dt, ut) < 1e-4
    assert rel_err(j.d2u_dx2, uxx) < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["tanh", "sin"]),
       depth=st.integers(1, 4), width=st.integers(1, 32), skip=st.booleans())
def test_jet_value_equals_forward_exactly(seed, act, depth, width, skip):
    net = init_xavier_normal([2] + [width] * depth + [1], act, seed=seed, skip=skip)
    rng = np.random.default_rng(seed)
    x, t = rng.uniform(-2, 2, 13), rng.uniform(0, 1, 13)
    assert np.array_equal(jet(net, x, t).u, forward(net, x, t))


# ---------------------------------------------------------------------------
# parameter gradients


def test_zero_net_stationary_gradient():
    net = init_xavier_normal([2, 4, 4, 1], seed=0)
    for w in net.weights:
        w[...] = 0.0
    pts = np.array([[0.0, 0.0]])
    _, grad = param_gradient(net, lambda tr: (tr.forward(pts)[:, 0] ** 2).sum())
    assert np.all(grad.flat() == 0.0)


def _points(seed, n=10):
    rng = np.random.default_rng(seed)
    return np.stack([rng.uniform(-1, 1, n), rng.uniform(0, 1, n)], axis=1)


@pytest.mark.parametrize("activation", ["tanh", "sin"])
def test_gradient_of_mean_square_output(activation):
    net = init_xavier_normal([2, 6, 6, 1], activation, seed=2)
    pts = _points(0)
    loss = lambda tr: (tr.forward(pts)[:, 0] ** 2).mean()
    value, grad = param_gradient(net, loss)
    oracle = fd_param_grad(net, lambda: float(np.mean(neural.forward_inputs(net, pts) ** 2)))
    assert value == pytest.approx(float(np.mean(neural.forward_inputs(net, pts) ** 2)))
    assert rel_err(grad.flat(), oracle) < 1e-5


@pytest.mark.parametrize("activation", ["tanh", "sin"])
def test_gradient_of_second_derivative_loss(activation):
    net = init_xavier_normal([2, 5, 5, 1], activation, seed=4)
    pts = _points(1)
    loss = lambda tr: (tr.jet(pts).d2u_dx2[:, 0] ** 2).mean()
    _, grad = param_gradient(net, loss)

    def plain():
        _, _, second = neural.jet_inputs(net, pts, (0, 1), (0,))
        return float(np.mean(second[0, :, 0] ** 2))

    assert rel_err(grad.flat(), fd_param_grad(net, plain)) < 1e-4


def pinn_style_loss(tr, pts):
    j = tr.jet(pts)
    u, ux, ut, uxx = j.u[:, 0], j.du_dx[:, 0], j.du_dt[:, 0], j.d2u_dx2[:, 0]
    r = ut + u * ux - 0.05 * uxx
    return (r ** 2).mean() + (u ** 2).mean()


def pinn_style_plain(net, pts):
    v, f, s = neural.jet_inputs(net, pts, (0, 1), (0,))
    u, ux, ut, uxx = v[:, 0], f[0, :, 0], f[1, :, 0], s[0, :, 0]
    r = ut + u * ux - 0.05 * uxx
    return float(np.mean(r ** 2) + np.mean(u ** 2))


@pytest.mark.parametrize("skip", [False, True])
def test_gradient_pinn_style_with_skip(skip):
    net = init_xavier_normal([2, 5, 5, 5, 1], "tanh", seed=7, skip=skip)
    pts = _points(3)
    _, grad = param_gradient(net, lambda tr: pinn_style_loss(tr, pts))
    assert rel_err(grad.flat(), fd_param_grad(net, lambda: pinn_style_plain(net, pts))) < 1e-4


def test_frozen_layers_get_zero_gradient():
    net = init_xavier_normal([2, 5, 5, 1], seed=0)
    net.freeze_all_but_last()
    pts = _points(2)
    _, grad = param_gradient(net, lambda tr: pinn_style_loss(tr, pts))
    assert all(np.all(g == 0) for g in grad.weights[:-1] + grad.biases[:-1])
    assert np.any(grad.weights[-1] != 0)


def test_frozen_prefix_cache_matches_full_evaluation():
    net = init_xavier_normal([2, 6, 6, 2], seed=5)
    net.freeze_all_but_last()
    pts = _points(4)
    loss = lambda tr: pinn_style_loss(tr, pts)
    _, full = param_gradient(net, lambda tr: (tr.jet(pts).u ** 2).mean() + (tr.jet(pts).d2u_dx2 ** 2).mean())
    cache = {}
    closure = lambda tr: (tr.jet(pts, key="d").u ** 2).mean() + (tr.jet(pts, key="d").d2u_dx2 ** 2).mean()
    _, cached = param_gradient(net, closure, cache=cache)
    _, again = param_gradient(net, closure, cache=cache)
    assert "d" in cache
    np.testing.assert_allclose(cached.flat(), full.flat(), rtol=1e-12, atol=1e-14)
    assert np.array_equal(cached.flat(), again.flat())
    del loss


def test_non_finite_loss_raises():
    net = init_xavier_normal([2, 3, 1], seed=0)
    with pytest.raises(NumericError):
        param_gradient(net, lambda tr: tr.forward(_points(0))[:, 0].sum() * np.inf, epoch=12)


def test_gradients_deterministic():
    net = init_xavier_normal([2, 8, 8, 1], seed=9)
    pts = _points(9, 50)
    a = param_gradient(net, lambda tr: pinn_style_loss(tr, pts))[1].flat()
    b = param_gradient(net, lambda tr: pinn_style_loss(tr, pts))[1].flat()
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Fourier features


def test_fourier_zero_matrix():
    cfg = FourierFeatureConfig((1.0,), 4, 0)
    feats = fourier_embed(cfg, np.array([0.3, -0.2]), np.array([0.1, 0.9]), matrix=np.zeros((4, 2)))
    assert np.all(feats.u[:, :4] == 0.0) and np.all(feats.u[:, 4:] == 1.0)


def test_fourier_width():
    cfg = FourierFeatureConfig((1.0, 5.0), 32, 0)
    assert cfg.width == 128
    assert fourier_embed(cfg, 0.1, 0.2).u.shape == (1, 128)


def test_fourier_jets_match_finite_differences():
    cfg = FourierFeatureConfig((1.0, 5.0), 8, 3)
    x, t, h = np.linspace(-1, 1, 9), np.linspace(0, 1, 9), 1e-5
    f = fourier_embed(cfg, x, t)
    val = lambda a, b: fourier_embed(cfg, a, b).u
    ux = (val(x + h, t) - val(x - h, t)) / (2 * h)
    ut = (val(x, t + h) - val(x, t - h)) / (2 * h)
    uxx = (val(x + 1e-4, t) - 2 * val(x, t) + val(x - 1e-4, t)) / 1e-8
    assert rel_err(f.du_dx, ux) < 1e-5
    assert rel_err(f.du_dt, ut) < 1e-5
    assert rel_err(f.d2u_dx2, uxx) < 1e-5


def test_embedded_network_gradients():
    emb = FourierFeatureConfig((1.0, 2.0), 3, 1)
    net = init_xavier_normal([2, 6, 1], "sin", seed=2, embedding=emb)
    pts = _points(6)
    j = jet(net, pts[:, 0], pts[:, 1])
    ux, ut, uxx = fd_jet(net, pts[:, 0], pts[:, 1])
    assert rel_err(j.du_dx, ux) < 1e-4 and rel_err(j.d2u_dx2, uxx) < 1e-4
    _, grad = param_gradient(net, lambda tr: pinn_style_loss(tr, pts))
    assert rel_err(grad.flat(), fd_param_grad(net, lambda: pinn_style_plain(net, pts))) < 1e-4


def test_general_jets_for_higher_dimensional_inputs():
    net = init_xavier_normal([4, 7, 7, 4], "tanh", seed=0)
    pts = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    value, first, second = neural.jet_inputs(net, pts, (0, 1, 2, 3), (0, 1, 2))
    h = 1e-4
    for d in range(4):
        e = np.zeros(4)
        e[d] = h
        fd = (neural.forward_inputs(net, pts + e) - neural.forward_inputs(net, pts - e)) / (2 * h)
        assert rel_err(first[d], fd) < 1e-5
        if d < 3:
            fd2 = (neural.forward_inputs(net, pts + e) - 2 * value + neural.forward_inputs(net, pts - e)) / h ** 2
            assert rel_err(second[d], fd2) < 1e-4


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    emb = FourierFeatureConfig((1.0, 5.0), 4, 7)
    for net in (init_xavier_normal([2, 50, 50, 50, 50, 1], seed=0),
                init_xavier_normal([2, 6, 6, 3], "sin", seed=1, embedding=emb, skip=True)):
        path = tmp_path / "net.ckpt"
        neural.save_checkpoint(net, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "PINNCKPT v1"
        back = neural.load_checkpoint(path)
        assert back.descriptor() == net.descriptor()
        assert all(np.array_equal(a, b) for a, b in zip(back.params(), net.params()))
    assert lines[1].startswith("widths=2,6,6,3 act=sin embed=fourier:")


def test_checkpoint_descriptor_line(tmp_path):
    net = init_xavier_normal([2, 50, 50, 50, 50, 1], seed=0)
    neural.save_checkpoint(net, tmp_path / "a.ckpt")
    assert (tmp_path / "a.ckpt").read_text().splitlines()[1] == "widths=2,50,50,50,50,1 act=tanh embed=none"


def test_var_arithmetic_gradients():
    a = Var(np.array([1.0, 2.0, 3.0]))
    b = Var(np.array([0.5, -1.0, 2.0]))
    loss = ((a * b - 2.0 * a / b + a ** 3) ** 2).mean()
    loss.backward()
    av, bv = a.value, b.value
    inner = av * bv - 2 * av / bv + av ** 3
    np.testing.assert_allclose(a.grad, 2 * inner * (bv - 2 / bv + 3 * av ** 2) / 3)
    np.testing.assert_allclose(b.grad, 2 * inner * (av + 2 * av / bv ** 2) / 3)
