"""Fully-connected networks with exact input-derivative jets.

Input derivatives are propagated forward as truncated Taylor coefficients:
for every evaluation point we carry the value, the first derivative along each
requested input direction and the pure second derivative along a chosen
subset of those directions. Parameter gradients of any loss built from these
jets are obtained with a hand-derived reverse pass through the same
propagation, so PINN losses containing u, u_x, u_t and u_xx are
differentiated exactly.

All arithmetic is float64. Weights are stored as ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .autodiff import Var
from .errors import ConfigError, NumericError

ACTIVATIONS = ("tanh", "sin")
_ACT_CODE = {"tanh": 0, "sin": 1}
CHECKPOINT_MAGIC = "PINNCKPT v1"


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class FourierFeatureConfig:
    """Multi-scale random Fourier feature embedding of the inputs."""

    sigmas: tuple
    features_per_sigma: int
    frequency_matrix_seed: int = 0

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas or any(not np.isfinite(s) or s <= 0 for s in sigmas):
            raise ConfigError(f"Fourier feature sigmas must be positive, got {self.sigmas!r}")
        if int(self.features_per_sigma) < 1:
            raise ConfigError("features_per_sigma must be a positive integer")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "features_per_sigma", int(self.features_per_sigma))
        object.__setattr__(self, "frequency_matrix_seed", int(self.frequency_matrix_seed))

    @property
    def width(self):
        return 2 * self.features_per_sigma * len(self.sigmas)

    def matrix(self, in_dim):
        """Frequency matrix B, shape (features_per_sigma * |sigmas|, in_dim)."""
        rng = np.random.default_rng(self.frequency_matrix_seed)
        blocks = [s * rng.standard_normal((self.features_per_sigma, in_dim)) for s in self.sigmas]
        return np.vstack(blocks)

    def descriptor(self):
        return "fourier:{}:{}:{}".format(
            ",".join(repr(s) for s in self.sigmas), self.features_per_sigma,
            self.frequency_matrix_seed)

    @classmethod
    def from_descriptor(cls, text):
        try:
            kind, sigmas, m, seed = text.split(":")
            if kind != "fourier":
                raise ValueError(kind)
            return cls(tuple(float(s) for s in sigmas.split(",")), int(m), int(seed))
        except ValueError as exc:
            raise ConfigError(f"bad embedding descriptor {text!r}") from exc


@dataclass
class Jet:
    """Value and input derivatives of a network output at some points.

    Fields hold floats, arrays or :class:`~pinnshift.autodiff.Var` nodes.
    The ``y``/``z`` fields are only populated for 3-D problems.
    """

    u: object
    du_dx: object = 0.0
    du_dt: object = 0.0
    d2u_dx2: object = 0.0
    du_dy: object = None
    du_dz: object = None
    d2u_dy2: object = None
    d2u_dz2: object = None


@dataclass
class ParamGradient:
    weights: list
    biases: list

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


@dataclass
class Network:
    """MLP ``widths[0] -> ... -> widths[-1]`` with optional input embedding.

    With ``skip=True`` every hidden layer whose input and output widths agree
    becomes a residual block ``h + act(W h + b)``.
    """

    widths: list
    weights: list
    biases: list
    activation: str = "tanh"
    embedding: FourierFeatureConfig | None = None
    skip: bool = False
    frozen: list = None
    _freq: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid layer widths {self.widths}")
        n = len(self.widths) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ConfigError("weights/biases do not match the layer widths")
        fan_in = self.embedding.width if self.embedding else self.widths[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            exp_in = fan_in if i == 0 else self.widths[i]
            if w.shape != (exp_in, self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ConfigError(f"layer {i}: incompatible shapes {w.shape}, {b.shape}")
        if self.frozen is None:
            self.frozen = [False] * n
        if len(self.frozen) != n:
            raise ConfigError("frozen mask length must equal the number of layers")
        if self.embedding is not None:
            self._freq = self.embedding.matrix(self.widths[0])

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def params(self):
        """Parameter arrays in checkpoint order (W0, b0, W1, b1, ...)."""
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def n_params(self):
        return sum(a.size for a in self.params())

    def copy(self):
        return copy.deepcopy(self)

    def freeze_all_but_last(self):
        self.frozen = [True] * (self.n_layers - 1) + [False]
        return self

    def descriptor(self):
        parts = ["widths=" + ",".join(str(w) for w in self.widths),
                 f"act={self.activation}",
                 "embed=" + (self.embedding.descriptor() if self.embedding else "none")]
        if self.skip:
            parts.append("skip=1")
        return " ".join(parts)

    def is_residual(self, layer):
        return (self.skip and 0 < layer < self.n_layers - 1
                and self.widths[layer] == self.widths[layer + 1])


def init_xavier_normal(widths, activation="tanh", seed=0, embedding=None, skip=False):
    """Xavier-normal weights (variance 2/(fan_in+fan_out)) and zero biases."""
    widths = list(widths)
    if len(widths) == 0:
        raise ConfigError("layer width list is empty")
    if len(widths) < 2 or any(int(w) < 1 for w in widths):
        raise ConfigError(f"invalid layer widths {widths}")
    rng = np.random.default_rng(seed)
    fan_ins = [embedding.width if embedding else widths[0]] + list(widths[1:-1])
    weights, biases = [], []
    for fan_in, fan_out in zip(fan_ins, widths[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(widths, weights, biases, activation=activation, embedding=embedding, skip=skip)


# ---------------------------------------------------------------------------
# fused activation kernels


# Outputs are allocated by numpy and passed in: allocating inside the jitted
# functions is several times slower for arrays of this size.


@numba.njit(cache=True)
def _act_coeffs(kind, h, c, s1, s2, s3):
    hf, cf = h.ravel(), c.ravel()
    s1f, s2f, s3f = s1.ravel(), s2.ravel(), s3.ravel()
    if kind == 0:
        for i in range(hf.size):
            s = hf[i]
            a = 1.0 - s * s
            s1f[i] = a
            s2f[i] = -2.0 * s * a
            s3f[i] = -2.0 * a * a + 4.0 * s * s * a
    else:
        for i in range(hf.size):
            s1f[i] = cf[i]
            s2f[i] = -hf[i]
            s3f[i] = -cf[i]


@numba.njit(cache=True)
def _act_forward(zd, s1, s2, n_first, sidx, hd):
    m = s1.size
    n_ch = zd.shape[0]
    zf, hf = zd.reshape(n_ch, m), hd.reshape(n_ch, m)
    s1f, s2f = s1.ravel(), s2.ravel()
    for d in range(n_first):
        for i in range(m):
            hf[d, i] = s1f[i] * zf[d, i]
    for j in range(n_ch - n_first):
        k = sidx[j]
        for i in range(m):
            q = zf[k, i]
            hf[n_first + j, i] = s2f[i] * q * q + s1f[i] * zf[n_first + j, i]


@numba.njit(cache=True)
def _act_backward(g0, gd, zd, s1, s2, s3, n_first, sidx, gz, gzd):
    m = g0.size
    n_ch = gd.shape[0]
    g0f, gdf, zf = g0.ravel(), gd.reshape(n_ch, m), zd.reshape(n_ch, m)
    s1f, s2f, s3f = s1.ravel(), s2.ravel(), s3.ravel()
    gzf, gzdf = gz.reshape(m), gzd.reshape(n_ch, m)
    for i in range(m):
        gzf[i] = g0f[i] * s1f[i]
    for d in range(n_first):
        for i in range(m):
            gzf[i] += gdf[d, i] * s2f[i] * zf[d, i]
            gzdf[d, i] = gdf[d, i] * s1f[i]
    for j in range(n_ch - n_first):
        k = n_first + j
        e = sidx[j]
        for i in range(m):
            q = zf[e, i]
            gj = gdf[k, i]
            gzf[i] += gj * (s3f[i] * q * q + s2f[i] * zf[k, i])
            gzdf[e, i] += gj * 2.0 * s2f[i] * q
            gzdf[k, i] = gj * s1f[i]


_ALLOCATOR_TUNED = False


def tune_allocator():
    """Keep freed large buffers in the heap instead of returning them to the OS.

    Training allocates the same few megabyte-sized temporaries every epoch;
    with glibc's default mmap threshold each of them is page-faulted afresh,
    which costs about a third of the epoch time. No-op elsewhere.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _activate(kind, z):
    """Activation value (and cosine for sin) computed identically on every path."""
    if kind == "tanh":
        return np.tanh(z), None
    return np.sin(z), np.cos(z)


# ---------------------------------------------------------------------------
# propagation


class _Stack:
    """Jets of a batch at one layer boundary.

    ``value`` is (N, W); ``deriv`` is (C, N, W) with the first ``n_first``
    channels holding first derivatives and the remaining ones the second
    derivatives along directions ``sidx`` (indices into the first channels).
    ``deriv`` may be None for value-only evaluation.
    """

    __slots__ = ("value", "deriv")

    def __init__(self, value, deriv):
        self.value = value
        self.deriv = deriv


def _embed_value(net, inputs):
    p = 2.0 * np.pi * (inputs @ net._freq.T)
    return np.concatenate([np.sin(p), np.cos(p)], axis=1)


def _embed_stack(net, inputs, first_dims, sidx):
    p = 2.0 * np.pi * (inputs @ net._freq.T)
    sp, cp = np.sin(p), np.cos(p)
    value = np.concatenate([sp, cp], axis=1)
    n_first = len(first_dims)
    deriv = np.empty((n_first + len(sidx), inputs.shape[0], value.shape[1]))
    slopes = [2.0 * np.pi * net._freq[:, d] for d in first_dims]
    for k, a in enumerate(slopes):
        deriv[k] = np.concatenate([cp * a, -sp * a], axis=1)
    for j, k in enumerate(sidx):
        a2 = slopes[k] ** 2
        deriv[n_first + j] = np.concatenate([-sp * a2, -cp * a2], axis=1)
    return _Stack(value, deriv)


def _input_stack(net, inputs, first_dims, sidx):
    """Jets entering layer 0 (raw inputs or their Fourier embedding)."""
    if net.embedding is not None:
        return _embed_stack(net, inputs, first_dims, sidx)
    n = inputs.shape[0]
    if not first_dims:
        return _Stack(inputs, None)
    deriv = np.zeros((len(first_dims) + len(sidx), n, inputs.shape[1]))
    for k, d in enumerate(first_dims):
        deriv[k, :, d] = 1.0
    return _Stack(inputs, deriv)


def _propagate(net, stack, n_first, sidx, start=0, stop=None, tape=None):
    """Push ``stack`` through layers ``start:stop``; optionally record a tape."""
    stop = net.n_layers if stop is None else stop
    a = stack
    for layer in range(start, stop):
        w, b = net.weights[layer], net.biases[layer]
        z = a.value @ w
        z += b
        zd = None
        if a.deriv is not None:
            c, n, k = a.deriv.shape
            zd = (a.deriv.reshape(c * n, k) @ w).reshape(c, n, w.shape[1])
        if layer == net.n_layers - 1:
            out = _Stack(z, zd)
            stash = None
        else:
            h, cz = _activate(net.activation, z)
            hd = None
            stash = None
            if zd is not None:
                s1, s2, s3 = np.empty_like(h), np.empty_like(h), np.empty_like(h)
                _act_coeffs(_ACT_CODE[net.activation], h, h if cz is None else cz, s1, s2, s3)
                hd = np.empty_like(zd)
                _act_forward(zd, s1, s2, n_first, sidx, hd)
                stash = (zd, s1, s2, s3)
            if net.is_residual(layer):
                h += a.value
                if hd is not None:
                    hd += a.deriv
            out = _Stack(h, hd)
        if tape is not None:
            tape.append((layer, a, stash))
        a = out
    return a


def _backward(net, tape, g_value, g_deriv, n_first, sidx, grads_w, grads_b):
    """Reverse pass over a recorded tape, accumulating into grads_w/grads_b."""
    lowest = min((i for i, f in enumerate(net.frozen) if not f), default=None)
    if lowest is None:
        return
    gv, gd = g_value, g_deriv
    for layer, a, stash in reversed(tape):
        if layer < lowest:
            break
        w = net.weights[layer]
        if layer == net.n_layers - 1:
            gz, gzd = gv, gd
        elif stash is None:
            # value-only evaluation of a hidden layer
            h, cz = _activate(net.activation, a.value @ w + net.biases[layer])
            deriv1 = (1.0 - h * h) if net.activation == "tanh" else cz
            gz, gzd = gv * deriv1, None
        else:
            zd, s1, s2, s3 = stash
            gz, gzd = np.empty_like(gv), np.empty_like(gd)
            _act_backward(gv, gd, zd, s1, s2, s3, n_first, sidx, gz, gzd)
        if not net.frozen[layer]:
            gw = a.value.T @ gz
            if gzd is not None:
                c, n, k = a.deriv.shape
                gw += a.deriv.reshape(c * n, k).T @ gzd.reshape(c * n, -1)
            grads_w[layer] += gw
            grads_b[layer] += gz.sum(axis=0)
        if layer == lowest:
            break
        new_gv = gz @ w.T
        new_gd = None
        if gzd is not None:
            c, n, _ = gzd.shape
            new_gd = (gzd.reshape(c * n, -1) @ w.T).reshape(c, n, w.shape[0])
        if net.is_residual(layer):
            new_gv += gv
            if new_gd is not None:
                new_gd += gd
        gv, gd = new_gv, new_gd


def _as_inputs(*coords):
    arrays = np.broadcast_arrays(*[np.atleast_1d(np.asarray(c, dtype=np.float64)) for c in coords])
    return np.stack([a.ravel() for a in arrays], axis=1)


def forward_inputs(net, inputs):
    """Network outputs, shape (N, out), for an (N, in_dim) input array."""
    inputs = np.asarray(inputs, dtype=np.float64)
    start = _embed_value(net, inputs) if net.embedding is not None else inputs
    return _propagate(net, _Stack(start, None), 0, np.zeros(0, np.int64)).value


def jet_inputs(net, inputs, first_dims=None, second_dims=(0,)):
    """Value and derivative jets at (N, in_dim) inputs.

    Returns ``(value, first, second)`` with shapes (N, out),
    (len(first_dims), N, out) and (len(second_dims), N, out).
    ``second_dims`` indexes input dimensions and must be among ``first_dims``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    first_dims = tuple(range(inputs.shape[1])) if first_dims is None else tuple(first_dims)
    sidx = _second_index(first_dims, second_dims)
    stack = _propagate(net, _input_stack(net, inputs, first_dims, sidx), len(first_dims), sidx)
    nf = len(first_dims)
    if stack.deriv is None:
        return stack.value, np.zeros((0,) + stack.value.shape), np.zeros((0,) + stack.value.shape)
    return stack.value, stack.deriv[:nf], stack.deriv[nf:]


def _second_index(first_dims, second_dims):
    try:
        return np.array([first_dims.index(d) for d in second_dims], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError("second-derivative directions must be among the first ones") from exc


def _squeeze(arr, scalar):
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    if scalar:
        return float(arr[0]) if arr.ndim == 1 else arr[0]
    return arr


def forward(net, x, t):
    """u(x, t; theta). Scalars in, float out (for single-output networks)."""
    scalar = np.ndim(x) == 0 and np.ndim(t) == 0
    return _squeeze(forward_inputs(net, _as_inputs(x, t)), scalar)


def jet(net, x, t):
    """Jet (u, u_x, u_t, u_xx) of the network at (x, t)."""
    scalar = np.ndim(x) == 0 and np.ndim(t) == 0
    value, first, second = jet_inputs(net, _as_inputs(x, t), (0, 1), (0,))
    return Jet(u=_squeeze(value, scalar), du_dx=_squeeze(first[0], scalar),
               du_dt=_squeeze(first[1], scalar), d2u_dx2=_squeeze(second[0], scalar))


def fourier_embed(cfg, x, t, matrix=None):
    """Fourier features [sin(2 pi B v), cos(2 pi B v)] of v = (x, t).

    Returns a :class:`Jet` whose fields are (N, width) arrays, i.e. the
    embedding together with its x, t and xx derivatives.
    """
    inputs = _as_inputs(x, t)
    freq = cfg.matrix(2) if matrix is None else np.asarray(matrix, dtype=np.float64)
    p = 2.0 * np.pi * (inputs @ freq.T)
    sp, cp = np.sin(p), np.cos(p)
    ax, at = 2.0 * np.pi * freq[:, 0], 2.0 * np.pi * freq[:, 1]
    return Jet(u=np.concatenate([sp, cp], axis=1),
               du_dx=np.concatenate([cp * ax, -sp * ax], axis=1),
               du_dt=np.concatenate([cp * at, -sp * at], axis=1),
               d2u_dx2=np.concatenate([-sp * ax ** 2, -cp * ax ** 2], axis=1))


# ---------------------------------------------------------------------------
# differentiable evaluation inside losses


class Tracer:
    """Evaluates a network so that losses built from its outputs can be
    differentiated with respect to the network parameters.

    ``cache`` (a dict) stores the jets entering the first trainable layer,
    keyed by the ``key`` passed to :meth:`evaluate`; valid only while the
    frozen prefix of the network stays unchanged.
    """

    def __init__(self, net, cache=None):
        self.net = net
        self.cache = cache
        self._records = []

    def evaluate(self, inputs, first_dims=(), second_dims=(), key=None):
        """Packed jets as a Var of shape (1 + C, N, out)."""
        net = self.net
        inputs = np.asarray(inputs, dtype=np.float64)
        first_dims = tuple(first_dims)
        sidx = _second_index(first_dims, second_dims)
        nf = len(first_dims)
        start = next((i for i, f in enumerate(net.frozen) if not f), net.n_layers)
        stack = None
        if key is not None and self.cache is not None and start > 0:
            stack = self.cache.get(key)
            if stack is None:
                stack = _propagate(net, _input_stack(net, inputs, first_dims, sidx), nf, sidx,
                                   stop=start)
                self.cache[key] = stack
        else:
            start = 0
            stack = _input_stack(net, inputs, first_dims, sidx)
        tape = []
        out = _propagate(net, stack, nf, sidx, start=start, tape=tape)
        packed = out.value[None] if out.deriv is None else np.concatenate([out.value[None], out.deriv])
        node = Var(packed)
        self._records.append((node, tape, nf, sidx))
        return node

    def forward(self, inputs, key=None):
        """Outputs as a Var of shape (N, out)."""
        return self.evaluate(inputs, key=key)[0]

    def jet(self, inputs, key=None):
        """:class:`Jet` of Vars (each (N, out)) for 1-D space-time inputs (x, t)."""
        p = self.evaluate(inputs, (0, 1), (0,), key=key)
        return Jet(u=p[0], du_dx=p[1], du_dt=p[2], d2u_dx2=p[3])

    def gradient(self):
        net = self.net
        gw = [np.zeros_like(w) for w in net.weights]
        gb = [np.zeros_like(b) for b in net.biases]
        for node, tape, nf, sidx in self._records:
            if node.grad is None:
                continue
            g = np.broadcast_to(node.grad, node.shape)
            g_deriv = np.ascontiguousarray(g[1:]) if g.shape[0] > 1 else None
            _backward(net, tape, np.ascontiguousarray(g[0]), g_deriv, nf, sidx, gw, gb)
        return ParamGradient(gw, gb)


def param_gradient(net, loss_closure, cache=None, epoch=None):
    """Evaluate ``loss_closure(tracer)`` and its gradient w.r.t. the parameters.

    ``loss_closure`` receives a :class:`Tracer` and must return a scalar Var.
    Frozen layers receive exactly zero gradient.
    """
    tracer = Tracer(net, cache)
    loss = loss_closure(tracer)
    value = float(loss.value)
    if not np.isfinite(value):
        where = f" at epoch {epoch}" if epoch is not None else ""
        raise NumericError(f"non-finite loss{where}: {value}", epoch=epoch)
    loss.backward()
    return value, tracer.gradient()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net, path):
    lines = [CHECKPOINT_MAGIC, net.descriptor()]
    for arr in net.params():
        lines.extend(repr(float(v)) for v in arr.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    fields = dict(tok.split("=", 1) for tok in lines[1].split())
    try:
        widths = [int(w) for w in fields["widths"].split(",")]
        activation = fields["act"]
    except KeyError as exc:
        raise ConfigError(f"{path}: incomplete architecture line") from exc
    embed = fields.get("embed", "none")
    embedding = None if embed == "none" else FourierFeatureConfig.from_descriptor(embed)
    skip = fields.get("skip", "0") == "1"
    values = np.array([float(v) for v in lines[2:] if v.strip()])
    template = init_xavier_normal(widths, activation, 0, embedding=embedding, skip=skip)
    expected = template.n_params()
    if values.size != expected:
        raise ConfigError(f"{path}: expected {expected} parameters, found {values.size}")
    pos = 0
    for arr in template.params():
        arr[...] = values[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return template
