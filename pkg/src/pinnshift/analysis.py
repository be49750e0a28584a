"""Error metrics, WWF-vs-error parameter sweeps and the spectral error predictor."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, DegenerateInputError, NumericError
from .neural import Jet, Network, Tracer, forward_inputs, init_xavier_normal, jet_inputs
from .pdes import ResidualInput, make_problem, residual
from .refsol import SolutionGrid, fmt, sample_reference, spatial_grid, time_grid
from .spectral import spectral_grid, wwf_both, wwf_config
from .training import AdamState, SampleSet, adam_step, derive_seed, loss_terms, train

ERROR_SCALE = 10.0


# ---------------------------------------------------------------------------
# predictions and relative errors


def predict_grid(net, xs, ts, channels=None):
    """Network outputs on the tensor grid ``ts x xs`` as a :class:`SolutionGrid`."""
    xs = np.asarray(xs, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    X, T = np.meshgrid(xs, ts)
    out = forward_inputs(net, np.column_stack([X.ravel(), T.ravel()]))
    if channels is not None:
        out = out[:, list(channels)]
    return SolutionGrid(xs, ts, out.reshape(len(ts), len(xs), -1))


@dataclass
class SliceErrors:
    """Relative L2 error per time slice; slices with a zero reference are excluded."""

    ts: np.ndarray
    errors: np.ndarray
    excluded: list = field(default_factory=list)

    def mean_over(self, mask):
        vals = self.errors[mask & np.isfinite(self.errors)]
        return float(vals.mean()) if len(vals) else math.nan


def _check_same_grid(pred, ref):
    if pred.values.shape != ref.values.shape or not (np.array_equal(pred.xs, ref.xs)
                                                      and np.array_equal(pred.ts, ref.ts)):
        raise ConfigError("prediction and reference live on different grids")


def l2_relative_error(pred, ref, channel=None):
    """||pred - ref||_2 / ||ref||_2 per time slice.

    ``channel=None`` pools all output channels into one vector per slice
    (so a complex field h = u + iv gets its modulus-based error).
    """
    _check_same_grid(pred, ref)
    p, r = pred.values, ref.values
    if channel is not None:
        p, r = p[..., channel:channel + 1], r[..., channel:channel + 1]
    diff = np.sqrt(np.sum((p - r) ** 2, axis=(1, 2)))
    norm = np.sqrt(np.sum(r ** 2, axis=(1, 2)))
    zero = norm == 0
    errors = np.where(zero, np.nan, diff / np.where(zero, 1.0, norm))
    return SliceErrors(ref.ts.copy(), errors, [float(t) for t in ref.ts[zero]])


# ---------------------------------------------------------------------------
# residual statistics


def mean_abs(values):
    v = np.abs(np.asarray(values, dtype=np.float64))
    if not v.size:
        raise DegenerateInputError("mean absolute residual of an empty point set")
    return float(v.mean())


def residual_magnitude(model, problem, points):
    """|f| at (N, 2) points; systems use the Euclidean norm over equations.

    ``model`` is a Network or anything with a ``jet(inputs)`` method returning
    a Jet of (N, out) arrays.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not len(points):
        raise DegenerateInputError("mean absolute residual of an empty point set")
    if isinstance(model, Network):
        value, first, second = jet_inputs(model, points, (0, 1), (0,))
        jet = Jet(u=value, du_dx=first[0], du_dt=first[1], d2u_dx2=second[0])
    else:
        jet = model.jet(points)
    chans = [Jet(u=jet.u[:, c], du_dx=jet.du_dx[:, c], du_dt=jet.du_dt[:, c],
                 d2u_dx2=jet.d2u_dx2[:, c]) for c in range(problem.n_outputs)]
    res = residual(problem, ResidualInput(chans, points[:, 0], points[:, 1]))
    return np.sqrt(sum(np.asarray(r, dtype=np.float64) ** 2 for r in res))


def mar(model, problem, points):
    """Mean absolute residual over ``points``."""
    return mean_abs(residual_magnitude(model, problem, points))


def mar_by_slice(model, problem, xs, ts):
    X, T = np.meshgrid(xs, ts)
    mag = residual_magnitude(model, problem, np.column_stack([X.ravel(), T.ravel()]))
    return mag.reshape(len(ts), len(xs)).mean(axis=1)


# ---------------------------------------------------------------------------
# per-run report


@dataclass
class MetricsReport:
    ts: np.ndarray
    rel_l2: np.ndarray
    mar: np.ndarray
    t_train: float
    excluded: list = field(default_factory=list)
    channel_errors: dict = field(default_factory=dict)

    @property
    def extrap_mask(self):
        return self.ts > self.t_train

    def regions(self):
        return np.where(self.extrap_mask, "extrap", "interp")

    def _errors(self):
        return SliceErrors(self.ts, self.rel_l2)

    @property
    def interp_mean(self):
        return self._errors().mean_over(~self.extrap_mask)

    @property
    def extrap_mean(self):
        return self._errors().mean_over(self.extrap_mask)

    @property
    def extrap_max(self):
        vals = self.rel_l2[self.extrap_mask & np.isfinite(self.rel_l2)]
        return float(vals.max()) if len(vals) else math.nan

    def summary(self):
        out = {"interp_mean": self.interp_mean, "extrap_mean": self.extrap_mean,
               "extrap_max": self.extrap_max, "excluded_slices": self.excluded}
        for c, errs in self.channel_errors.items():
            e = SliceErrors(self.ts, errs)
            out[f"channel{c}_interp_mean"] = e.mean_over(~self.extrap_mask)
            out[f"channel{c}_extrap_mean"] = e.mean_over(self.extrap_mask)
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "rel_l2", "mar", "region"])
            for t, e, m, r in zip(self.ts, self.rel_l2, self.mar, self.regions()):
                w.writerow([fmt(t), fmt(e), fmt(m), r])

    def channels_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "channel", "rel_l2", "region"])
            for c, errs in sorted(self.channel_errors.items()):
                for t, e, r in zip(self.ts, errs, self.regions()):
                    w.writerow([fmt(t), c, fmt(e), r])


def evaluate(net, problem, xs=None, ts=None, reference=None, channels=None):
    """Relative L2 error and MAR of ``net`` against the reference on a grid.

    Defaults to the 256 x 100 evaluation grid. ``channels`` selects the
    network outputs that represent ``problem`` (all of them by default).
    """
    xs = spatial_grid(problem) if xs is None else np.asarray(xs, dtype=np.float64)
    ts = time_grid(problem) if ts is None else np.asarray(ts, dtype=np.float64)
    ref = sample_reference(problem, xs, ts) if reference is None else reference
    pred = predict_grid(net, xs, ts, channels)
    errs = l2_relative_error(pred, ref)
    per_channel = {}
    if ref.n_outputs > 1:
        per_channel = {c: l2_relative_error(pred, ref, c).errors for c in range(ref.n_outputs)}
    model = net if channels is None else _ChannelView(net, channels)
    return MetricsReport(ts, errs.errors, mar_by_slice(model, problem, xs, ts),
                         problem.domain.t_train, errs.excluded, per_channel)


class _ChannelView:
    def __init__(self, net, channels):
        self.net, self.channels = net, list(channels)

    def jet(self, inputs):
        value, first, second = jet_inputs(self.net, inputs, (0, 1), (0,))
        c = self.channels
        return Jet(u=value[:, c], du_dx=first[0][:, c], du_dt=first[1][:, c], d2u_dx2=second[0][:, c])


# ---------------------------------------------------------------------------
# loss decomposition over the extrapolation region


def extrapolation_samples(problem, counts, seed):
    """Uniform domain and boundary points with t in (t_train, t_max]; no initial points."""
    n_f, n_b = int(counts[0]), int(counts[1])
    dom = problem.domain
    g_dom, g_bc = [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(2)]
    lo, hi = dom.t_train, dom.t_max
    domain = np.column_stack([g_dom.uniform(dom.x_min, dom.x_max, n_f), g_dom.uniform(lo, hi, n_f)])
    sides = np.arange(n_b) % 2
    boundary = np.column_stack([np.where(sides == 0, dom.x_min, dom.x_max), g_bc.uniform(lo, hi, n_b)])
    return SampleSet(domain, boundary, sides, np.zeros(0))


class Plain:
    """Array-valued stand-in for a Tracer, used when no gradient is needed."""

    def __init__(self, net):
        self.net = net

    def jet(self, inputs, key=None):
        value, first, second = jet_inputs(self.net, inputs, (0, 1), (0,))
        return Jet(u=value, du_dx=first[0], du_dt=first[1], d2u_dx2=second[0])

    def forward(self, inputs, key=None):
        return forward_inputs(self.net, inputs)


def extrapolation_losses(model, problem, counts=(4000, 400), seed=0):
    """Domain (residual), boundary and combined MSE on the extrapolation region."""
    samples = extrapolation_samples(problem, counts, seed)
    lu, lf = loss_terms(Plain(model) if isinstance(model, Network) else model, [problem], samples)
    lu, lf = float(lu), float(lf)
    return {"domain": lf, "boundary": lu, "combined": lu + lf}


# ---------------------------------------------------------------------------
# sweeps


def spearman(a, b):
    """Spearman rank correlation; NaN when undefined (fewer than 2 points or a constant input)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ConfigError("correlation inputs differ in length")
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    return float(spearmanr(a, b).statistic)


@dataclass
class SweepRecord:
    params: list
    wwf_raw: list
    wwf_norm: list
    errors: list
    failed: list = field(default_factory=list)
    param_name: str = ""

    def __post_init__(self):
        n = len(self.params)
        if not len(self.wwf_raw) == len(self.wwf_norm) == len(self.errors) == n:
            raise ConfigError("sweep columns differ in length")
        if np.any(np.diff(self.params) <= 0):
            raise ConfigError("sweep parameters must be strictly increasing")

    @property
    def correlation(self):
        return spearman(self.wwf_norm, self.errors)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "wwf_raw", "wwf_norm", "ext_err"])
            for row in zip(self.params, self.wwf_raw, self.wwf_norm, self.errors):
                w.writerow([fmt(v) for v in row])


def reference_wwf(problem):
    """(raw, normalized) WWF of the reference solution on its spectral grid, channel 0."""
    xs, closed = spectral_grid(problem)
    ts = time_grid(problem)
    grid = sample_reference(problem, xs, ts)
    return wwf_both(grid, wwf_config(problem, ts), 0, includes_endpoint=closed)


def _sweep_member(job):
    kind, name, value, base, arch, config, domain = job
    problem = make_problem(kind, {**base, name: value}, domain)
    raw, norm = reference_wwf(problem)
    try:
        record = train(problem, arch, config)
        err = evaluate(record.network, problem).extrap_mean
    except NumericError as exc:
        return value, raw, norm, math.nan, str(exc)
    if not np.isfinite(err):
        return value, raw, norm, math.nan, "non-finite extrapolation error"
    return value, raw, norm, err, None


def sweep(kind, param, values, arch, config, base_params=None, jobs=1, domain=None):
    """Train one PINN per parameter value and relate reference WWF to extrapolation error.

    Members that diverge are dropped from the record and listed in ``failed``.
    Results do not depend on ``jobs``: each member is a pure function of its inputs.
    """
    values = [float(v) for v in values]
    if np.any(np.diff(values) <= 0):
        raise ConfigError("sweep values must be strictly increasing")
    work = [(kind, param, v, dict(base_params or {}), arch, config, domain) for v in values]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_member, work))
    else:
        results = [_sweep_member(w) for w in work]
    ok = [r for r in results if r[4] is None]
    failed = [{"param": r[0], "reason": r[4]} for r in results if r[4] is not None]
    cols = list(zip(*[r[:4] for r in ok])) or [(), (), (), ()]
    return SweepRecord(list(cols[0]), list(cols[1]), list(cols[2]), list(cols[3]), failed, param)


# ---------------------------------------------------------------------------
# spectral error predictor


def spectral_features(problem, feature_ts=None, xs=None):
    """Concatenated L1-normalized reference spectra at ``feature_ts`` (0, 0.05, ..., t_max)."""
    dom = problem.domain
    if feature_ts is None:
        feature_ts = np.linspace(0.0, dom.t_max, 21)
    xs = spatial_grid(problem) if xs is None else xs
    grid = sample_reference(problem, xs, feature_ts)
    mags = np.abs(np.fft.rfft(grid.channel(0), axis=-1))
    return (mags / mags.sum(axis=1, keepdims=True)).ravel()


def error_targets(net, problem, target_ts=None, xs=None):
    """Scaled relative L2 errors (x10) at ``target_ts`` (0, 0.1, ..., t_max)."""
    if target_ts is None:
        target_ts = np.linspace(0.0, problem.domain.t_max, 11)
    xs = spatial_grid(problem) if xs is None else xs
    ref = sample_reference(problem, xs, target_ts)
    errs = l2_relative_error(predict_grid(net, xs, target_ts), ref).errors
    return ERROR_SCALE * errs


def stratified_split(n, n_regions=5, seed=0):
    """Test indices: one random member from each of ``n_regions`` contiguous blocks."""
    if n < 2 * n_regions:
        raise ConfigError(f"need at least {2 * n_regions} samples for a {n_regions}-region split, got {n}")
    rng = np.random.default_rng(seed)
    blocks = np.array_split(np.arange(n), n_regions)
    return np.array(sorted(int(rng.choice(b)) for b in blocks))


def r2_score(y, yhat):
    """Coefficient of determination pooled over all entries; NaN if the targets are constant."""
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        return math.nan
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


@dataclass
class Predictor:
    network: Network
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, features):
        z = (np.atleast_2d(features) - self.mean) / self.scale
        return forward_inputs(self.network, z)


@dataclass
class PredictorFit:
    predictor: Predictor
    r2_train: float
    r2_test: float
    test_index: np.ndarray
    history: list


def error_predictor_fit(features, targets, test_index, hidden=(64, 64, 64, 64), epochs=20000,
                        lr=1e-3, seed=0, log_every=1000):
    """MLP regression from spectra to scaled errors with an MSE loss and Adam.

    Features are standardized with training-set statistics. Returns train and
    test R^2 (NaN when the targets are constant).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ConfigError("features and targets must be 2-D with one row per PDE")
    if len(x) < 10:
        raise ConfigError(f"need at least 10 PDEs to fit the predictor, got {len(x)}")
    test = np.asarray(test_index, dtype=np.int64)
    train_mask = np.ones(len(x), bool)
    train_mask[test] = False
    if not train_mask.any() or not len(test):
        raise ConfigError("split leaves an empty train or test set")
    mean = x[train_mask].mean(axis=0)
    scale = x[train_mask].std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    net = init_xavier_normal([x.shape[1], *hidden, y.shape[1]], "tanh", derive_seed(seed, 0))
    adam = AdamState.zeros(net)
    zt, yt = z[train_mask], y[train_mask]
    history = []
    for epoch in range(epochs):
        tracer = Tracer(net)
        diff = tracer.forward(zt) - yt
        loss = (diff * diff).sum() * (1.0 / yt.size)
        if not np.isfinite(loss.value):
            raise NumericError(f"predictor loss became non-finite at epoch {epoch}", epoch=epoch)
        if epoch % log_every == 0:
            history.append((epoch, float(loss.value)))
        loss.backward()
        adam_step(adam, net, tracer.gradient(), lr)
    pred = Predictor(net, mean, scale)
    return PredictorFit(pred, r2_score(yt, pred.predict(x[train_mask])),
                        r2_score(y[test], pred.predict(x[test])), test, history)

