"""Collocation sampling, PINN losses, Adam, DPM reweighting and transfer learning."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Var
from .errors import ConfigError, NumericError, UnsupportedError
from .neural import (FourierFeatureConfig, Jet, Network, Tracer, init_xavier_normal,
                     save_checkpoint, tune_allocator)
from .pdes import (PeriodicConstraint, ResidualInput, boundary_condition, initial_condition,
                   residual)
from .refsol import exact_jets, fmt

SIDES = ("left", "right")


def derive_seed(seed, stream):
    """Independent integer seed for a named random stream of one run."""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


STREAM_INIT, STREAM_SAMPLES, STREAM_HEAD = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DpmConfig:
    epsilon: float = 0.001
    delta: float = 0.08
    w: float = 1.001

    def __post_init__(self):
        if not self.epsilon > 0 or not self.delta > 0:
            raise ConfigError("DPM epsilon and delta must be positive")
        # w = 1 is allowed: it switches the reweighting off and is used to
        # check that DPM then coincides with plain Adam
        if not self.w >= 1:
            raise ConfigError(f"DPM weight factor w must be >= 1, got {self.w}")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-4
    epochs: int = 50000
    seed: int = 0
    samples: tuple = (10000, 40, 80)
    optimizer: str = "adam"
    dpm: DpmConfig | None = None
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be non-negative")
        if not self.lr > 0 or not np.isfinite(self.lr):
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if len(self.samples) != 3 or any(int(n) < 0 for n in self.samples) or int(self.samples[0]) < 1:
            raise ConfigError(f"samples must be (domain>=1, boundary>=0, initial>=0), got {self.samples}")
        if self.log_every < 1:
            raise ConfigError("log_every must be at least 1")
        object.__setattr__(self, "samples", tuple(int(n) for n in self.samples))

    def replace(self, **changes):
        return TrainConfig(**{**asdict_shallow(self), **changes})


def asdict_shallow(obj):
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


@dataclass(frozen=True)
class Architecture:
    """Hidden widths and activation; input/output widths come from the problem."""

    hidden: tuple = (50, 50, 50, 50)
    activation: str = "tanh"
    embedding: FourierFeatureConfig | None = None
    skip: bool = False

    def widths(self, in_dim, out_dim):
        return [in_dim, *self.hidden, out_dim]

    def build(self, in_dim, out_dim, seed):
        return init_xavier_normal(self.widths(in_dim, out_dim), self.activation, seed,
                                  embedding=self.embedding, skip=self.skip)


@dataclass
class LossReport:
    L: float
    L_u: float
    L_f: float
    epoch: int = 0


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleSet:
    """Collocation points: domain (N_f, 2) as (x, t); boundary (N_b, 2) with a
    side index per row (0 left, 1 right); initial x positions (N_i,)."""

    domain: np.ndarray
    boundary: np.ndarray
    sides: np.ndarray
    initial: np.ndarray

    @property
    def counts(self):
        return len(self.domain), len(self.boundary), len(self.initial)


def sample(problem, config, rng_seed, t_hi=None):
    """Uniform i.i.d. collocation points over [x_min, x_max] x [0, t_hi].

    ``config`` is a :class:`TrainConfig` or a (domain, boundary, initial)
    count triple; ``t_hi`` defaults to the problem's training horizon.
    """
    if problem.domain.spatial_dim != 1:
        raise UnsupportedError(f"sampling for {problem.kind} (3-D) is not implemented")
    counts = config.samples if isinstance(config, TrainConfig) else tuple(int(c) for c in config)
    n_f, n_b, n_i = counts
    dom = problem.domain
    t_hi = dom.t_train if t_hi is None else float(t_hi)
    if not 0 < t_hi <= dom.t_max:
        raise ConfigError(f"sampling horizon {t_hi} outside (0, {dom.t_max}]")
    g_dom, g_bc, g_ic = [np.random.default_rng(s) for s in
                         np.random.SeedSequence(int(rng_seed)).spawn(3)]
    domain = np.column_stack([g_dom.uniform(dom.x_min, dom.x_max, n_f),
                              g_dom.uniform(0.0, t_hi, n_f)])
    sides = np.arange(n_b) % 2
    xb = np.where(sides == 0, dom.x_min, dom.x_max)
    boundary = np.column_stack([xb, g_bc.uniform(0.0, t_hi, n_b)])
    initial = g_ic.uniform(dom.x_min, dom.x_max, n_i)
    return SampleSet(domain, boundary, sides, initial)


# ---------------------------------------------------------------------------
# losses


class ExactModel:
    """Stands in for a network by returning analytic jets of the exact solution."""

    def __init__(self, problem):
        self.problem = problem

    def jet(self, inputs, key=None):
        x, t = inputs[:, 0], inputs[:, 1]
        jets = exact_jets(self.problem, x, t)
        stack = lambda name: np.stack([getattr(j, name) for j in jets], axis=1)
        return Jet(u=stack("u"), du_dx=stack("du_dx"), du_dt=stack("du_dt"), d2u_dx2=stack("d2u_dx2"))

    def forward(self, inputs, key=None):
        return self.jet(inputs).u


def _channel_jet(j, c):
    return Jet(u=j.u[:, c], du_dx=j.du_dx[:, c], du_dt=j.du_dt[:, c], d2u_dx2=j.d2u_dx2[:, c])


def _sum_sq(v):
    return (v * v).sum()


def loss_terms(model, problems, samples):
    """Mean-squared data loss L_u and residual loss L_f, summed over members.

    Member ``m`` of ``problems`` reads output channels
    ``m*n_out:(m+1)*n_out`` of ``model`` (a Tracer or :class:`ExactModel`).
    """
    n_out = problems[0].n_outputs
    periodic = problems[0].kind == "schrodinger"
    x, t = samples.domain[:, 0], samples.domain[:, 1]
    jd = model.jet(samples.domain, key="domain")
    tb = samples.boundary[:, 1]
    if periodic:
        dom = problems[0].domain
        jl = model.jet(np.column_stack([np.full_like(tb, dom.x_min), tb]), key="left")
        jr = model.jet(np.column_stack([np.full_like(tb, dom.x_max), tb]), key="right")
    elif len(tb):
        fb = model.forward(samples.boundary, key="boundary")
    xi = samples.initial
    if len(xi):
        fi = model.forward(np.column_stack([xi, np.zeros_like(xi)]), key="initial")
    total_u, total_f = 0.0, 0.0
    for m, prob in enumerate(problems):
        chans = range(m * n_out, (m + 1) * n_out)
        res = residual(prob, ResidualInput([_channel_jet(jd, c) for c in chans], x, t))
        sq_f = sum(_sum_sq(r) for r in res)
        total_f = total_f + sq_f / (len(x) * len(res))
        sq_u, count = 0.0, 0
        if len(xi):
            target = initial_condition(prob, xi)
            for k, c in enumerate(chans):
                sq_u = sq_u + _sum_sq(fi[:, c] - target[:, k])
            count += len(xi) * n_out
        if len(tb):
            if periodic:
                for c in chans:
                    sq_u = sq_u + _sum_sq(jl.u[:, c] - jr.u[:, c]) + _sum_sq(jl.du_dx[:, c] - jr.du_dx[:, c])
                count += 2 * len(tb) * n_out
            else:
                target = _dirichlet_targets(prob, samples)
                for k, c in enumerate(chans):
                    sq_u = sq_u + _sum_sq(fb[:, c] - target[:, k])
                count += len(tb) * n_out
        total_u = total_u + (sq_u / count if count else 0.0)
    return total_u, total_f


def _dirichlet_targets(problem, samples):
    tb = samples.boundary[:, 1]
    out = np.empty((len(tb), problem.n_outputs))
    for s, side in enumerate(SIDES):
        mask = samples.sides == s
        vals = boundary_condition(problem, tb[mask], side)
        if isinstance(vals, PeriodicConstraint):
            raise ConfigError("periodic boundaries have no Dirichlet targets")
        out[mask] = vals
    return out


def _value(v):
    return float(v.value) if isinstance(v, Var) else float(v)


def pinn_loss(model, problem, samples, alpha=1.0, beta=1.0):
    """Loss decomposition of ``model`` (Network or ExactModel) on ``samples``."""
    problems = problem if isinstance(problem, (list, tuple)) else [problem]
    evaluator = Tracer(model) if isinstance(model, Network) else model
    lu, lf = loss_terms(evaluator, problems, samples)
    lu, lf = _value(lu), _value(lf)
    total = alpha * lu + beta * lf
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss {total}")
    return LossReport(total, lu, lf)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, net):
        return cls([np.zeros_like(p) for p in net.params()], [np.zeros_like(p) for p in net.params()])


def adam_step(state, net, gradient, lr):
    """One bias-corrected Adam update in place; frozen layers are left untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    params = net.params()
    grads = [a for pair in zip(gradient.weights, gradient.biases) for a in pair]
    for i, (p, g) in enumerate(zip(params, grads)):
        if net.frozen[i // 2]:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


@dataclass
class DpmState:
    """Running minimum of L_f and the current compounding weight on its gradient."""

    cfg: DpmConfig
    best: float = np.inf
    weight: float = 1.0
    streak: int = 0

    def update(self, l_f):
        """Weight on grad L_f for the epoch whose domain loss is ``l_f``."""
        if np.isfinite(self.best) and l_f > self.best + self.cfg.delta * abs(self.best) + self.cfg.epsilon:
            self.weight *= self.cfg.w
            self.streak += 1
        else:
            self.weight, self.streak = 1.0, 0
        self.best = min(self.best, l_f)
        return self.weight


def dpm_step(state, net, loss_parts, gradients, cfg, lr, alpha=1.0, beta=1.0):
    """Adam step on alpha*grad L_u + beta*omega*grad L_f with omega from the DPM rule.

    ``state`` is a pair (AdamState, DpmState); ``loss_parts`` is (L_u, L_f);
    ``gradients`` is the pair of parameter gradients of L_u and L_f.
    """
    adam, dpm = state
    if dpm.cfg != cfg:
        raise ConfigError("DPM state was created with a different configuration")
    omega = dpm.update(float(loss_parts[1]))
    g_u, g_f = gradients
    scale = beta * omega
    combined = type(g_u)([alpha * a + scale * b for a, b in zip(g_u.weights, g_f.weights)],
                         [alpha * a + scale * b for a, b in zip(g_u.biases, g_f.biases)])
    adam_step(adam, net, combined, lr)
    return net, (adam, dpm)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunRecord:
    network: Network
    history: list
    config: TrainConfig
    problem: str
    seed: int
    status: str = "ok"
    epochs_completed: int = 0
    wall_seconds: float = 0.0
    checkpoints: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.history[-1] if self.history else None

    def metadata(self):
        cfg = asdict(self.config)
        cfg["samples"] = list(self.config.samples)
        return {"problem": self.problem, "seed": self.seed, "status": self.status,
                "epochs_completed": self.epochs_completed, "config": cfg,
                "architecture": self.network.descriptor(),
                "wall_seconds": self.wall_seconds, "checkpoints": self.checkpoints,
                **self.extra}


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L", "L_u", "L_f"])
        for r in history:
            w.writerow([r.epoch, fmt(r.L), fmt(r.L_u), fmt(r.L_f)])


def write_run(record, out_dir):
    """run.json, history.csv and the final checkpoint into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(record.network, out / "checkpoint.txt")
    write_history(record.history, out / "history.csv")
    (out / "run.json").write_text(json.dumps(record.metadata(), indent=2, sort_keys=True) + "\n")
    return out


def _finite_params(net):
    return all(np.all(np.isfinite(p)) for p in net.params())


def fit(net, problems, samples, config, cache=None, checkpoint_dir=None, label=None):
    """Full-batch Adam (optionally DPM-reweighted) on the summed member losses.

    Records a :class:`LossReport` every ``config.log_every`` epochs (the loss
    before that epoch's update) and once more after the last update. On a
    non-finite loss, gradient or parameter the network is restored to the last
    finite parameters and :class:`NumericError` is raised carrying the record.
    """
    tune_allocator()
    problems = list(problems)
    alpha, beta = config.alpha, config.beta
    adam = AdamState.zeros(net)
    dpm = DpmState(config.dpm) if config.dpm is not None else None
    record = RunRecord(net, [], config, label or problems[0].describe(), config.seed)
    good = [p.copy() for p in net.params()]
    start = time.perf_counter()

    def diverged(epoch, what):
        for p, g in zip(net.params(), good):
            p[...] = g
        record.status = "diverged"
        record.epochs_completed = epoch
        record.wall_seconds = time.perf_counter() - start
        raise NumericError(f"{what} at epoch {epoch}; parameters restored to epoch {epoch}",
                           epoch=epoch, record=record)

    for epoch in range(config.epochs + 1):
        tracer = Tracer(net, cache)
        lu, lf = loss_terms(tracer, problems, samples)
        lu_v, lf_v = _value(lu), _value(lf)
        report = LossReport(alpha * lu_v + beta * lf_v, lu_v, lf_v, epoch)
        if not np.isfinite(report.L):
            diverged(epoch, f"non-finite loss {report.L}")
        if epoch == config.epochs:
            record.history.append(report)
            break
        if epoch % config.log_every == 0:
            record.history.append(report)
        omega = dpm.update(lf_v) if dpm is not None else 1.0
        total = alpha * lu + (beta * omega) * lf
        if not isinstance(total, Var):
            raise ConfigError("loss does not depend on the network parameters")
        total.backward()
        grad = tracer.gradient()
        if not grad.all_finite():
            diverged(epoch, "non-finite gradient")
        adam_step(adam, net, grad, config.lr)
        if not _finite_params(net):
            diverged(epoch, "non-finite parameters")
        for p, g in zip(net.params(), good):
            g[...] = p
        done = epoch + 1
        if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"checkpoint_{done:07d}.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, path)
            record.checkpoints.append(path.name)
    record.epochs_completed = config.epochs
    record.wall_seconds = time.perf_counter() - start
    return record


def _check_trainable(problem):
    if problem.domain.spatial_dim != 1:
        raise UnsupportedError(f"training on {problem.kind} is not implemented (1-D problems only)")


def train(problem, arch, config, checkpoint_dir=None, t_hi=None):
    """Initialize a network from ``config.seed`` and train it on ``problem``."""
    _check_trainable(problem)
    net = arch.build(2, problem.n_outputs, derive_seed(config.seed, STREAM_INIT))
    samples = sample(problem, config, derive_seed(config.seed, STREAM_SAMPLES), t_hi)
    return fit(net, [problem], samples, config, checkpoint_dir=checkpoint_dir)


# ---------------------------------------------------------------------------
# transfer learning


def _check_family(problems):
    if not problems:
        raise ConfigError("transfer family is empty")
    first = problems[0]
    for p in problems[1:]:
        if p.kind != first.kind or p.domain != first.domain or p.n_outputs != first.n_outputs:
            raise ConfigError("family members must share PDE kind, domain and output count")


def transfer_pretrain(problems, arch, config, t_hi=None, return_record=False):
    """Multi-output network trained on every family member at once.

    Member ``m`` owns output channels ``m*n_out:(m+1)*n_out``; the joint loss
    is the sum of the members' losses. ``t_hi`` sets the time horizon of the
    collocation points (the training horizon by default).
    """
    problems = list(problems)
    _check_family(problems)
    _check_trainable(problems[0])
    n_out = problems[0].n_outputs * len(problems)
    net = arch.build(2, n_out, derive_seed(config.seed, STREAM_INIT))
    samples = sample(problems[0], config, derive_seed(config.seed, STREAM_SAMPLES), t_hi)
    label = "family[" + "; ".join(p.describe() for p in problems) + "]"
    record = fit(net, problems, samples, config, label=label)
    return record if return_record else record.network


def attach_head(pretrained, n_outputs, seed):
    """Copy of ``pretrained`` with a fresh Xavier-normal output layer, all else frozen."""
    net = pretrained.copy()
    fan_in = net.widths[-2]
    rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / (fan_in + n_outputs))
    net.weights[-1] = rng.normal(0.0, std, size=(fan_in, n_outputs))
    net.biases[-1] = np.zeros(n_outputs)
    net.widths[-1] = n_outputs
    return net.freeze_all_but_last()


def transfer_finetune(pretrained, target, config, checkpoint_dir=None):
    """Train only a new output layer on ``target``; hidden layers stay bit-identical.

    Jets entering the trainable layer are computed once and cached, since
    the frozen layers never change.
    """
    if not isinstance(pretrained, Network):
        raise ConfigError("pretrained model must be a Network")
    _check_trainable(target)
    if pretrained.n_layers < 2:
        raise ConfigError("need at least one hidden layer to transfer")
    net = attach_head(pretrained, target.n_outputs, derive_seed(config.seed, STREAM_HEAD))
    samples = sample(target, config, derive_seed(config.seed, STREAM_SAMPLES))
    return fit(net, [target], samples, config, cache={}, checkpoint_dir=checkpoint_dir)
