"""End-to-end pipelines behind the command line: single runs, transfer and DPM
comparisons, sweeps and the error predictor. Every output is a pure function
of the configuration, so results never depend on the number of workers."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (error_predictor_fit, error_targets, evaluate, extrapolation_losses,
                       predict_grid, spectral_features, stratified_split, sweep)
from .errors import ConfigError, NumericError
from .neural import load_checkpoint
from .refsol import fmt, sample_reference, spatial_grid, time_grid
from .spectral import (difference_matrix, pairwise_matrix, spectral_grid, wwf_both, wwf_config,
                       write_spectra)
from .training import DpmConfig, train, transfer_finetune, transfer_pretrain, write_run

log = logging.getLogger("pinnshift")


def parallel_map(fn, jobs, n_workers=1):
    jobs = list(jobs)
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _finite_or_none(v):
    return None if v is None or not math.isfinite(v) else float(v)


# ---------------------------------------------------------------------------
# single runs


def evaluation_grid(cfg, problem):
    return spatial_grid(problem, cfg.spectral.n_x), time_grid(problem, cfg.spectral.n_t)


def write_metrics(net, problem, cfg, out):
    xs, ts = evaluation_grid(cfg, problem)
    report = evaluate(net, problem, xs, ts)
    report.to_csv(out / "metrics.csv")
    if report.channel_errors:
        report.channels_to_csv(out / "metrics_channels.csv")
    return report


def run_train(cfg, out):
    """Train on the configured problem and write checkpoint, history, metrics and summary."""
    problem = cfg.problem()
    log.info("training %s for %d epochs", problem.describe(), cfg.training.epochs)
    try:
        record = train(problem, cfg.architecture, cfg.training, checkpoint_dir=out)
    except NumericError as exc:
        if exc.record is not None:
            write_run(exc.record, out)
        raise
    write_run(record, out)
    report = write_metrics(record.network, problem, cfg, out)
    write_json(out / "summary.json", {**report.summary(), "final_loss": record.final.L,
                                      "final_L_u": record.final.L_u, "final_L_f": record.final.L_f})
    return record, report


def load_network(run_dir):
    path = Path(run_dir) / "checkpoint.txt"
    if not path.exists():
        raise ConfigError(f"no checkpoint found at {path}")
    return load_checkpoint(path)


def run_eval(cfg, run_dir, out):
    problem = cfg.problem()
    report = write_metrics(load_network(run_dir), problem, cfg, out)
    write_json(out / "summary.json", report.summary())
    return report


def _grids(cfg, problem, run_dir):
    """Reference (and, with ``run_dir``, predicted) grids on the spectral grid."""
    xs, closed = spectral_grid(problem)
    if cfg.spectral.n_x != 256 and not closed:
        xs = spatial_grid(problem, cfg.spectral.n_x)
    ts = time_grid(problem, cfg.spectral.n_t)
    ref = sample_reference(problem, xs, ts)
    pred = None
    if run_dir is not None:
        pred = predict_grid(load_network(run_dir), xs, ts)
        if pred.n_outputs != ref.n_outputs:
            raise ConfigError(f"checkpoint has {pred.n_outputs} outputs, problem needs {ref.n_outputs}")
    return ref, pred, closed


def run_spectra(cfg, out, run_dir=None):
    problem = cfg.problem()
    ref, pred, closed = _grids(cfg, problem, run_dir)
    written = []
    for c in range(ref.n_outputs):
        suffix = "" if ref.n_outputs == 1 else f"_ch{c}"
        write_spectra(ref, out / f"spectra_reference{suffix}.csv", c, closed)
        written.append(f"spectra_reference{suffix}.csv")
        if pred is not None:
            write_spectra(pred, out / f"spectra_prediction{suffix}.csv", c, closed)
            written.append(f"spectra_prediction{suffix}.csv")
    return written


def run_pairwise(cfg, out, run_dir=None):
    problem = cfg.problem()
    ref, pred, closed = _grids(cfg, problem, run_dir)
    result = {}
    for c in range(ref.n_outputs):
        suffix = "" if ref.n_outputs == 1 else f"_ch{c}"
        a = pairwise_matrix(ref, channel=c, includes_endpoint=closed)
        a.to_csv(out / f"pairwise_reference{suffix}.csv")
        result[f"reference{suffix}"] = a
        if pred is not None:
            b = pairwise_matrix(pred, channel=c, includes_endpoint=closed)
            b.to_csv(out / f"pairwise_prediction{suffix}.csv")
            difference_matrix(a, b).to_csv(out / f"pairwise_difference{suffix}.csv",
                                           clip=cfg.spectral.clip)
            result[f"prediction{suffix}"] = b
    return result


def run_wwf(cfg, out, run_dir=None):
    problem = cfg.problem()
    ref, pred, closed = _grids(cfg, problem, run_dir)
    wcfg = wwf_config(problem, ref.ts, cfg.spectral.normalize)
    doc = {"normalize": cfg.spectral.normalize, "interp_slices": len(wcfg.interp_grid),
           "extrap_slices": len(wcfg.extrap_grid), "t_max": wcfg.t_max}
    for name, grid in (("reference", ref), ("prediction", pred)):
        if grid is None:
            continue
        for c in range(grid.n_outputs):
            raw, norm = wwf_both(grid, wcfg, c, closed)
            key = name if grid.n_outputs == 1 else f"{name}_ch{c}"
            doc[key] = {"raw": raw, "normalized": norm,
                        "headline": norm if cfg.spectral.normalize else raw}
    write_json(out / "wwf.json", doc)
    return doc


def run_refsol(cfg, out):
    problem = cfg.problem()
    xs, ts = evaluation_grid(cfg, problem)
    grid = sample_reference(problem, xs, ts)
    grid.to_csv(out / "reference.csv")
    return grid


# ---------------------------------------------------------------------------
# sweeps


def run_sweep(cfg, out, jobs=1):
    s = cfg.sweep
    if s is None:
        raise ConfigError("config has no [sweep] section")
    base = {**cfg.params, **s.base}
    base.pop(s.param, None)
    record = sweep(cfg.kind, s.param, s.values, cfg.architecture, cfg.training, base, jobs,
                   cfg.domain)
    record.to_csv(out / "sweep.csv")
    write_json(out / "sweep.json", {"param": s.param, "spearman": _finite_or_none(record.correlation),
                                    "n_ok": len(record.params), "failed": record.failed})
    return record


# ---------------------------------------------------------------------------
# transfer learning


def _transfer_job(job):
    cfg, arm, seed = job
    target = cfg.problem(**cfg.transfer.target)
    tcfg = cfg.training.replace(seed=seed)
    if arm == "baseline":
        net = train(target, cfg.architecture, tcfg).network
    else:
        family = [cfg.problem(**m) for m in cfg.transfer.family]
        dom = target.domain
        t_hi = dom.t_train if arm == "half" else dom.t_max
        pre_cfg = tcfg if cfg.transfer.pretrain_epochs is None else tcfg.replace(
            epochs=cfg.transfer.pretrain_epochs)
        pre = transfer_pretrain(family, cfg.architecture, pre_cfg, t_hi=t_hi)
        net = transfer_finetune(pre, target, tcfg).network
    report = evaluate(net, target, *evaluation_grid(cfg, target))
    losses = extrapolation_losses(net, target, seed=seed)
    return {"arm": arm, "seed": seed, "ext_err": report.extrap_mean,
            "interp_err": report.interp_mean, **losses}


def summarize(rows, key="ext_err", group="arm"):
    """Per-group mean, std (population), median and count of ``key``."""
    out = {}
    for name in dict.fromkeys(r[group] for r in rows):
        vals = np.array([r[key] for r in rows if r[group] == name and math.isfinite(r[key])])
        out[name] = {"mean": float(vals.mean()) if len(vals) else math.nan,
                     "std": float(vals.std()) if len(vals) else math.nan,
                     "median": float(np.median(vals)) if len(vals) else math.nan,
                     "n": int(len(vals))}
    return out


def run_transfer(cfg, out=None, jobs=1):
    if cfg.transfer is None:
        raise ConfigError("config has no [transfer] section")
    work = [(cfg, arm, seed) for arm in cfg.transfer.arms for seed in cfg.transfer.seeds]
    rows = parallel_map(_transfer_job, work, jobs)
    summary = summarize(rows)
    if out is not None:
        cols = ["arm", "seed", "ext_err", "interp_err", "domain", "boundary", "combined"]
        write_rows(out / "transfer_runs.csv", cols, [[r[c] for c in cols] for r in rows])
        write_rows(out / "transfer_summary.csv", ["setting", "mean", "std", "median", "n"],
                   [[k, v["mean"], v["std"], v["median"], v["n"]] for k, v in summary.items()])
    return rows, summary


# ---------------------------------------------------------------------------
# DPM comparison


def _dpm_job(job):
    cfg, arm, seed = job
    problem = cfg.problem()
    tcfg = cfg.training.replace(seed=seed)
    if arm == "dpm":
        base = cfg.training.dpm or DpmConfig()
        tcfg = tcfg.replace(dpm=DpmConfig(base.epsilon, base.delta, cfg.dpm.w))
    else:
        tcfg = tcfg.replace(dpm=None)
    record = train(problem, cfg.architecture, tcfg)
    report = evaluate(record.network, problem, *evaluation_grid(cfg, problem))
    losses = extrapolation_losses(record.network, problem, seed=seed)
    hist = [(r.epoch, r.L, r.L_u, r.L_f) for r in record.history]
    return {"arm": arm, "seed": seed, "ext_err": report.extrap_mean, **losses, "history": hist}


def run_dpm(cfg, out=None, jobs=1):
    if cfg.dpm is None:
        raise ConfigError("config has no [dpm] section")
    work = [(cfg, arm, seed) for arm in ("vanilla", "dpm") for seed in cfg.dpm.seeds]
    rows = parallel_map(_dpm_job, work, jobs)
    if out is not None:
        cols = ["arm", "seed", "domain", "boundary", "combined", "ext_err"]
        write_rows(out / "dpm_runs.csv", cols, [[r[c] for c in cols] for r in rows])
        write_rows(out / "dpm_history.csv", ["arm", "seed", "epoch", "L", "L_u", "L_f"],
                   [[r["arm"], r["seed"], e, L, lu, lf] for r in rows for e, L, lu, lf in r["history"]])
        base = cfg.training.dpm or DpmConfig()
        write_json(out / "dpm.json", {"epsilon": base.epsilon, "delta": base.delta, "w": cfg.dpm.w,
                                      "summary": summarize(rows, "combined")})
    return rows


# ---------------------------------------------------------------------------
# error predictor


def _predict_job(job):
    cfg, value = job
    problem = cfg.problem(**{cfg.predict.param: value})
    net = train(problem, cfg.architecture, cfg.training).network
    return spectral_features(problem), error_targets(net, problem)


def run_predict(cfg, out=None, jobs=1):
    p = cfg.predict
    if p is None:
        raise ConfigError("config has no [predict] section")
    results = parallel_map(_predict_job, [(cfg, v) for v in p.values], jobs)
    x = np.array([r[0] for r in results])
    y = np.array([r[1] for r in results])
    test = stratified_split(len(p.values), p.test_regions, p.split_seed)
    fit = error_predictor_fit(x, y, test, p.hidden, p.epochs, p.lr, cfg.training.seed)
    if out is not None:
        pred = fit.predictor.predict(x)
        rows = []
        for i, v in enumerate(p.values):
            split = "test" if i in set(test.tolist()) else "train"
            for k in range(y.shape[1]):
                rows.append([float(v), split, k, float(y[i, k]), float(pred[i, k])])
        write_rows(out / "predictions.csv", ["param", "split", "target_index", "scaled_error",
                                             "predicted"], rows)
        write_json(out / "predictor.json", {"r2_train": _finite_or_none(fit.r2_train),
                                            "r2_test": _finite_or_none(fit.r2_test),
                                            "test_params": [p.values[i] for i in test]})
    return fit

