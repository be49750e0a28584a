"""Command-line entry point: ``pinnshift <command> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import shutil
import sys
import time
from importlib import metadata
from pathlib import Path

from . import experiments as ex
from .config import load
from .errors import ConfigError, DegenerateInputError, NumericError, UnsupportedError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "manifest.json"

COMMANDS = {
    "train": "train a PINN and write checkpoint, history and metrics",
    "eval": "evaluate a trained checkpoint (--run) against the reference",
    "spectra": "Fourier magnitude spectra of the reference (and --run prediction)",
    "pairwise": "pairwise Wasserstein-Fourier matrices",
    "wwf": "weighted Wasserstein-Fourier distance, raw and normalized",
    "sweep": "train across a parameter grid and correlate WWF with extrapolation error",
    "transfer": "baseline vs half/full-domain transfer learning across seeds",
    "dpm": "DPM-reweighted vs vanilla training across seeds",
    "predict": "fit the spectra-to-error predictor over a parameter grid",
    "refsol": "write the reference solution on the evaluation grid",
}
NEEDS_RUN = {"eval"}
ACCEPTS_RUN = {"eval", "spectra", "pairwise", "wwf"}


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def build_parser():
    parser = argparse.ArgumentParser(prog="pinnshift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output directory (defaults to [output] dir)")
        p.add_argument("--seed", type=int, help="override training.seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        if name in ACCEPTS_RUN:
            p.add_argument("--run", required=name in NEEDS_RUN,
                           help="directory of a previous train run (uses its checkpoint)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def prepare_output(path, force):
    """Create ``path``; an existing non-empty directory is replaced only with ``force``
    and only if it holds a manifest written by this tool."""
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to replace it)")
        if not (out / MANIFEST).exists():
            raise ConfigError(f"refusing to replace {out}: it was not created by pinnshift")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, args, cfg, started, status="ok", error=None):
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files[str(p.relative_to(out))] = sha256(p)
    ex.write_json(out / MANIFEST, {
        "command": args.command, "config_path": str(args.config), "config": cfg.raw,
        "seed": cfg.training.seed, "tool_version": _version(), "status": status,
        "error": error, "wall_seconds": round(time.time() - started, 3), "files": files})


def _dispatch(args, cfg, out):
    run_dir = getattr(args, "run", None)
    c = args.command
    if c == "train":
        ex.run_train(cfg, out)
    elif c == "eval":
        ex.run_eval(cfg, run_dir, out)
    elif c == "spectra":
        ex.run_spectra(cfg, out, run_dir)
    elif c == "pairwise":
        ex.run_pairwise(cfg, out, run_dir)
    elif c == "wwf":
        ex.run_wwf(cfg, out, run_dir)
    elif c == "sweep":
        rec = ex.run_sweep(cfg, out, args.jobs)
        print(f"spearman correlation: {rec.correlation:.4f} ({len(rec.params)} ok, "
              f"{len(rec.failed)} failed)")
    elif c == "transfer":
        _, summary = ex.run_transfer(cfg, out, args.jobs)
        for arm, s in summary.items():
            print(f"{arm:>9}: {s['mean']:.4g} +- {s['std']:.4g} (median {s['median']:.4g}, n={s['n']})")
    elif c == "dpm":
        ex.run_dpm(cfg, out, args.jobs)
    elif c == "predict":
        fit = ex.run_predict(cfg, out, args.jobs)
        print(f"R2 train {fit.r2_train:.4f}  test {fit.r2_test:.4f}")
    elif c == "refsol":
        ex.run_refsol(cfg, out)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    started = time.time()
    out = None
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        target = args.out or cfg.output_dir
        if not target:
            raise ConfigError("no output directory: pass --out or set [output] dir")
        out = prepare_output(target, args.force)
        _dispatch(args, cfg, out)
    except (ConfigError, UnsupportedError) as exc:
        print(f"pinnshift: error: {exc}", file=sys.stderr)
        if out is not None:
            write_manifest(out, args, cfg, started, "config-error", str(exc))
        return EXIT_CONFIG
    except (NumericError, DegenerateInputError) as exc:
        print(f"pinnshift: numeric failure: {exc}", file=sys.stderr)
        if out is not None:
            write_manifest(out, args, cfg, started, "numeric-failure", str(exc))
        return EXIT_NUMERIC
    write_manifest(out, args, cfg, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
