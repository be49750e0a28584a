import csv
import json
from pathlib import Path

import numpy as np
import pytest

from pinnshift.cli import main
from pinnshift.config import load, parse
from pinnshift.errors import ConfigError

BASE = """
[pde]
kind = "{kind}"
{params}

[architecture]
hidden = [8, 8]

[training]
lr = 1e-3
epochs = {epochs}
samples = [48, 8, 16]
log_every = 2
{extra}
"""


def _write(tmp_path, kind="diffusion", epochs=4, params="", extra="", name="c.toml"):
    path = tmp_path / name
    path.write_text(BASE.format(kind=kind, epochs=epochs, params=params, extra=extra))
    return path


def _rows(path):
    return list(csv.DictReader(open(path)))


# -- config -----------------------------------------------------------------


def test_parse_defaults():
    cfg = parse('[pde]\nkind = "burgers"\n')
    assert cfg.params == {} and cfg.problem().params == {"nu": 0.01}
    assert cfg.architecture.hidden == (50, 50, 50, 50)
    assert cfg.training.samples == (10000, 40, 80) and cfg.training.epochs == 50000
    assert cfg.training.dpm is None and cfg.spectral.n_x == 256


def test_parse_full_document():
    cfg = parse("""
[pde]
kind = "burgers"
params = { nu = 0.02 }
[domain]
t_train = 0.4
[architecture]
hidden = [20, 20]
skip = true
embedding = { sigmas = [1.0, 5.0], features_per_sigma = 4 }
[training]
seed = 3
[training.dpm]
w = 1.01
[sweep]
param = "nu"
start = 0.001
stop = 0.1
count = 10
[transfer]
family = [{ nu = 0.003 }, { nu = 0.016 }]
target = { nu = 0.024 }
seeds = [0, 1]
[dpm]
seeds = [4]
""")
    assert cfg.problem().domain.t_train == 0.4
    assert cfg.architecture.embedding.width == 16 and cfg.architecture.skip
    assert cfg.training.dpm.w == 1.01 and cfg.training.dpm.delta == 0.08
    assert len(cfg.sweep.values) == 10 and cfg.sweep.values[-1] == pytest.approx(0.1)
    assert cfg.transfer.arms == ("baseline", "half", "full")
    assert cfg.with_seed(9).training.seed == 9


@pytest.mark.parametrize("text,where", [
    ('[pde]\nkind = "burgers"\n[training]\nlr = -1\n', ":4: training.lr"),
    ('[pde]\nkind = "burgers"\n[training]\nepochs = 2.5\n', ":4: training.epochs"),
    ('[pde]\nkind = "burgers"\n[training]\nlearning_rate = 0.1\n', ":4: training.learning_rate"),
    ('[pde]\nkind = "burgers"\n[plots]\nx = 1\n', ":3: plots"),
    ('[pde]\nkind = "burgers"\nparams = { d = 0.1 }\n', ":3: pde.params"),
    ('[pde]\nkind = "heat"\n[domain]\nt_train = 2.0\n', ":3: domain"),
    ('[pde]\nkind = "burgers"\n[training.dpm]\nw = 0.5\n', ":3: training.dpm"),
    ('[pde]\nkind = "burgers"\n[sweep]\nparam = "nu"\nvalues = [0.1, 0.05]\n', ":5: sweep.values"),
    ('[pde]\nkind = "burgers"\n[transfer]\nfamily = [{ nu = -1 }]\ntarget = {}\n', ":4: transfer.family"),
    ("[pde\n", "<config>"),
])
def test_invalid_configs_are_line_anchored(text, where):
    with pytest.raises(ConfigError) as err:
        parse(text)
    assert where in str(err.value)


def test_missing_kind():
    with pytest.raises(ConfigError):
        parse("[training]\nlr = 0.1\n")


# -- commands ----------------------------------------------------------------


def test_train_writes_all_artifacts_and_is_deterministic(tmp_path):
    cfg = _write(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("checkpoint.txt", "history.csv", "metrics.csv", "run.json", "manifest.json"):
        assert (tmp_path / "a" / name).exists()
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert set(man_a["files"]) >= {"history.csv", "metrics.csv", "checkpoint.txt"}
    for name in ("history.csv", "metrics.csv", "checkpoint.txt"):
        assert man_a["files"][name] == man_b["files"][name]
    assert man_a["status"] == "ok" and man_a["config"]["training"]["epochs"] == 4
    assert len(_rows(tmp_path / "a" / "history.csv")) == 3  # epochs 0, 2 and the final 4


def test_seed_flag_changes_the_run(tmp_path):
    cfg = _write(tmp_path)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "5"])
    a = (tmp_path / "a" / "history.csv").read_text()
    assert a != (tmp_path / "b" / "history.csv").read_text()
    assert json.loads((tmp_path / "b" / "run.json").read_text())["seed"] == 5


def test_invalid_config_exits_2_without_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, extra="alpha = -1")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()
    assert "training.alpha" in capsys.readouterr().err


def test_refuses_overwrite_without_force(tmp_path):
    cfg = _write(tmp_path)
    out = str(tmp_path / "o")
    assert main(["train", "--config", str(cfg), "--out", out]) == 0
    assert main(["train", "--config", str(cfg), "--out", out]) == 2
    assert main(["train", "--config", str(cfg), "--out", out, "--force"]) == 0
    foreign = tmp_path / "foreign"
    foreign.mkdir()
    (foreign / "keep.txt").write_text("x")
    assert main(["refsol", "--config", str(cfg), "--out", str(foreign), "--force"]) == 2
    assert (foreign / "keep.txt").exists()


def test_divergence_exits_3(tmp_path):
    cfg = _write(tmp_path, kind="burgers").read_text().replace("lr = 1e-3", "lr = 1e300")
    path = tmp_path / "bad.toml"
    path.write_text(cfg)
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["status"] == "numeric-failure"


def test_eval_requires_checkpoint(tmp_path):
    cfg = _write(tmp_path)
    (tmp_path / "empty").mkdir()
    code = main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"), "--run",
                 str(tmp_path / "empty")])
    assert code == 2


def test_spectral_commands_on_diffusion(tmp_path):
    cfg = _write(tmp_path, extra="[spectral]\nclip = true")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    assert main(["pairwise", "--config", str(cfg), "--out", str(tmp_path / "p"), "--run", str(run)]) == 0
    ref = _rows(tmp_path / "p" / "pairwise_reference.csv")
    assert len(ref) == 100 * 100 and max(float(r["wf"]) for r in ref) < 1e-10
    diff = _rows(tmp_path / "p" / "pairwise_difference.csv")
    assert min(float(r["wf"]) for r in diff) >= 1e-3
    assert main(["wwf", "--config", str(cfg), "--out", str(tmp_path / "w")]) == 0
    doc = json.loads((tmp_path / "w" / "wwf.json").read_text())
    assert abs(doc["reference"]["normalized"]) < 1e-10 and "prediction" not in doc
    assert main(["spectra", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert len(_rows(tmp_path / "s" / "spectra_reference.csv")) == 100 * 129


def test_burgers_pairwise_has_block_structure(tmp_path):
    cfg = _write(tmp_path, kind="burgers")
    assert main(["pairwise", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    rows = _rows(tmp_path / "p" / "pairwise_reference.csv")
    d = np.array([float(r["wf"]) for r in rows]).reshape(100, 100)
    early, late = d[:20, :20].mean(), d[:20, 80:].mean()
    assert late > 5 * early


def test_allen_cahn_spectra_use_closed_grid(tmp_path):
    cfg = _write(tmp_path, kind="allen_cahn", extra="[spectral]\nn_t = 4")
    assert main(["spectra", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    rows = _rows(tmp_path / "s" / "spectra_reference.csv")
    assert len(rows) == 4 * 101  # 200 samples after dropping the duplicate end


def test_refsol_and_schrodinger_channels(tmp_path):
    cfg = _write(tmp_path, kind="schrodinger", extra="[spectral]\nn_x = 16\nn_t = 4")
    assert main(["refsol", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    rows = _rows(tmp_path / "r" / "reference.csv")
    assert len(rows) == 16 * 4 * 2
    assert main(["wwf", "--config", str(cfg), "--out", str(tmp_path / "w")]) == 0
    doc = json.loads((tmp_path / "w" / "wwf.json").read_text())
    assert {"reference_ch0", "reference_ch1"} <= set(doc)


def test_sweep_jobs_do_not_change_results(tmp_path):
    extra = '[sweep]\nparam = "nu"\nvalues = [0.01, 0.03, 0.1]'
    cfg = _write(tmp_path, kind="burgers", epochs=3, extra=extra)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "3"]) == 0
    a = (tmp_path / "a" / "sweep.csv").read_text()
    assert a == (tmp_path / "b" / "sweep.csv").read_text()
    assert len(a.splitlines()) == 4 and a.startswith("param,wwf_raw,wwf_norm,ext_err")


def test_transfer_table_schema(tmp_path):
    extra = ('[transfer]\nfamily = [{ nu = 0.003 }, { nu = 0.016 }]\ntarget = { nu = 0.024 }\n'
             'seeds = [0]')
    cfg = _write(tmp_path, kind="burgers", epochs=2, extra=extra)
    assert main(["transfer", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    summary = _rows(tmp_path / "t" / "transfer_summary.csv")
    assert [r["setting"] for r in summary] == ["baseline", "half", "full"]
    assert all(float(r["std"]) == 0.0 for r in summary)
    runs = _rows(tmp_path / "t" / "transfer_runs.csv")
    assert set(runs[0]) == {"arm", "seed", "ext_err", "interp_err", "domain", "boundary", "combined"}


def test_dpm_rows_and_unit_weight_degeneracy(tmp_path):
    extra = "[dpm]\nseeds = [0, 1]\nw = 1.0"
    cfg = _write(tmp_path, kind="burgers", epochs=4, extra=extra)
    assert main(["dpm", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    rows = _rows(tmp_path / "d" / "dpm_runs.csv")
    assert [(r["arm"], r["seed"]) for r in rows] == [("vanilla", "0"), ("vanilla", "1"),
                                                     ("dpm", "0"), ("dpm", "1")]
    for seed in ("0", "1"):
        v = next(r for r in rows if r["arm"] == "vanilla" and r["seed"] == seed)
        d = next(r for r in rows if r["arm"] == "dpm" and r["seed"] == seed)
        assert {k: v[k] for k in v if k != "arm"} == {k: d[k] for k in d if k != "arm"}
    doc = json.loads((tmp_path / "d" / "dpm.json").read_text())
    assert (doc["epsilon"], doc["delta"]) == (0.001, 0.08)


def test_dpm_defaults_echoed_in_manifest(tmp_path):
    cfg = _write(tmp_path, kind="burgers", epochs=2, extra="[dpm]\nseeds = [0]")
    assert main(["dpm", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    doc = json.loads((tmp_path / "d" / "dpm.json").read_text())
    assert (doc["epsilon"], doc["delta"], doc["w"]) == (0.001, 0.08, 1.001)
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert "dpm.json" in man["files"]


def test_predict_command(tmp_path):
    extra = ('[predict]\nparam = "nu"\nstart = 0.01\nstop = 0.1\ncount = 10\nhidden = [8]\n'
             'epochs = 50')
    cfg = _write(tmp_path, kind="burgers", epochs=2, extra=extra)
    assert main(["predict", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    doc = json.loads((tmp_path / "p" / "predictor.json").read_text())
    assert len(doc["test_params"]) == 5
    rows = _rows(tmp_path / "p" / "predictions.csv")
    assert len(rows) == 10 * 11 and sum(r["split"] == "test" for r in rows) == 5 * 11


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.toml")),
                         ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load(path)
    assert cfg.problem().kind == cfg.kind
