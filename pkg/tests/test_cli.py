import json
import math
import shutil

import numpy as np
import pytest

from mergesurgery import reproduce
from mergesurgery.checkpoint import file_sha256, load
from mergesurgery.cli import main
from mergesurgery.config import ConfigError, RunConfig, from_dict, load_config, with_overrides
from mergesurgery.merging import MergeCoefficients
from mergesurgery.models import TrainingDivergedError
from mergesurgery.surgery import SurgeryBundle

from conftest import write_config

METHODS = ("avg", "task-arith", "ties", "adamerging")


# -- config ---------------------------------------------------------------------


def test_defaults():
    cfg = load_config(None)
    s = cfg.surgery
    assert (s.rank, s.lr, s.iterations, s.batch_size, s.betas) == (16, 1e-3, 1000, 16, (0.9, 0.999))
    assert cfg.tasks == 8 and cfg.seeds == (0, 1, 2)
    m = cfg.model
    assert (m.d, m.hidden, m.k, m.layers, m.finetune_steps) == (32, 64, 16, 3, 500)
    g = cfg.merge
    assert (g.lam, g.trim, g.init, g.lr, g.steps) == (0.3, 0.2, 0.3, 1e-3, 500)


def test_precedence_flag_over_file_over_default(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"surgery": {"rank": 8, "lr": 0.01}, "merge": {"lam": 0.5}}))
    cfg = with_overrides(load_config(path), rank=4, lam=None)
    assert cfg.surgery.rank == 4  # flag
    assert cfg.surgery.lr == 0.01 and cfg.merge.lam == 0.5  # file
    assert cfg.surgery.iterations == 1000  # default


@pytest.mark.parametrize(
    "data",
    [{"tasks": 1}, {"bogus": 1}, {"merge": {"method": "fisher"}}, {"surgery": {"ratio": 2}}, {"model": {"k": 0}}, {"seeds": []}],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_config_json_round_trip():
    cfg = from_dict({"seeds": [4], "surgery": {"loss": "mse"}})
    assert from_dict(json.loads(cfg.to_json())) == cfg


# -- exit codes ---------------------------------------------------------------------


def test_usage_and_config_errors_exit_1(tmp_path, capsys):
    assert main(["merge", "--method", "nope"]) == 1
    assert main([]) == 1
    assert main(["prepare", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["prepare", "--config", str(bad)]) == 1
    assert main(["prepare", "--ratio", "0", "--out", str(tmp_path)]) == 1


def test_missing_artifacts_listed_by_name(tmp_path, capsys):
    config = write_config(tmp_path / "c.json", out=str(tmp_path / "empty"))
    assert main(["report", "--config", str(config)]) == 1
    err = capsys.readouterr().err
    assert "missing artifacts" in err and "theta0.msrg" in err and "bundle.msrg" in err
    assert main(["surgery", "--config", str(config)]) == 1


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_divergence_exits_2(tiny_run, tmp_path):
    config, _ = tiny_run
    out = tmp_path / "diverge"
    main(["prepare", "--config", str(config), "--out", str(out)])
    main(["merge", "--config", str(config), "--out", str(out)])
    assert main(["surgery", "--config", str(config), "--out", str(out), "--lr", "1e38"]) == 2


def test_trend_violation_exits_3(tiny_run, monkeypatch, capsys):
    config, _ = tiny_run

    def failing(cfg, cache, res):
        res.checks["always"] = False
        return res

    monkeypatch.setitem(reproduce.RUNNERS, "bias-ordering", failing)
    assert main(["reproduce", "bias-ordering", "--config", str(config)]) == 3
    assert "[FAIL] bias-ordering: always" in capsys.readouterr().out


def test_aborted_suite_keeps_partial_results(tiny_run, monkeypatch):
    config, out = tiny_run

    def crash(cfg, cache, res):
        res.rows.append({"seed": 0, "value": 1.0})
        raise TrainingDivergedError("boom")

    monkeypatch.setitem(reproduce.RUNNERS, "rank-sweep", crash)
    assert main(["reproduce", "rank-sweep", "--config", str(config)]) == 2
    verdict = json.loads((out / "reproduce" / "rank-sweep_verdict.json").read_text())
    assert verdict["passed"] is False and "boom" in verdict["details"]["aborted"]
    assert (out / "reproduce" / "rank-sweep.csv").read_text().startswith("seed,value")


# -- pipeline contracts ------------------------------------------------------------------


def test_prepare_outputs(tiny_run):
    _, out = tiny_run
    d = out / "seed0" / "prepared"
    assert len(list(d.glob("individual_*.msrg"))) == 2
    manifest = json.loads((d / "manifest.json").read_text())
    for name, digest in manifest["files"].items():
        assert file_sha256(d / name) == digest


def test_prepare_rerun_gives_identical_manifest(tiny_run, tmp_path):
    config, out = tiny_run
    assert main(["prepare", "--config", str(config), "--out", str(tmp_path / "again")]) == 0
    a = json.loads((out / "seed0" / "prepared" / "manifest.json").read_text())
    b = json.loads((tmp_path / "again" / "seed0" / "prepared" / "manifest.json").read_text())
    assert a == b


def test_every_output_directory_has_provenance(tiny_run):
    _, out = tiny_run
    dirs = {p.parent for p in out.rglob("*") if p.is_file()}
    assert dirs
    for d in dirs:
        cfg = json.loads((d / "config.json").read_text())
        assert cfg["version"] and cfg["config"]["tasks"] == 2
        assert (d / "manifest.json").exists()


def test_avg_of_identical_checkpoints_is_identity(tmp_path):
    config = write_config(tmp_path / "c.json", out=str(tmp_path / "o"), model={"finetune_steps": 0})
    assert main(["prepare", "--config", str(config)]) == 0
    assert main(["merge", "--config", str(config), "--method", "avg"]) == 0
    d = tmp_path / "o" / "seed0"
    merged = load(d / "merge" / "avg" / "merged.msrg")
    assert merged.bit_equal(load(d / "prepared" / "individual_0.msrg"))
    assert merged.bit_equal(load(d / "prepared" / "theta0.msrg"))


def test_task_arith_lambda_zero_gives_theta0(tiny_run, tmp_path):
    config, out = tiny_run
    assert main(["merge", "--config", str(config), "--method", "task-arith", "--lambda", "0", "--out", str(tmp_path)]) == 1
    # the lambda flag works against the shared prepared artifacts
    shutil.copytree(out / "seed0" / "prepared", tmp_path / "seed0" / "prepared")
    assert main(["merge", "--config", str(config), "--method", "task-arith", "--lambda", "0", "--out", str(tmp_path)]) == 0
    assert load(tmp_path / "seed0" / "merge" / "task-arith" / "merged.msrg").bit_equal(
        load(tmp_path / "seed0" / "prepared" / "theta0.msrg")
    )
    manifest = json.loads((tmp_path / "seed0" / "merge" / "task-arith" / "manifest.json").read_text())
    assert manifest["merge"] == {"method": "task-arith", "lambda": 0.0}


def test_adamerging_emits_coefficients(tiny_run):
    _, out = tiny_run
    coef = MergeCoefficients.from_json((out / "seed0" / "merge" / "adamerging" / "coefficients.json").read_text())
    assert coef.mode == "layer" and coef.values.shape == (2, 2)


def test_zero_iterations_bundle_is_identity(tiny_run, tmp_path):
    config, out = tiny_run
    shutil.copytree(out / "seed0", tmp_path / "seed0")
    assert main(["surgery", "--config", str(config), "--out", str(tmp_path), "--iters", "0"]) == 0
    mods = SurgeryBundle.modules_from_map(load(tmp_path / "seed0" / "merge" / "task-arith" / "surgery" / "bundle.msrg"))
    assert len(mods) == 2 and all(not np.any(m.w_up) for m in mods)


def test_online_ratio_half_consumes_ceil_half(tiny_run, tmp_path):
    config, out = tiny_run
    shutil.copytree(out / "seed0", tmp_path / "seed0")
    args = ["surgery", "--config", str(config), "--out", str(tmp_path), "--regime", "online", "--ratio", "0.5"]
    assert main(args) == 0
    manifest = json.loads((tmp_path / "seed0" / "merge" / "task-arith" / "surgery" / "manifest.json").read_text())
    assert manifest["samples_used"] == [math.ceil(0.5 * 41)] * 2
    assert manifest["surgery"]["regime"] == "online"
    rows = (tmp_path / "seed0" / "merge" / "task-arith" / "surgery" / "trace.csv").read_text().splitlines()
    assert len(rows) == 1 + 21


def test_report_rows_cover_grid_and_is_idempotent(tiny_run, capsys):
    config, out = tiny_run
    summary = json.loads((out / "summary.json").read_text())
    pairs = [(r["method"], r["surgery"]) for r in summary["rows"]]
    assert sorted(pairs) == sorted((m, s) for m in METHODS for s in (False, True))
    before = {p.name: p.read_bytes() for p in out.glob("summary.*")}
    assert main(["report", "--config", str(config)]) == 0
    assert "task-arith" in capsys.readouterr().out
    assert before == {p.name: p.read_bytes() for p in out.glob("summary.*")}
    assert len(list((out / "projections").glob("*.csv"))) == 2 * len(METHODS)
    bias = json.loads((out / "bias" / "seed0_avg_surgery.json").read_text())
    assert bias["surgery"] is True and len(bias["per_task"]) == 2


def test_seed_flag_restricts_run(tiny_run, tmp_path):
    config, _ = tiny_run
    assert main(["prepare", "--config", str(config), "--out", str(tmp_path), "--seed", "5"]) == 0
    assert [p.name for p in tmp_path.iterdir() if p.is_dir()] == ["seed5"]


def test_reproduce_suite_on_tiny_config(tiny_run, capsys):
    config, out = tiny_run
    code = main(["reproduce", "online-sweep", "--config", str(config)])
    lines = capsys.readouterr().out.splitlines()
    assert code in (0, 3) and lines and all(l.startswith(("[PASS]", "[FAIL]")) for l in lines)
    assert (out / "reproduce" / "online-sweep.csv").exists()
    assert (out / "reproduce" / "config.json").exists()
