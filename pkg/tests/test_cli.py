import json
from pathlib import Path

import pytest

from rlattrib import experiment
from rlattrib.attribution import InfluenceReport
from rlattrib.cli import main, parse_rounds
from rlattrib.config import parse_config

# a few seconds per matrix: tiny chain runs
FAST = ["--env", "chain", "--rounds", "3", "--n-steps", "64", "--eval-episodes", "10",
        "--set", "hidden=8", "--set", "batch_size=16", "--set", "n_epochs=2"]


def files(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_matrix_layout_and_manifest(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", *FAST, "--strategies", "iif", "--seeds", "0-2", "--output-dir", str(out)]) == 0
    runlogs = sorted(p.relative_to(out).as_posix() for p in out.rglob("runlog.csv"))
    assert runlogs == [f"{s}/seed{k}/runlog.csv" for s in ("iif", "standard") for k in range(3)]
    manifest = json.loads((out / "manifest.json").read_text())
    listed = set(manifest["files"])
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert listed == on_disk
    assert all(experiment.sha256(out / f) == h for f, h in manifest["files"].items())
    assert {c["status"] for c in manifest["cells"]} == {"ok"}
    assert len(manifest["config_hash"]) == 16 and manifest["config"]["env"] == "chain"
    assert set(manifest["versions"]) == {"rlattrib", "numpy", "scipy", "python"}
    assert manifest["nondeterministic"] == sorted(f for f in listed if f.endswith("timing.csv"))
    assert (out / "report.csv").exists() and (out / "report.txt").exists()
    for k in range(3):
        rows = (out / "iif" / f"seed{k}" / "runlog.csv").read_text().splitlines()
        assert rows[0] == "round,test_return,n_filtered" and len(rows) == 4


def test_rerun_is_byte_identical(tmp_path):
    args = ["iif", *FAST, "--seeds", "0,1", "--set", "attribute=true"]
    assert main([*args, "--output-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--output-dir", str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a.keys() == b.keys()
    differing = {k for k in a if a[k] != b[k]}
    assert differing <= {k for k in a if k.endswith("timing.csv") or k == "manifest.json"}
    ma, mb = (json.loads(f["manifest.json"]) for f in (a, b))
    for name in ma["files"]:
        if name not in ma["nondeterministic"]:
            assert ma["files"][name] == mb["files"][name]
    report = InfluenceReport.from_json(a["iif/seed0/influence/round002.json"].decode())
    assert report.round == 2 and len(report) == 64


def test_interrupted_cell_resumes(tmp_path, monkeypatch):
    cfg = parse_config(flags={"env": "chain", "rounds": "4", "n_steps": "64", "eval_episodes": "10",
                              "hidden": "8", "batch_size": "16", "n_epochs": "2", "strategies": "iif",
                              "output_dir": str(tmp_path / "x")})
    reference = experiment.run_matrix(cfg, tmp_path / "ref")
    assert reference.ok

    real_save = experiment.save_params

    def crash_after_round_two(params, path):
        real_save(params, path)
        if params.round == 2:
            raise RuntimeError("simulated interruption")

    monkeypatch.setattr(experiment, "save_params", crash_after_round_two)
    first = experiment.run_matrix(cfg, tmp_path / "x")
    assert not first.ok and "simulated interruption" in first.cells[0]["error"]
    assert len((tmp_path / "x/iif/seed0/runlog.csv").read_text().splitlines()) == 3

    monkeypatch.setattr(experiment, "save_params", real_save)
    collected = []
    real_train = experiment.train

    def counting_train(*args, **kwargs):
        collected.append(len(kwargs["state"].log))
        return real_train(*args, **kwargs)

    monkeypatch.setattr(experiment, "train", counting_train)
    assert experiment.run_matrix(cfg, tmp_path / "x").ok
    # the crash hit before the round-2 checkpoint was committed: the log row for round 2 is
    # dropped and the cell resumes after round 1
    assert collected == [1]
    for name in ("runlog.csv", "params.npz", "cell.json"):
        assert (tmp_path / "x/iif/seed0" / name).read_bytes() == (tmp_path / "ref/iif/seed0" / name).read_bytes()


def test_changed_config_restarts_cell(tmp_path):
    out = str(tmp_path / "o")
    assert main(["train", *FAST, "--output-dir", out]) == 0
    assert main(["train", *FAST, "--rounds", "2", "--output-dir", out]) == 0
    assert len((Path(out) / "standard/seed0/runlog.csv").read_text().splitlines()) == 3


def test_failed_cell_exit_code_and_others_proceed(tmp_path, capsys):
    out = tmp_path / "grid"
    code = main(["bench", "--env", "emptygrid", "--rounds", "1", "--n-steps", "32", "--eval-episodes", "2",
                 "--set", "hidden=4", "--set", "n_epochs=1", "--strategies", "adv1", "--output-dir", str(out)])
    assert code == 1
    manifest = json.loads((out / "manifest.json").read_text())
    status = {c["strategy"]: c for c in manifest["cells"]}
    assert status["standard"]["status"] == "ok"
    assert status["adv1"]["status"] == "error" and "OracleUnavailable" in status["adv1"]["error"]
    assert "FAILED" in capsys.readouterr().out


def test_parse_errors_exit_2(tmp_path, capsys):
    assert main(["iif", "--p", "1.5", "--output-dir", str(tmp_path)]) == 2
    assert "flag --p" in capsys.readouterr().err
    assert main(["train", "--set", "nonsense", "--output-dir", str(tmp_path)]) == 2
    assert main(["train", "--set", "nosuchkey=1", "--output-dir", str(tmp_path)]) == 2


def test_report_subcommand(tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["bench", *FAST, "--strategies", "iif", "--seeds", "0,1", "--output-dir", str(out)]) == 0
    (out / "report.csv").unlink()
    assert main(["report", str(out)]) == 0
    header = (out / "report.csv").read_text().splitlines()[0]
    assert header.startswith("env,strategy,n_seeds,se_ave")
    assert main(["report", str(tmp_path / "missing")]) == 2


def test_attribute_intervene_diagnose(tmp_path):
    out = tmp_path / "a"
    common = [*FAST, "--seed", "1", "--output-dir", str(out)]
    target = out / "r2.json"
    assert main(["attribute", *common, "--round", "2", "--mode", "full", "--out", str(target)]) == 0
    rep = InfluenceReport.from_json(target.read_text())
    assert rep.round == 2 and rep.mode.value == "full"
    assert main(["intervene", *common, "--at", "1-2", "--mode", "fast"]) == 0
    lines = (out / "intervene_influence.csv").read_text().splitlines()
    assert len(lines) == 3
    assert main(["diagnose", *common, "--round", "2", "--u", "2,4", "--at", "2"]) == 0
    d = out / "diagnose" / "seed1"
    assert {p.name for p in d.iterdir()} == {"mismatch_round2.csv", "roughness.csv", "delta_return.csv"}


def test_parse_rounds():
    assert parse_rounds("3-6,9") == [3, 4, 5, 6, 9]


def test_help_exits_cleanly():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
