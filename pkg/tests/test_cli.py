"""End-to-end tests of the ``atw`` command line."""

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from atwflow import cli, io
from atwflow import scheme as scheme_mod
from atwflow.config import ConfigError
from atwflow.grid import Disk, GridSpec, synth_shape
from atwflow.scheme import StepFailure

BALL = {
    "shape": {"kind": "disk", "radius": 1.0},
    "grid": {"cells": 256, "side": 2.5},
    "h": 0.01,
    "oracle": {"kind": "ball", "r0": 1.0},
    "checks": ["nestedness", "perimeter_monotone", "ball_radius", "ball_upper_bound", "apriori_ledger",
               "coarea", "modulus"],
    "check_options": {"modulus": {"n_pairs": 2000}},
    "seed": 7,
}
SMALL = {
    "shape": {"kind": "disk", "radius": 0.6},
    "grid": {"cells": 48, "side": 1.6},
    "coupling": 1.0,
    "checks": ["nestedness", "perimeter_monotone"],
}


def write_config(tmp_path, cfg, name="config.json", **override):
    d = {**cfg, **override}
    d.setdefault("output", str(tmp_path / "out"))
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


@pytest.fixture(scope="module")
def ball_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ball")
    cfg = write_config(root, BALL)
    code = cli.main(["run", str(cfg)])
    return root / "out", code


def test_run_ball_exit_zero_and_outputs(ball_dir):
    out, code = ball_dir
    assert code == cli.EXIT_OK
    rows = io.read_series(out / "series.csv")
    assert len(rows) >= 40
    assert [r["k"] for r in rows] == list(range(len(rows)))
    assert (out / "arrival.atwf").is_file() and (out / "reports.json").is_file()
    manifest = io.read_manifest(out)
    assert manifest["config"]["h"] == 0.01 and manifest["config"]["resolved"]["h"] == 0.01
    assert io.verify_manifest(out) == []
    assert set(manifest["files"]) >= {"series.csv", "arrival.atwf", "reports.json", "trajectory/trajectory.json"}


def test_check_matches_in_memory(ball_dir, tmp_path):
    out, _ = ball_dir
    report = tmp_path / "check.json"
    assert cli.main(["check", str(out), "--report", str(report)]) == cli.EXIT_OK
    assert report.read_bytes() == (out / "reports.json").read_bytes()


def test_determinism(tmp_path):
    cfg = write_config(tmp_path, SMALL, checks=["nestedness", "perimeter_monotone", "coarea", "modulus",
                                                "outward_min", "apriori_ledger"],
                       check_options={"modulus": {"H0": 1.0 / 0.6}, "outward_min": {"delta": 0.05}})
    outputs = []
    for name in ("a", "b"):
        assert cli.main(["run", str(cfg), "-o", str(tmp_path / name)]) == cli.EXIT_OK
        outputs.append(tmp_path / name)
    a, b = outputs
    files = io.read_manifest(a)["files"]
    assert files == io.read_manifest(b)["files"]
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_sabotaged_tolerance_exits_one(tmp_path):
    cfg = write_config(tmp_path, SMALL, checks=["nestedness", "perimeter_monotone"],
                       tolerances={"perimeter_monotone": -1.0})
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CHECK
    reports = json.loads((tmp_path / "out" / "reports.json").read_text())
    assert [r["passed"] for r in reports] == [True, False]


def test_sabotaged_zero_tolerance_on_ball_radius(tmp_path):
    cfg = write_config(tmp_path, SMALL, oracle={"kind": "ball", "r0": 0.6}, checks=["ball_radius"],
                       tolerances={"ball_radius": 0})
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CHECK


@pytest.mark.parametrize("text", [
    "{not json",
    json.dumps({"grid": {"cells": 48, "side": 1.6}, "output": "x", "h": 0.01}),
    json.dumps({**SMALL, "output": "x", "colour": "red"}),
    json.dumps({**SMALL, "output": "x", "checks": ["nope"]}),
    json.dumps({**SMALL, "output": "x", "h": 0.01}),
    json.dumps({**SMALL, "output": "x", "shape": {"kind": "disk", "radius": 0.79}}),
    json.dumps({**SMALL, "output": "x", "solver": {"tolerance": -1}}),
    json.dumps({**SMALL, "output": "x", "checks": ["ball_radius"]}),
])
def test_malformed_config_exits_two(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    assert cli.main(["run", str(p)]) == cli.EXIT_CONFIG


def test_missing_config_file_exits_two(tmp_path):
    assert cli.main(["run", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG


def test_solver_failure_exits_three(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise StepFailure("step left the padded box")

    monkeypatch.setattr(scheme_mod, "atw_step", broken)
    cfg = write_config(tmp_path, SMALL)
    assert cli.main(["run", str(cfg)]) == cli.EXIT_SOLVER
    out = tmp_path / "out"
    assert io.read_manifest(out)["failure"].startswith("step 1")
    assert cli.main(["check", str(out)]) == cli.EXIT_SOLVER


def test_check_detects_tampering(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
    out = tmp_path / "out"
    (out / "series.csv").write_text("k\n")
    assert cli.main(["check", str(out)]) == cli.EXIT_CHECK


def test_check_without_manifest_exits_two(tmp_path):
    assert cli.main(["check", str(tmp_path)]) == cli.EXIT_CONFIG


def test_dump_field(tmp_path, capsys):
    g = GridSpec.cube(16, 1.0)
    E = synth_shape(g, Disk(0.3))
    path = io.dump_field(tmp_path / "E.atwf", E)
    npy = tmp_path / "E.npy"
    assert cli.main(["dump-field", str(path), "--npy", str(npy)]) == cli.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["kind"] == "mask" and summary["count"] == E.count and summary["shape"] == [16, 16]
    np.testing.assert_array_equal(np.load(npy), E.inside)
    bad = tmp_path / "bad.atwf"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    assert cli.main(["dump-field", str(bad)]) == cli.EXIT_CONFIG


def test_study_single_rung_passes(tmp_path):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"cells": [48], "side": 1.6, "r0": 0.6, "output": str(tmp_path / "st")}))
    assert cli.main(["study", str(cfg)]) == cli.EXIT_OK
    out = tmp_path / "st"
    lines = (out / "table.csv").read_text().splitlines()
    assert lines[0].split(",") == list(cli.STUDY_COLUMNS) and len(lines) == 2
    assert io.verify_manifest(out) == []
    assert cli.main(["check", str(out)]) == cli.EXIT_OK


def test_study_pinning_ladder_is_flagged(tmp_path, capsys):
    dx = 1.6 / 48
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"rungs": [[48, dx], [48, 0.2 * dx]], "side": 1.6, "r0": 0.6,
                               "output": str(tmp_path / "st")}))
    cli.main(["study", str(cfg)])
    text = (tmp_path / "st" / "table.csv").read_text().splitlines()
    header = text[0].split(",")
    last = dict(zip(header, text[-1].split(",")))
    assert last["pinning_risk"] == "True"
    assert "[pinning risk]" in capsys.readouterr().out


def test_study_malformed_exits_two(tmp_path):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"cells": [48], "rungs": [[48, 0.01]], "output": "x"}))
    assert cli.main(["study", str(cfg)]) == cli.EXIT_CONFIG


def test_worker_count(monkeypatch):
    monkeypatch.delenv("ATW_WORKERS", raising=False)
    assert cli.worker_count(3) == 3
    monkeypatch.setenv("ATW_WORKERS", "2")
    assert cli.worker_count(1) == 2
    for bad in ("0", "two", "-1"):
        monkeypatch.setenv("ATW_WORKERS", bad)
        with pytest.raises(ConfigError):
            cli.worker_count()


def test_workers_do_not_change_reports(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, SMALL, checks=["nestedness", "perimeter_monotone", "coarea", "apriori_ledger"])
    monkeypatch.setenv("ATW_WORKERS", "1")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
    one = (tmp_path / "out" / "reports.json").read_bytes()
    shutil.rmtree(tmp_path / "out")
    monkeypatch.setenv("ATW_WORKERS", "4")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
    assert (tmp_path / "out" / "reports.json").read_bytes() == one


def test_console_script_and_bad_workers(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    atw = shutil.which("atw")
    cmd = [atw] if atw else [sys.executable, "-m", "atwflow.cli"]
    env = {"ATW_WORKERS": "zero", "PATH": "/usr/bin:/bin"}
    r = subprocess.run(cmd + ["run", str(cfg)], env=env, capture_output=True, text=True)
    assert r.returncode == cli.EXIT_CONFIG and "ATW_WORKERS" in r.stderr
    r = subprocess.run(cmd + ["run", str(cfg)], env={**env, "ATW_WORKERS": "2"}, capture_output=True, text=True)
    assert r.returncode == cli.EXIT_OK, r.stderr
