import csv
import json
import math
import subprocess
import sys

import pytest

from rfl.cli import (COMPARE_HEADER, RunResult, check_monotone, main, open_set_changes,
                     sweep_gamma)
from rfl.bnb import BnbOptions
from rfl.instances import GenConfig, generate


@pytest.fixture
def inst_file(tmp_path):
    path = tmp_path / "inst.json"
    assert main(["gen", "--sites", "10", "--budget", "3", "--seed", "7", "-o", str(path)]) == 0
    return path


def test_gen_is_reproducible(tmp_path, inst_file, capsys):
    other = tmp_path / "again.json"
    main(["gen", "--sites", "10", "--budget", "3", "--seed", "7", "-o", str(other)])
    assert other.read_bytes() == inst_file.read_bytes()
    assert "|S|=10" in capsys.readouterr().out


def test_solve_writes_result(tmp_path, inst_file):
    out = tmp_path / "r.json"
    cuts, model = tmp_path / "cuts.json", tmp_path / "model.txt"
    code = main(["solve", str(inst_file), "--cuts", "root", "-o", str(out),
                 "--dump-cuts", str(cuts), "--dump-model", str(model)])
    assert code == 0
    res = RunResult.from_dict(json.loads(out.read_text()))
    assert res.status == "optimal" and res.mode == "with_cuts"
    assert abs(res.reevaluated - res.objective) <= 1e-5 * abs(res.objective)
    assert res.open_set == [k for k, v in enumerate(res.y) if v]
    assert all(x > 0 for _, _, x in res.flows)
    assert isinstance(json.loads(cuts.read_text()), list)
    assert model.read_text().startswith("rfl-model 1")


def test_time_limit_exit_code(tmp_path, inst_file):
    out = tmp_path / "r.json"
    assert main(["solve", str(inst_file), "--time-limit", "0", "-o", str(out)]) == 2
    assert json.loads(out.read_text())["status"] == "time_limit"


@pytest.mark.parametrize("args,env", [
    (["--gap", "-1"], None),
    (["--threads", "0"], None),
    ([], "abc"),
    ([], "0"),
])
def test_errors_write_nothing(tmp_path, inst_file, monkeypatch, args, env):
    if env is not None:
        monkeypatch.setenv("RFL_CONIC_MAX_ITERS", env)
    out = tmp_path / "r.json"
    assert main(["solve", str(inst_file), "-o", str(out)] + args) == 1
    assert not out.exists()


def test_missing_instance(tmp_path):
    out = tmp_path / "r.json"
    assert main(["solve", str(tmp_path / "nope.json"), "-o", str(out)]) == 1
    assert not out.exists()


def test_iteration_cap_failure_writes_nothing(tmp_path, inst_file, monkeypatch):
    monkeypatch.setenv("RFL_CONIC_MAX_ITERS", "2")
    out = tmp_path / "r.json"
    assert main(["solve", str(inst_file), "-o", str(out)]) == 1
    assert not out.exists()


def test_run_result_round_trip():
    r = RunResult("a", "no_cuts", "optimal", 1.5, [1, 0], [0], [[0, 0, 2.0]],
                  {"nodes": 3, "gap": 0.0}, 1.5,
                  [{"gamma": 0.0, "objective": 1.5, "open_set": [0], "flows": []}])
    assert RunResult.from_dict(json.loads(r.dumps())) == r
    nan = RunResult("a", "m", "time_limit", 2.0, [], [])
    back = RunResult.from_dict(json.loads(nan.dumps()))
    assert math.isnan(back.reevaluated)


def test_compare_csv(tmp_path, inst_file, capsys):
    out = tmp_path / "cmp.csv"
    assert main(["compare", str(inst_file), "--generate", "6:2:1", "-o", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0].keys()) == COMPARE_HEADER
    assert len(rows) == 2
    for row in rows:
        a, b = float(row["Obj_no_cuts"]), float(row["Obj_with_cuts"])
        assert abs(a - b) <= 1e-4 * abs(a)
    assert "mean node ratio" in capsys.readouterr().out
    assert main(["compare", "-o", str(tmp_path / "x.csv")]) == 1


def test_sweep_outputs(tmp_path, inst_file, capsys):
    outdir = tmp_path / "sw"
    assert main(["sweep-gamma", str(inst_file), "--out-dir", str(outdir),
                 "--gammas", "0", "0.4"]) == 0
    stem = "gen-n10-b3-s7"
    data = json.loads((outdir / f"{stem}.sweep.json").read_text())
    assert [r["gamma"] for r in data["sweep"]] == [0.0, 0.4]
    svg = (outdir / f"{stem}.sweep.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<g ") == 2
    assert (outdir / f"{stem}.sites.csv").read_text().startswith("site,x,y,demand")
    assert "open-set changes" in capsys.readouterr().out


def test_sweep_patch(tmp_path):
    inst = generate(GenConfig(6, 2, seed=2))
    (i, j) = next(iter(inst.ambiguity))
    patch = tmp_path / "p.json"
    patch.write_text(json.dumps({"pairs": [{"i": i, "j": j, "gamma2": 5.0}]}))
    recs = sweep_gamma(inst, [0.0, 0.2], BnbOptions(), str(patch))
    assert len(recs) == 2 and not check_monotone(recs)
    patch.write_text(json.dumps({"pairs": [{"i": 99, "j": 0, "gamma2": 1.0}]}))
    with pytest.raises(Exception):
        sweep_gamma(inst, [0.0], BnbOptions(), str(patch))


def test_monotone_and_changes_helpers():
    recs = [{"gamma": 0.0, "objective": 10.0, "open_set": [1]},
            {"gamma": 0.2, "objective": 10.0 + 1e-7, "open_set": [1]},
            {"gamma": 0.4, "objective": 11.0, "open_set": [2]}]
    problems = check_monotone(recs)
    assert len(problems) == 1 and "0.4" in problems[0]
    assert open_set_changes(recs) == ["gamma 0.2 -> 0.4: [1] -> [2]"]


def test_example_command(capsys):
    assert main(["example-2-4"]) == 0
    out = capsys.readouterr().out
    assert "published" in out and "582" in out and "623.5" in out


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "rfl.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen", "solve", "compare", "sweep-gamma", "example-2-4"):
        assert cmd in proc.stdout
