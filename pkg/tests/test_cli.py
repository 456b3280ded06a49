import json

import numpy as np
import pytest

from tagged_mftg.cli import (
    EXIT_FAILED,
    EXIT_INVALID,
    EXIT_IO,
    EXIT_OK,
    bounding_box,
    density_grid,
    main,
    speed_profile,
)
from tagged_mftg.lq import arctan_profile
from tagged_mftg.scenarios import builtin, parse_scenario


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    return header, np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def read_density(path):
    with open(path) as fh:
        head = fh.readline()
    return head, np.loadtxt(path, comments="#", dtype=np.int64)


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "kt_set1" in out and "bidir" in out


def test_export_spec_round_trips(capsys, tmp_path):
    assert main(["export-spec", "--scenario", "kt_set1", "--set", "tagged.attr=10"]) == EXIT_OK
    spec = parse_scenario(capsys.readouterr().out)
    assert spec.tagged.attr == 10.0
    target = tmp_path / "s.scn"
    assert main(["export-spec", "--scenario", "bidir", "--out", str(target)]) == EXIT_OK
    assert parse_scenario(target.read_text()) == builtin("bidir")


def test_run_kt_artifacts(tmp_path):
    out = tmp_path / "kt"
    code = main(["run", "--scenario", "kt_set1", "--solver", "lq", "--paths", "1500", "--steps", "40",
                 "--out", str(out), "--max-paths", "25"])
    assert code == EXIT_OK
    header, paths = read_csv(out / "paths.csv")
    assert header[:2] == ["path", "t"] and paths.shape[0] == 41 * 25
    header, series = read_csv(out / "series.csv")
    assert series.shape[0] == 41 and "dist_to_mean_tagged" in header
    header, speed = read_csv(out / "speed.csv")
    assert speed.shape[0] == 40
    files = sorted((out / "density").iterdir())
    assert len(files) == 5
    for f in files:
        head, counts = read_density(f)
        assert counts.shape == (50, 50)
        assert counts.sum() == 1500
        assert "total=1500" in head
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["seed"] == 0 and meta["solver"] == "lq"
    assert parse_scenario(meta["scenario"]).solver.paths == 1500
    assert parse_scenario((out / "scenario.scn").read_text()) == parse_scenario(meta["scenario"])


def test_speed_follows_desired_velocity(tmp_path):
    out = tmp_path / "dv4"
    assert main(["run", "--scenario", "dv_set4", "--solver", "lq", "--paths", "300", "--out", str(out)]) == 0
    header, speed = read_csv(out / "speed.csv")
    expected = 10.0 / 10.5 * arctan_profile(speed[:, 0])
    assert np.allclose(speed[:, 1], expected, rtol=1e-12)


def test_conflicting_weights_rejected(tmp_path, capsys):
    code = main(["run", "--scenario", "kt_set1", "--set", "tagged.cont=0", "--set", "tagged.des=0",
                 "--out", str(tmp_path / "x")])
    assert code == EXIT_INVALID
    assert "tagged.cont" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_scenario_selection_errors(tmp_path):
    assert main(["run", "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert main(["run", "--scenario", "nope", "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert main(["run", "--scenario", "kt_set1", "--set", "bogus=1", "--out", str(tmp_path / "x")]) == EXIT_INVALID


def test_io_errors(tmp_path):
    assert main(["run", "--file", str(tmp_path / "missing.scn"), "--out", str(tmp_path / "x")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["run", "--scenario", "kt_set2", "--solver", "lq", "--paths", "50",
                 "--out", str(blocker / "sub")])
    assert code == EXIT_IO


def test_run_from_file(tmp_path):
    f = tmp_path / "my.scn"
    assert main(["export-spec", "--scenario", "dv_set1", "--set", "solver.paths=200", "--out", str(f)]) == 0
    assert main(["run", "--file", str(f), "--solver", "auto", "--out", str(tmp_path / "r")]) == EXIT_OK
    meta = json.loads((tmp_path / "r" / "metadata.json").read_text())
    assert meta["solver"] == "lq"


def test_non_convergence_exit_code_keeps_artifacts(tmp_path):
    out = tmp_path / "nc"
    code = main(["run", "--scenario", "bidir", "--paths", "300", "--set", "solver.max_iters=1",
                 "--out", str(out)])
    assert code == EXIT_FAILED
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["converged"] is False and len(diag["residuals"]) == 1
    assert (out / "paths.csv").exists()


def test_verify_convergence(tmp_path, capsys):
    report = tmp_path / "conv.json"
    assert main(["verify", "convergence", "--out", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    errs = [lvl["error"] for lvl in data["levels"]]
    assert errs[0] > errs[1] > errs[2]


def test_verify_oracles_small(tmp_path):
    report = tmp_path / "oracles.json"
    assert main(["verify", "oracles", "--scenario", "kt_set2", "--paths", "2000", "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["passed"] and len(data["checks"]) >= 5


def test_verify_oracles_needs_closed_form():
    assert main(["verify", "oracles", "--scenario", "bidir", "--paths", "100"]) == EXIT_INVALID


def test_verify_spike_small(tmp_path):
    report = tmp_path / "spike.json"
    code = main(["verify", "spike", "--scenario", "bidir", "--paths", "2000", "--trials", "30",
                 "--out", str(report)])
    data = json.loads(report.read_text())
    assert code == EXIT_OK and data["passed"]
    assert {"tagged", "ordinary", "tagged_detuned", "ordinary_detuned"} <= set(data["reports"])


def test_density_helpers():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]])
    box = bounding_box([pts])
    assert box == pytest.approx((-0.1, 1.1, -0.1, 1.1))
    counts = density_grid(pts, box, bins=4)
    assert counts.sum() == 3 and counts[0, 0] == 1 and counts[3, 3] == 1 and counts[3, 0] == 1


def test_speed_profile_length():
    from tagged_mftg.lq import solve_lq
    res = solve_lq(builtin("kt_set2").with_overrides({"solver.paths": 20, "solver.steps": 30}))
    assert speed_profile(res.ensemble).shape == (30,)
    with pytest.raises(Exception):
        speed_profile(res.ensemble, "ordinary")
