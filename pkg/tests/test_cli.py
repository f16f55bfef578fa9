import json
from pathlib import Path

import numpy as np
import pytest

from mflq.cli import main
from mflq.model import dump_model, paper_example

from _support import scalar_model


@pytest.fixture()
def bench_files(tmp_path):
    model = tmp_path / "model.json"
    model.write_text(dump_model(paper_example()))
    sol = tmp_path / "sol.json"
    assert main(["solve", str(model), "--out", str(sol)]) == 0
    return model, sol


def test_validate_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(dump_model(paper_example()))
    assert main(["validate", str(good)]) == 0
    assert "0.75" in capsys.readouterr().out

    m = paper_example()
    R = np.array(m.R)
    R[0] = 0.0
    bad = tmp_path / "bad.json"
    bad.write_text(dump_model(m.replace(R=R)))
    assert main(["validate", str(bad)]) == 1
    assert "(H2) violated: R(1) not positive definite" in capsys.readouterr().out

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["validate", str(broken)]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 2


def test_validate_manifest(tmp_path):
    man = tmp_path / "run.json"
    assert main(["validate", "@benchmark", "--manifest", str(man)]) == 0
    doc = json.loads(man.read_text())
    assert doc["command"] == "validate" and doc["config"]["model"] == "@benchmark"


def test_solve_outputs(bench_files, capsys):
    _, sol = bench_files
    doc = json.loads(sol.read_text())
    np.testing.assert_allclose(np.ravel(doc["P"]), [0.361, 0.259, 0.171, 0.117], atol=2e-3)
    man = json.loads((sol.parent / "sol.json.manifest.json").read_text())
    assert man["outputs"] == [str(sol)]
    assert all(Path(p).exists() for p in man["outputs"])


def test_solve_zero_weights(tmp_path):
    m = paper_example()
    z = np.zeros_like(m.Q)
    f = tmp_path / "m.json"
    f.write_text(dump_model(m.replace(Q=z, Qhat=z)))
    out = tmp_path / "s.json"
    assert main(["solve", str(f), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert np.all(np.array(doc["P"]) == 0) and doc["iterations1"] == 1


def test_solve_scalar(tmp_path, capsys):
    f = tmp_path / "m.json"
    f.write_text(dump_model(scalar_model()))
    assert main(["solve", str(f)]) == 0
    assert "0.618034" in capsys.readouterr().out


def test_solve_non_convergence(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["solve", "@benchmark", "--max-iter", "2", "--out", str(out)]) == 1
    assert "iteration" in capsys.readouterr().err
    assert not out.exists()


def test_simulate_byte_identical(bench_files, tmp_path):
    model, sol = bench_files
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = [str(model), str(sol), "--T", "1", "--h", "1e-2", "--paths", "3", "--seed", "5"]
    assert main(["simulate", *args, "--out", str(a)]) == 0
    assert main(["simulate", *args, "--out", str(b), "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "path_id,t,regime,X_1,Xhat_1,u_1"


def test_simulate_zero_state(bench_files, tmp_path):
    model, sol = bench_files
    out = tmp_path / "z.csv"
    assert main(["simulate", str(model), str(sol), "--x0", "0", "--T", "1", "--h", "1e-2", "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    assert all(float(v) == 0.0 for r in rows for v in r[3:5])


def test_simulate_input_errors(bench_files):
    model, sol = bench_files
    assert main(["simulate", str(model), str(sol), "--i0", "5"]) == 2
    assert main(["simulate", str(model), str(sol), "--x0", "1,2"]) == 2
    assert main(["simulate", str(model), str(sol), "--h", "10", "--T", "1"]) == 2


def _evaluate(model, sol, *extra):
    return main(["evaluate", str(model), str(sol), "--paths", "400", "--h", "2e-3", *extra])


def test_evaluate_pass_and_zero_state(bench_files, tmp_path):
    model, sol = bench_files
    rep = tmp_path / "rep.json"
    assert _evaluate(model, sol, "--out", str(rep)) == 0
    doc = json.loads(rep.read_text())
    for key in ("mean", "standard_error", "paths", "T", "h", "tail_bound", "analytic_value", "z_score", "pass"):
        assert key in doc
    assert doc["analytic_value"] == pytest.approx(0.5 * json.loads(sol.read_text())["Ptilde"][0][0][0])
    assert _evaluate(model, sol, "--x0", "0", "--out", str(rep)) == 0
    doc = json.loads(rep.read_text())
    assert doc["mean"] == 0.0 and doc["all_pass"]


def test_evaluate_perturbed_solution_fails(bench_files, tmp_path):
    model, sol = bench_files
    doc = json.loads(sol.read_text())
    doc["Theta"] = (np.array(doc["Theta"]) + 0.5).tolist()
    doc["ThetaHat"] = (np.array(doc["ThetaHat"]) + 0.5).tolist()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    rep = tmp_path / "rep.json"
    assert _evaluate(model, bad, "--out", str(rep)) == 1
    assert not json.loads(rep.read_text())["stationarity"]["pass"]


def test_evaluate_dimension_mismatch(tmp_path, bench_files):
    _, sol = bench_files
    f = tmp_path / "m.json"
    f.write_text(dump_model(scalar_model()))
    assert main(["evaluate", str(f), str(sol), "--paths", "10"]) == 2


def test_reproduce_refuses_nonempty_dir(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["reproduce", "--out-dir", str(out)]) == 2
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_reproduce_small_run(tmp_path):
    out = tmp_path / "out"
    assert main(["reproduce", "--out-dir", str(out), "--paths", "500", "--h", "2e-3"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    for path in man["outputs"]:
        assert Path(path).exists()
    summary = (out / "summary.csv").read_text()
    assert summary.startswith("quantity,regime,computed,printed,delta,note")
    assert "ThetaHat,1" in summary and "not reproducible" in summary
    # --force allows reuse
    assert main(["reproduce", "--out-dir", str(out), "--paths", "200", "--h", "2e-3", "--force"]) == 0
