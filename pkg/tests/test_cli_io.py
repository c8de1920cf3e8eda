import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htiv.cli import main, run_command
from htiv.core import SequenceSpec, ValidationError
from htiv.factorial import estimate_factor_effect, estimate_joint_effect
from htiv.io import (
    RunReport,
    file_digest,
    load_factorial_csv,
    load_panel_csv,
    write_factorial_csv,
    write_panel_csv,
)
from htiv.panel import estimate_lag0_effect, estimate_lagp_effect, stack_lag0_effects
from htiv.simulation import gen_factorial_dgp, gen_panel_dgp

TOY = "z1,d1,y\n1,1,3\n1,1,1\n0,0,1\n0,0,1\n"


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text(TOY)
    return path


def test_load_toy_factorial(toy_csv):
    ds = load_factorial_csv(toy_csv, probs=[0.5])
    assert ds.n_units == 4
    assert estimate_factor_effect(ds, 1).point == 1.0


def test_probability_columns(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("z1,z2,d1,d2,y,pz1,pz2\n1,0,1,0,2.5,0.4,0.7\n0,1,0,1,1.0,0.4,0.7\n")
    ds = load_factorial_csv(path)
    assert ds.prob_matrix().tolist() == [[0.4, 0.7], [0.4, 0.7]]


def test_non_binary_entry_reports_line(tmp_path):
    rows = ["z1,d1,y"] + ["1,1,0.5"] * 5 + ["2,1,0.5"]
    path = tmp_path / "bad.csv"
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(ValidationError, match="line 7"):
        load_factorial_csv(path, probs=[0.5])


@pytest.mark.parametrize(
    "text,probs,msg",
    [
        ("z1,y\n1,2\n", [0.5], "missing columns"),
        ("", [0.5], "empty"),
        ("z1,d1,y\n", [0.5], "no data rows"),
        (TOY, [1.0], "common support"),
        (TOY, [0.5, 0.5], "expected 1"),
        (TOY, None, "supply --probs"),
        ("z1,d1,y\n1,1,abc\n", [0.5], "finite"),
    ],
)
def test_factorial_load_errors(tmp_path, text, probs, msg):
    path = tmp_path / "x.csv"
    path.write_text(text)
    with pytest.raises(ValidationError, match=msg):
        load_factorial_csv(path, probs=probs)


def test_panel_toy_loads(tmp_path):
    path = tmp_path / "panel.csv"
    path.write_text("unit,t,z,d,y\nb,2,1,1,3.5\na,1,1,1,2\na,2,0,0,1\nb,1,0,0,0\n")
    panel = load_panel_csv(path, probs=[0.5, 0.5])
    assert panel.z.tolist() == [[1, 0], [0, 1]]
    assert panel.y.tolist() == [[2.0, 1.0], [0.0, 3.5]]


def test_unbalanced_panel_lists_units(tmp_path):
    path = tmp_path / "panel.csv"
    path.write_text("unit,t,z,d,y\n1,1,1,1,2\n1,2,0,0,1\n2,1,0,0,0\n")
    with pytest.raises(ValidationError, match=r"unbalanced.*\[2\]"):
        load_panel_csv(path, probs=[0.5, 0.5])


def test_panel_duplicate_rows(tmp_path):
    path = tmp_path / "panel.csv"
    path.write_text("unit,t,z,d,y\n1,1,1,1,2\n1,1,0,0,1\n")
    with pytest.raises(ValidationError, match="line 3"):
        load_panel_csv(path, probs=[0.5])


def test_factorial_round_trip_bit_identical(tmp_path):
    data, _ = gen_factorial_dgp(123, 1000)
    path = tmp_path / "rep.csv"
    write_factorial_csv(data, path)
    back = load_factorial_csv(path)
    assert np.array_equal(back.y, data.y)
    spec = SequenceSpec(2, 1, (1, 1), (0, 0))
    assert estimate_joint_effect(back, spec) == estimate_joint_effect(data, spec)
    assert estimate_factor_effect(back, 2) == estimate_factor_effect(data, 2)


def test_panel_round_trip_bit_identical(tmp_path):
    data, _ = gen_panel_dgp(321, 1000, adaptive=0.2)
    path = tmp_path / "rep.csv"
    write_panel_csv(data, path)
    back = load_panel_csv(path)
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.prob_matrix(), data.prob_matrix())
    spec = SequenceSpec(2, 1, (1, 0), (0, 0))
    assert estimate_lagp_effect(back, spec) == estimate_lagp_effect(data, spec)
    assert estimate_lag0_effect(back, 2) == estimate_lag0_effect(data, 2)
    assert stack_lag0_effects(back) == stack_lag0_effects(data)


def test_digest_tracks_content(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text(TOY)
    b.write_text(TOY)
    assert file_digest(a) == file_digest(b)
    b.write_text(TOY.replace("3\n", "4\n", 1))
    assert file_digest(a) != file_digest(b)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.lists(
        st.tuples(
            st.floats(allow_nan=False, allow_infinity=False, width=64),
            st.floats(allow_nan=False, allow_infinity=False),
            st.booleans(),
        ),
        min_size=1,
        max_size=5,
    ),
    wall=st.floats(0, 1e6),
)
def test_report_round_trip(rows, wall):
    estimates = [
        {"label": f"r{i}", "point": p, "fs": f, "var_bound": 0.0, "ci_lo": p, "ci_hi": p, "alpha": 0.05, "weak_fs": w}
        for i, (p, f, w) in enumerate(rows)
    ]
    report = RunReport(["htiv", "x"], "abc", estimates, ["careful"], wall)
    assert RunReport.from_json(report.to_json()) == report


def test_report_rejects_inverted_interval():
    with pytest.raises(ValidationError):
        RunReport(["htiv"], None, [{"label": "a", "ci_lo": 1.0, "ci_hi": 0.0}])


def test_cli_toy_uncentered(toy_csv, tmp_path, capsys):
    out = tmp_path / "r.json"
    code = main(["estimate-factorial", "--data", str(toy_csv), "--factor", "1", "--alpha", "0.05",
                 "--probs", "0.5", "--bound", "uncentered", "--json", str(out)])
    assert code == 0
    row = json.loads(out.read_text())["estimates"][0]
    assert {"point", "fs", "var_bound", "ci_lo", "ci_hi", "alpha", "weak_fs"} <= set(row)
    assert row["point"] == 1.0
    assert (round(row["ci_lo"], 2), round(row["ci_hi"], 2)) == (-2.39, 4.39)
    assert "factor_1" in capsys.readouterr().out


def test_cli_joint_and_csv(tmp_path):
    data, _ = gen_factorial_dgp(5, 800)
    path = tmp_path / "d.csv"
    write_factorial_csv(data, path)
    out = tmp_path / "r.csv"
    code, report = run_command(["estimate-factorial", "--data", str(path), "--range", "1:2", "--d", "11",
                                "--dtilde", "00", "--probs", "0.5,0.5", "--csv", str(out)])
    assert code == 0
    assert report.input_digest == file_digest(path)
    assert out.read_text().splitlines()[0].startswith("label,point,fs,var_bound,ci_lo,ci_hi,alpha,weak_fs")
    row = report.estimates[0]
    assert row["ci_lo"] <= row["point"] <= row["ci_hi"]


def test_cli_response_and_compliance(tmp_path):
    data, _ = gen_factorial_dgp(6, 800)
    path = tmp_path / "d.csv"
    write_factorial_csv(data, path)
    code, report = run_command(["estimate-factorial", "--data", str(path), "--range", "1:2", "--d", "10"])
    assert code == 0 and report.estimates[0]["label"].startswith("response")
    code, report = run_command(["compliance-table", "--data", str(path), "--range", "1:2"])
    assert code == 0
    assert [np.sign(r["fs"]) for r in report.estimates] == [1, -1, -1, 1]


def test_cli_panel(tmp_path):
    data, _ = gen_panel_dgp(7, 800)
    path = tmp_path / "p.csv"
    write_panel_csv(data, path)
    for extra in (["--t", "2"], ["--t", "2", "--lag", "1", "--d", "11", "--dtilde", "00"], ["--stack"],
                  ["--t", "2", "--lag", "1", "--d", "01"]):
        code, report = run_command(["estimate-panel", "--data", str(path), *extra])
        assert code == 0, extra
    code, report = run_command(["compliance-table", "--data", str(path), "--range", "1:2", "--design", "panel"])
    assert code == 0 and len(report.estimates) == 4


def test_cli_exit_codes(toy_csv, tmp_path, capsys):
    assert main(["estimate-factorial", "--data", str(toy_csv), "--factor", "1", "--probs", "0.5", "--nope"]) == 64
    assert main(["frobnicate"]) == 64
    assert "usage" in capsys.readouterr().err
    assert main(["estimate-factorial", "--data", str(toy_csv), "--factor", "2", "--probs", "0.5"]) == 2
    assert main(["estimate-factorial", "--data", str(tmp_path / "missing.csv"), "--factor", "1"]) == 2
    flat = tmp_path / "flat.csv"
    flat.write_text("z1,d1,y\n1,0,1\n0,0,2\n")
    assert main(["estimate-factorial", "--data", str(flat), "--factor", "1", "--probs", "0.5"]) == 3
    assert main(["estimate-panel", "--data", str(toy_csv)]) == 2


def test_cli_weak_first_stage_warning(tmp_path):
    rng = np.random.default_rng(0)
    n = 500
    z = rng.integers(0, 2, n)
    d = z * (rng.random(n) < 0.05)
    path = tmp_path / "weak.csv"
    path.write_text("z1,d1,y\n" + "".join(f"{a},{b},{c}\n" for a, b, c in zip(z, d, rng.normal(size=n))))
    code, report = run_command(["estimate-factorial", "--data", str(path), "--factor", "1", "--probs", "0.5"])
    assert code == 0
    assert report.estimates[0]["weak_fs"]
    assert any("weak first stage" in w for w in report.warnings)


def test_cli_simulate_and_decompose(tmp_path, capsys):
    cfg = tmp_path / "t1.cfg"
    cfg.write_text("[simulate]\nprofile = factorial\nn_units = 300\nn_reps = 3\nseed = 1\n")
    out_json, out_csv = tmp_path / "m.json", tmp_path / "m.csv"
    assert main(["simulate", "--config", str(cfg), "--json", str(out_json), "--csv", str(out_csv)]) == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["joint_11_00", "joint_10_00", "joint_01_00", "factor_1", "factor_2"]
    assert set(json.loads(out_json.read_text())["targets"]) == set(header)
    pcfg = tmp_path / "p.cfg"
    pcfg.write_text("[simulate]\nprofile = panel\nn_units = 300\nseed = 2\nadaptive_assignment = 0.2\n")
    code, report = run_command(["decompose", "--config", str(pcfg)])
    assert code == 0
    row = report.estimates[0]
    rebuilt = row["complier_term"] + row["carryover_terms"][0] - row["carryover_terms"][1] + row["covariance_term"]
    assert rebuilt == pytest.approx(row["beta_rf"], abs=1e-12)
    assert main(["decompose", "--config", str(cfg)]) == 2


def test_simulate_worker_env_is_deterministic(tmp_path, monkeypatch):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("[simulate]\nprofile = panel\nn_units = 200\nn_reps = 6\nseed = 4\n")
    outs = []
    for workers in ("1", "3"):
        monkeypatch.setenv("HTIV_WORKERS", workers)
        out = tmp_path / f"m{workers}.json"
        assert main(["simulate", "--config", str(cfg), "--json", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
