import csv
import json

import pytest

from kamflow.cli import RunConfig, load_config, main, thread_count


def write(path, obj):
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(path)


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def run(tmp_path, command, config=None, *extra):
    out = tmp_path / "out"
    args = [command, "--out", str(out), "--threads", "1", *extra]
    if config is not None:
        args += ["--config", write(tmp_path / "config.json", config)]
    return main(args), out


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.mode == "integrable" and cfg.model.kind == "reference" and cfg.numerics.K == 16


def test_malformed_json_reports_position(tmp_path, capsys):
    code, _ = run(tmp_path, "solve", '{\n  "mode": "integrable",\n  "seed": \n}')
    assert code == 1
    assert "line 4, column 1" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    code, _ = run(tmp_path, "solve", {"numerics": {"K": 8, "Kmax": 3}})
    assert code == 1
    assert "numerics.Kmax" in capsys.readouterr().err


def test_mode_must_match_flat_set(tmp_path):
    code, _ = run(tmp_path, "solve", {"model": {"kind": "near_integrable"}})
    assert code == 1
    with pytest.raises(ValueError):
        load_config(write(tmp_path / "c.json", {"mode": "near-integrable"}))


def test_thread_count_precedence(monkeypatch):
    monkeypatch.setenv("KAMFLOW_THREADS", "3")
    assert thread_count(None) == 3
    assert thread_count(2) == 2
    monkeypatch.delenv("KAMFLOW_THREADS")
    assert thread_count(None) >= 1


def test_tail_constants_table(tmp_path):
    code, out = main(["tail-constants", "--out", str(tmp_path), "--m", "2", "3", "--t", "1000"]), tmp_path
    assert code == 0
    version, rows = read_csv(out / "tail_constants.csv")
    assert version == "# kamflow tail_constants v1"
    assert list(rows[0]) == ["m", "t", "f_m", "g_m", "f_limit", "g_limit"]
    f = {float(r["m"]): float(r["f_m"]) for r in rows}
    assert f[2.0] == pytest.approx(1.0, rel=0.02) and f[3.0] == pytest.approx(0.5, rel=0.02)


def test_unperturbed_solve_has_zero_corrections(tmp_path):
    code, out = run(tmp_path, "solve", {"model": {"kind": "unperturbed"}})
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["failures"] == [] and summary["max_deviation_c1_surrogate"] == 0.0
    assert all(c["iterations"] == 0 for c in summary["converged"])
    assert len(list((out / "corrections").glob("*.npz"))) == 2


@pytest.fixture(scope="module")
def reference_solve(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("solve")
    code, out = run(tmp, "solve", {"params": {"points": [[0.3], [-0.2]]}})
    return code, out


def test_reference_solve_contracts(reference_solve):
    code, out = reference_solve
    assert code == 0
    version, rows = read_csv(out / "residuals.csv")
    assert version == "# kamflow residuals v1"
    assert list(rows[0]) == ["branch", "p0_0", "iter", "residual", "ratio"]
    late = [float(r["ratio"]) for r in rows if int(r["iter"]) >= 2]
    assert late and max(late) <= 0.5
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["converged"]) == 4 and summary["empirical_C0"] > 0


def test_resolved_config_reproduces_outputs(reference_solve, tmp_path):
    _, first = reference_solve
    resolved = first / "resolved_config.json"
    second = tmp_path / "again"
    assert main(["solve", "--config", str(resolved), "--out", str(second), "--threads", "2"]) == 0
    for name in ("resolved_config.json", "summary.json", "residuals.csv"):
        assert (second / name).read_bytes() == (first / name).read_bytes()


def test_partial_solve_names_condition(tmp_path):
    code, out = run(tmp_path, "solve", {"params": {"points": [[0.1], [0.8]], "branches": [1]}})
    assert code == 2
    failures = json.loads((out / "summary.json").read_text())["failures"]
    assert len(failures) == 1 and failures[0]["condition"].startswith("domain")


def test_unperturbed_glue_keeps_action(tmp_path):
    targets = write(tmp_path / "targets.json", [[0.25, 0.4]])
    code, out = run(tmp_path, "glue", {"model": {"kind": "unperturbed"}, "glue": {"points": 5, "t_max": 100.0}},
                    "--targets", targets)
    assert code == 0
    version, rows = read_csv(out / "glue" / "orbit_0000.csv")
    assert version == "# kamflow orbit v1"
    assert list(rows[0]) == ["t", "q_0", "p_0", "deviation_plus", "deviation_minus"]
    assert len(rows) == 11 and {float(r["p_0"]) for r in rows} == {0.4}
    orbit = json.loads((out / "glue" / "orbit_0000.json").read_text())
    assert orbit["omega_plus"] == orbit["omega_minus"] == [0.4]


def test_glue_rejects_outside_half_ball(tmp_path):
    code, out = run(tmp_path, "glue", {"glue": {"targets": [[0.1, 0.7]], "points": 5}})
    assert code == 2
    _, rows = read_csv(out / "rejects.csv")
    assert len(rows) == 1 and "T^n × B_{1/2}" in rows[0]["reason"]
    assert float(rows[0]["margin"]) >= 0.0


def test_reference_glue_series(tmp_path):
    code, out = run(tmp_path, "glue", {"model": {"drift": 1.0}, "glue": {"random_targets": 2, "points": 12}})
    assert code == 0
    _, summary = read_csv(out / "glue_summary.csv")
    assert [r["glued"] for r in summary] == ["True", "True"]
    assert all(abs(float(r["slope_plus"]) + 2.0) <= 0.2 for r in summary)


def verify_config(seed):
    return {"seed": seed, "verify": {"checks": ["tail_constants", "linearized_roundtrip", "norm_algebra"],
                                     "roundtrip_instances": 2, "norm_instances": 5}}


def test_verify_independent_of_seed_for_fixed_suites(tmp_path, capsys):
    reports = []
    for seed in (0, 7):
        base = tmp_path / str(seed)
        base.mkdir()
        code, out = run(base, "verify", verify_config(seed))
        assert code == 0
        reports.append((out / "verify.json").read_bytes())
    assert reports[0] == reports[1]
    assert "norm_algebra: PASS" in capsys.readouterr().out
    report = json.loads(reports[0])
    assert report["all_passed"] and "seconds" not in json.dumps(report)


def test_verify_determinism_check(tmp_path):
    cfg = {"verify": {"checks": ["determinism"], "roundtrip_instances": 2, "norm_instances": 5}}
    code, out = run(tmp_path, "verify", cfg)
    assert code == 0
    report = json.loads((out / "verify.json").read_text())
    assert report["checks"]["determinism"]["values"]["identical"] is True
    assert json.loads((out / "timings.json").read_text()).keys() == {"determinism"}
