import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from transpoint import InputError, StudyData, estimate_varcomp
from transpoint.cli import main
from transpoint.io import (
    MANIFEST_SCHEMA,
    DatasetManifest,
    export_synthetic,
    load_toml,
    read_study_csv,
    top_k_correlated,
    write_study_csv,
)
from transpoint.simulation import theoretical_taus

pytestmark = pytest.mark.filterwarnings("ignore::transpoint.varcomp.FewStudiesWarning")

SMALL_CONFIG = """\
seed = 42
replicates = 200
learners = ["ls", "ridge"]
sigma_eps2 = 1.0

[design]
train_studies = 3
test_studies = 2
n = 20
p = 4
intercept = false
seed = 3

[effects]
re_columns = [0, 1]
beta = [1.0, -0.5, 0.25, 0.0]

[grid]
sigma_bar2 = [0.0, 0.1]
tau_multiples = [1.0, 2.0]

[ridge]
lambda = 1.0
scaling = "inverse-sd"
"""


def bundled_config():
    return str(resources.files("transpoint") / "configs" / "fig1_desk.toml")


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "sim.toml"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def dataset(tmp_path, rng):
    """Three training studies and one test study with a strong x2 signal."""
    studies = []
    for k in range(4):
        X = np.column_stack([np.ones(30), rng.standard_normal((30, 3))])
        Y = X @ np.array([0.5, 0.1, 3.0, 0.0]) + rng.standard_normal(30)
        studies.append(StudyData(X, Y, id=f"s{k}"))
    path = export_synthetic(tmp_path / "data", studies[:3], studies[3:], ("x1", "x2", "x3"), True,
                            ["(intercept)", "x1"])
    return path, studies


class TestCsv:
    @settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(arrays(np.float64, (6, 3), elements=st.floats(-1e300, 1e300, allow_nan=False, allow_subnormal=True)))
    def test_round_trip_bit_exact(self, tmp_path, values):
        X = np.column_stack([np.ones(6), values[:, :2]])
        s = StudyData(X, values[:, 2])
        path = tmp_path / "s.csv"
        write_study_csv(path, s, "y", ["a", "b"], intercept=True)
        back = read_study_csv(path, "y", ["a", "b"], intercept=True)
        assert np.array_equal(back.X, s.X) and np.array_equal(back.Y, s.Y)

    def test_only_declared_columns(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("junk,y,a\nfoo,1.0,2.0\nbar,3.0,4.0\n")
        s = read_study_csv(path, "y", ["a"], intercept=False)
        np.testing.assert_array_equal(s.X, [[2.0], [4.0]])

    @pytest.mark.parametrize("cell", ["", "NA", "nan", "inf"])
    def test_missing_or_nonfinite_rejected_with_line(self, tmp_path, cell):
        path = tmp_path / "s.csv"
        path.write_text(f"y,a\n1.0,2.0\n3.0,{cell}\n")
        with pytest.raises(InputError, match=r"s\.csv:3"):
            read_study_csv(path, "y", ["a"])

    def test_missing_column(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("y,a\n1,2\n")
        with pytest.raises(InputError, match="missing column"):
            read_study_csv(path, "y", ["a", "b"])


class TestManifest:
    def test_schema_error_names_line(self, tmp_path):
        path = tmp_path / "m.toml"
        path.write_text('outcome = "y"\npredictors = ["a"]\nintercept = "yes"\n\n[[studies]]\npath = "a.csv"\n')
        with pytest.raises(InputError, match="line 3"):
            load_toml(path, MANIFEST_SCHEMA)

    def test_unknown_random_effect(self, tmp_path):
        path = tmp_path / "m.toml"
        path.write_text('outcome = "y"\npredictors = ["a"]\nrandom_effects = ["b"]\n\n[[studies]]\npath = "a.csv"\n')
        with pytest.raises(InputError, match="random_effects"):
            DatasetManifest.load(path)

    def test_round_trip(self, dataset):
        path, studies = dataset
        man = DatasetManifest.load(path)
        assert man.columns == ("(intercept)", "x1", "x2", "x3")
        assert man.re_columns == (0, 1)
        train, test = man.load_studies()
        assert [s.id for s in train] == ["s0", "s1", "s2"]
        assert np.array_equal(test[0].Y, studies[3].Y)

    def test_top_k_correlated(self, dataset):
        path, _ = dataset
        man = DatasetManifest.load(path)
        train, _ = man.load_studies()
        assert top_k_correlated(train, man, 1) == ("x2",)
        sub = man.select(("x2",))
        assert sub.columns == ("(intercept)", "x2")
        assert sub.random_effects == ("(intercept)",)


class TestCliBasics:
    def test_print_schema(self, capsys):
        code, out, _ = run_cli(capsys, "analyze", "--print-schema")
        assert code == 0
        assert json.loads(out)["required"] == MANIFEST_SCHEMA["required"]

    def test_single_training_study_exit_5(self, tmp_path, capsys, rng):
        X = np.column_stack([np.ones(10), rng.standard_normal(10)])
        s = [StudyData(X, rng.standard_normal(10), id=i) for i in ("a", "b")]
        path = export_synthetic(tmp_path, s[:1], s[1:], ("x1",), True)
        code, _, err = run_cli(capsys, "analyze", path)
        assert code == 5 and "training studies" in err

    def test_no_test_study_exit_2(self, tmp_path, capsys, rng):
        X = np.column_stack([np.ones(10), rng.standard_normal(10)])
        s = [StudyData(X, rng.standard_normal(10), id=i) for i in ("a", "b")]
        path = export_synthetic(tmp_path, s, [], ("x1",), True)
        code, _, _ = run_cli(capsys, "analyze", path)
        assert code == 2

    def test_missing_file_exit_2(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "analyze", tmp_path / "nope.toml")
        assert code == 2 and "cannot read" in err

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "transpoint.cli", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and "transpoint" in proc.stdout


class TestAnalyzeAndVarcomp:
    def test_analyze_json(self, dataset, capsys, tmp_path):
        path, _ = dataset
        code, out, _ = run_cli(capsys, "analyze", path, "--bootstrap", 100, "--out-dir", tmp_path / "o")
        assert code == 0
        d = json.loads(out)
        assert d["recommendation"] in ("merge", "ensemble", "indeterminate")
        assert {s["arm"] for s in d["test_rmspe"]} >= {"merged", "ensemble-equal"}
        assert (tmp_path / "o" / "analysis.json").read_text() == out

    def test_analyze_csv(self, dataset, capsys):
        path, _ = dataset
        code, out, _ = run_cli(capsys, "analyze", path, "--bootstrap", 100, "--format", "csv", "--learner", "ls")
        assert code == 0 and out.startswith("section,learner,name,value")

    def test_varcomp_matches_library(self, dataset, capsys):
        path, _ = dataset
        code, out, _ = run_cli(capsys, "varcomp", path)
        man = DatasetManifest.load(path)
        train, _ = man.load_studies()
        vc = estimate_varcomp(train, man.re_columns)
        d = json.loads(out)
        assert code == 0
        assert d["sigma_eps_hat2"] == vc.sigma_eps_hat2
        assert [c["sigma_hat2"] for c in d["coefficients"]] == vc.sigma_hat2.tolist()

    def test_weights_manifest_sum_to_one(self, dataset, capsys):
        path, _ = dataset
        code, out, _ = run_cli(capsys, "weights", "--manifest", path, "--learner", "ls")
        assert code == 0
        w = json.loads(out)["ls"]["weights"]
        assert sum(w.values()) == pytest.approx(1.0)


class TestTransitionCli:
    def test_point_equals_single_group_interval(self, small_config, capsys):
        code, out, err = run_cli(capsys, "transition", "--config", small_config, "--learner", "ls")
        assert code == 0
        point, interval = json.loads(out)["results"]
        assert point["kind"] == "point" and interval["kind"] == "interval"
        assert interval["tau_lower"] == pytest.approx(point["tau_lower"], rel=1e-12)
        assert interval["tau_upper"] == pytest.approx(point["tau_lower"], rel=1e-12)
        assert "sqrt" in err

    def test_ridge_lambda_zero_matches_ls(self, small_config, capsys):
        _, out, _ = run_cli(capsys, "transition", "--config", small_config, "--lambda", 0, "--scaling", "none")
        res = {(r["learner"], r["kind"]): r for r in json.loads(out)["results"]}
        assert res["ridge", "point"]["tau_lower"] == pytest.approx(res["ls", "point"]["tau_lower"], rel=1e-9)

    def test_identical_studies_degenerate(self, tmp_path, capsys, rng):
        X = np.column_stack([np.ones(15), rng.standard_normal((15, 2))])
        Y = rng.standard_normal(15)
        train = [StudyData(X, Y, id=f"t{k}") for k in range(3)]
        test = [StudyData(X, Y, id="test")]
        path = export_synthetic(tmp_path, train, test, ("a", "b"), True)
        code, out, _ = run_cli(capsys, "transition", "--manifest", path, "--learner", "ls")
        assert code == 3
        assert "degenerate" in json.loads(out)["diagnosis"][0]

    def test_weights_config(self, small_config, capsys):
        code, out, _ = run_cli(capsys, "weights", "--config", small_config, "--sigma-bar2", 0.2)
        d = json.loads(out)
        assert code == 0
        for name in ("ls", "ridge"):
            assert sum(d[name]["weights"].values()) == pytest.approx(1.0)
            assert d[name]["objective"] <= d[name]["equal_weights_objective"] * (1 + 1e-12)


class TestSimulateCli:
    def test_rejects_few_replicates(self, small_config, capsys):
        code, _, err = run_cli(capsys, "simulate", small_config, "--replicates", 50)
        assert code == 2 and "replicates" in err

    def test_outputs_identical_across_runs_and_threads(self, small_config, tmp_path, capsys):
        outs = []
        for i, threads in enumerate((1, 1, 3)):
            d = tmp_path / f"run{i}"
            assert run_cli(capsys, "simulate", small_config, "--out-dir", d, "--threads", threads)[0] == 0
            outs.append(((d / "sweep.csv").read_bytes(), (d / "sweep.json").read_bytes()))
        assert outs[0] == outs[1] == outs[2]

    def test_seed_override_changes_output(self, small_config, tmp_path, capsys):
        run_cli(capsys, "simulate", small_config, "--out-dir", tmp_path / "a")
        run_cli(capsys, "simulate", small_config, "--out-dir", tmp_path / "b", "--seed", 7)
        assert (tmp_path / "a" / "sweep.csv").read_bytes() != (tmp_path / "b" / "sweep.csv").read_bytes()

    def test_bundled_config_covers_theory(self, tmp_path, capsys):
        from transpoint.io import load_sweep_config

        code, out, _ = run_cli(capsys, "simulate", bundled_config(), "--out-dir", tmp_path)
        assert code == 0
        summary = json.loads((tmp_path / "sweep.json").read_text())
        tau = theoretical_taus(load_sweep_config(bundled_config()))
        for name in ("ls", "ridge"):
            emp = summary["learners"][name]["empirical_transition"]
            assert emp["lower"] <= tau[name].tau <= emp["upper"]
        assert "self-check: 22/22" in out

    def test_gen_then_analyze(self, small_config, tmp_path, capsys):
        code, out, _ = run_cli(capsys, "gen", small_config, "--out-dir", tmp_path / "g", "--sigma-bar2", 0.0)
        assert code == 0
        man = DatasetManifest.load(tmp_path / "g" / "manifest.toml")
        train, test = man.load_studies()
        assert len(train) == 3 and len(test) == 2
        code, out, _ = run_cli(capsys, "analyze", tmp_path / "g" / "manifest.toml", "--bootstrap", 100)
        assert code == 0
