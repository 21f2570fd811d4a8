import csv

import numpy as np
import pytest
import yaml

from simred import __version__
from simred.cli import EXIT_FAILED, EXIT_OK, main
from simred.config import build_problem, load_config_file, resolve_config, user_problem, user_system
from simred.models import enzyme_system, make_enzyme_problem

ENZYME_SPEC = {
    "name": "enzyme-user",
    "slow_states": ["x"],
    "fast_states": ["y"],
    "controls": ["u"],
    "constants": {"eps": 0.01},
    "rhs_slow": ["-x + (x + 0.5) * y + u"],
    "rhs_fast": ["(x - (x + 1) * y) / eps"],
    "running_cost": "-50 * y + u**2",
    "horizon": 5.0,
    "initial": {"x": [1.0], "y": [0.5]},
    "bounds": {"x": [0, 5.5], "y": [0, 5.5], "u": [0, 5.5]},
    "n_intervals": 40,
}


def read_header(path):
    return [ln[2:] for ln in path.read_text().splitlines() if ln.startswith("# ")]


class TestResolve:
    def test_defaults(self):
        cfg = resolve_config({"problem": "vr"})
        assert cfg.eps == 0.2 and cfg.n_intervals == 10 and cfg.tol == 1e-3

    def test_precedence(self):
        cfg = resolve_config({"problem": "enzyme", "eps": 1e-3, "tol": None},
                             {"eps": 5e-3, "tol": 1e-6, "n_intervals": 12})
        assert cfg.eps == 1e-3          # flag over file
        assert cfg.tol == 1e-6          # file over default
        assert cfg.n_intervals == 12
        assert cfg.integ_tol == 1e-6    # default

    def test_hash_tracks_numeric_settings_only(self):
        a = resolve_config({"problem": "enzyme", "out": "a"})
        b = resolve_config({"problem": "enzyme", "out": "b"})
        c = resolve_config({"problem": "enzyme", "eps": 2e-2})
        assert a.hash() == b.hash() != c.hash()

    @pytest.mark.parametrize("flags", [{"mode": "sideways"}, {"problem": "pendulum"}, {"colour": "red"},
                                       {"mode": "reduced-offline", "problem": "user-free"}])
    def test_invalid(self, flags):
        with pytest.raises(ValueError):
            resolve_config(flags)

    def test_offline_needs_table(self):
        with pytest.raises(ValueError):
            resolve_config({"problem": {"rhs_slow": []}, "mode": "reduced-offline"})

    def test_paths_resolved(self, tmp_path):
        cfg_file = tmp_path / "run.yaml"
        cfg_file.write_text(yaml.safe_dump({"problem": "vr", "out": "results", "table_path": "t.txt"}))
        cfg = resolve_config({}, load_config_file(cfg_file))
        assert cfg.out == str(tmp_path / "results") and cfg.table_path == str(tmp_path / "t.txt")

    def test_build_problem_overrides(self):
        cfg = resolve_config({"problem": "enzyme", "x0": [2.0, 0.1], "n_intervals": 7})
        cfg.bounds = {"u": [0.0, 2.0]}
        ocp = build_problem(cfg)
        assert ocp.initial_slow[0] == 2.0 and ocp.initial_fast[0] == 0.1 and ocp.n_intervals == 7
        assert ocp.u_bounds[1][0] == 2.0

    def test_enzyme_x0_length(self):
        with pytest.raises(ValueError):
            build_problem(resolve_config({"problem": "enzyme", "x0": [1.0, 2.0, 3.0]}))


class TestUserModel:
    def test_matches_builtin_enzyme(self, rng):
        ref = enzyme_system(0.01)
        usr = user_system(ENZYME_SPEC)
        for _ in range(10):
            x, y, u = rng.uniform(0, 3, 3)
            z = np.array([x, y])
            np.testing.assert_allclose(usr.F(z, [u]), ref.F(z, [u]), rtol=1e-13)
            np.testing.assert_allclose(usr.J(z, [u]), ref.J(z, [u]), rtol=1e-13)
            np.testing.assert_allclose(usr.Ju(z, [u]), ref.Ju(z, [u]), rtol=1e-13)

    def test_problem_matches_builtin(self, rng):
        ref = make_enzyme_problem(0.01)
        usr = user_problem(ENZYME_SPEC)
        assert usr.horizon == ref.horizon and usr.n_intervals == ref.n_intervals
        x, y, u = rng.uniform(0, 3, (3, 1))
        assert usr.cost(x, y, u) == pytest.approx(ref.cost(x, y, u))
        for a, b in zip(usr.cost_grad(x, y, u), ref.cost_grad(x, y, u)):
            np.testing.assert_allclose(a, b)

    def test_eps_override(self):
        sys = user_system(ENZYME_SPEC, eps=1e-3)
        np.testing.assert_allclose(sys.F([1.0, 0.0], [0.0])[1], 1e3)

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            user_system({**ENZYME_SPEC, "rhs_fast": []})

    def test_config_file_with_user_model(self, tmp_path):
        path = tmp_path / "user.yaml"
        path.write_text(yaml.safe_dump({"problem": ENZYME_SPEC, "n_intervals": 4, "x0": [1.0, 0.5]}))
        ocp = build_problem(resolve_config({}, load_config_file(path)))
        assert ocp.system.name == "enzyme-user" and ocp.n_intervals == 4


class TestCli:
    def test_solve_vr_full(self, tmp_path, capsys):
        out = tmp_path / "vr"
        code = main(["solve", "--problem", "vr", "--eps", "0.2", "--mode", "full",
                     "--x0", "-10,0,0,0,0", "--out", str(out)])
        assert code == EXIT_OK
        summary = dict(ln.split(" = ", 1) for ln in (out / "summary.txt").read_text().splitlines()
                       if " = " in ln)
        assert float(summary["objective"]) == pytest.approx(32.9, rel=0.1)
        for name in ("summary.txt", "trajectory.csv"):
            header = read_header(out / name)
            assert header[0] == f"simred {__version__}" and header[1].startswith("config_hash=")

    def test_solve_enzyme_reduced_columns(self, tmp_path):
        out = tmp_path / "enz"
        assert main(["solve", "--problem", "enzyme", "--mode", "reduced-online", "--n-intervals", "10",
                     "--out", str(out)]) == EXIT_OK
        rows = [r for r in csv.reader((out / "trajectory.csv").read_text().splitlines()) if r[0][0] != "#"]
        assert rows[0] == ["t", "x1", "y1", "u1"]

    def test_invalid_mode_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["solve", "--problem", "vr", "--mode", "sideways"])
        assert info.value.code != 0

    def test_bench_needs_two_modes(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["bench", "--problem", "vr", "--modes", "full", "--out", str(tmp_path)])
        assert info.value.code != 0

    def test_bench_transient_ratio(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["bench", "--problem", "vr", "--x0", "-10,0,10,0,10", "--modes", "full,reduced-online",
                     "--out", str(out)])
        assert code == EXIT_OK
        lines = [ln for ln in (out / "bench.csv").read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        assert [r["mode"] for r in rows] == ["full", "reduced-online"]
        assert float(rows[1]["cross_ratio"]) >= 10
        assert read_header(out / "bench.csv")[2] == "command=bench"

    def test_build_table(self, tmp_path):
        out = tmp_path / "table"
        assert main(["build-table", "--problem", "enzyme", "--out", str(out)]) == EXIT_OK
        text = (out / "table.txt").read_text()
        records = [ln for ln in text.splitlines()[4:] if ln.strip()]
        assert len(records) == 900
        report = (out / "build_report.txt").read_text()
        assert "nodes converged: 900" in report and "config_hash=" in report
        # identical configuration gives an identical file
        assert main(["build-table", "--problem", "enzyme", "--out", str(out)]) == EXIT_OK
        assert (out / "table.txt").read_text() == text

    def test_build_table_rejects_single_point_axis(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"problem": "enzyme", "table": {"lower": [0, 0], "upper": [1, 1],
                                                                      "counts": [1, 5]}}))
        with pytest.raises(SystemExit) as info:
            main(["build-table", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert info.value.code != 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_build_table_failures_exit_nonzero(self, tmp_path, capsys):
        # log(x) is undefined for x <= 0, so half of the grid fails
        spec = {**ENZYME_SPEC, "rhs_fast": ["(x - (x + 1) * y) / eps + log(x)"]}
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"problem": spec, "table": {"lower": [-2, 0], "upper": [1, 1],
                                                                  "counts": [4, 3]}}))
        code = main(["build-table", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == EXIT_FAILED
        assert "node" in capsys.readouterr().err

    def test_cross_eval_offline(self, tmp_path):
        out = tmp_path / "ce"
        code = main(["cross-eval", "--problem", "vr", "--mode", "reduced-offline", "--y0", "0,0,0",
                     "--out", str(out)])
        assert code == EXIT_OK
        vals = dict(ln.split(" = ") for ln in (out / "cross_eval.txt").read_text().splitlines()
                    if " = " in ln)
        assert float(vals["cross_objective"]) == pytest.approx(34.9, rel=0.1)
        assert (out / "table.txt").exists()

    def test_reproducible_outputs(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for o in outs:
            assert main(["solve", "--problem", "vr", "--mode", "reduced-online", "--out", str(o)]) == EXIT_OK
        strip = lambda p: [ln for ln in p.read_text().splitlines() if not ln.startswith("#")]
        assert strip(outs[0] / "trajectory.csv") == strip(outs[1] / "trajectory.csv")
