"""CLI: exit codes, file schemas, manifest integrity, determinism."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from eotlab import save_measure
from eotlab.cli import main
from conftest import line_measure


def write_config(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload, indent=2))
    return path


def marginal_spec(n=33, kind="perturbed_uniform", **params):
    return {
        "grid": {"dim": 1, "n": n, "lo": -1.0, "hi": 1.0},
        "density": {"kind": kind, **params},
        "alpha": 0.5,
        "normalize": True,
    }


def read_csv_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def assert_csv_parses(path):
    header, rows = read_csv_rows(path)
    assert header
    for row in rows:
        assert len(row) == len(header)
        for cell in row:
            if cell in ("", "true", "false") or not any(c.isdigit() for c in cell):
                continue
            float(cell)


class TestSolve:
    def test_single_atom_cost_zero(self, tmp_path):
        atom = line_measure([0.0], [1.0], h=0.5)
        save_measure(atom, tmp_path / "atom.csv")
        cfg = write_config(
            tmp_path,
            {
                "source": {"file": str(tmp_path / "atom.csv")},
                "solver": {"epsilon": 0.5},
                "gibbs_check_samples": 50,
            },
        )
        out = tmp_path / "out"
        assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["cost"] == pytest.approx(0.0, abs=1e-12)
        assert summary["converged"] is True
        assert summary["gibbs_max_rel_err"] <= 1e-9
        assert (out / "plan.bin").exists() and (out / "plan.json").exists()

    def test_mass_mismatch_exits_2_naming_gap(self, tmp_path, capsys):
        lam = line_measure([0.0, 0.5], [0.5, 0.5], h=0.5)
        mu = line_measure([0.0, 0.5], [0.6, 0.6], h=0.5)
        save_measure(lam, tmp_path / "lam.csv")
        save_measure(mu, tmp_path / "mu.csv")
        cfg = write_config(
            tmp_path,
            {
                "source": {"file": str(tmp_path / "lam.csv")},
                "target": {"file": str(tmp_path / "mu.csv")},
                "solver": {"epsilon": 0.5},
            },
        )
        code = main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "relative gap" in err

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "seed": 7,
                "source": marginal_spec(amplitude=0.1),
                "solver": {"epsilon": 0.4},
                "gibbs_check_samples": 100,
            },
        )
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["solve", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["solve", "--config", str(cfg), "--out", str(out2)]) == 0
        for name in ("summary.json", "plan.bin", "plan.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        m1.pop("created_utc"), m2.pop("created_utc")
        assert m1 == m2

    def test_manifest_hashes_match_files(self, tmp_path):
        import hashlib

        cfg = write_config(
            tmp_path,
            {"source": marginal_spec(n=17), "solver": {"epsilon": 0.5}},
        )
        out = tmp_path / "out"
        assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_snapshot"] == cfg.read_text()
        for entry in manifest["outputs"]:
            blob = (out / entry["path"]).read_bytes()
            assert hashlib.sha256(blob).hexdigest() == entry["sha256"]
            assert len(blob) == entry["bytes"]


class TestExperimentDispatch:
    def test_unknown_name_exits_2_with_choices(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"source": marginal_spec()})
        with pytest.raises(SystemExit) as exc:
            main(["experiment", "nonsense", "--config", str(cfg)])
        assert exc.value.code == 2
        assert "expansion" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = main(["experiment", "expansion", "--config", str(tmp_path / "nope.json")])
        assert code == 2

    def test_blocked_output_dir_exits_4(self, tmp_path):
        blocker = tmp_path / "blocked"
        blocker.write_text("a file, not a directory")
        cfg = write_config(
            tmp_path,
            {"source": marginal_spec(), "experiment": {"eps_ladder": [0.5]},
             "solver": {"epsilon": 0.5}},
        )
        code = main(["experiment", "expansion", "--config", str(cfg),
                     "--out", str(blocker)])
        assert code == 4

    def test_output_dir_created(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {"source": marginal_spec(n=17), "experiment": {"eps_ladder": [0.6]},
             "solver": {"epsilon": 0.6}},
        )
        nested = tmp_path / "deep" / "nested" / "dir"
        assert main(["experiment", "expansion", "--config", str(cfg),
                     "--out", str(nested)]) == 0
        assert (nested / "report.csv").exists()

    def test_domain_error_exits_4(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            {"source": marginal_spec(),
             "experiment": {"R": 0.5, "eps_ladder": [0.3]},
             "solver": {"epsilon": 0.3}},
        )
        code = main(["experiment", "longtraj", "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
        assert code == 4


class TestExpansionExperiment:
    def test_three_point_ladder_plus_regression_row(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "source": marginal_spec(amplitude=0.1),
                "experiment": {"eps_ladder": [0.6, 0.5, 0.4]},
                "solver": {"epsilon": 0.4},
            },
        )
        out = tmp_path / "out"
        assert main(["experiment", "expansion", "--config", str(cfg),
                     "--out", str(out)]) == 0
        header, rows = read_csv_rows(out / "report.csv")
        assert len(rows) == 4
        kinds = [row[header.index("row_type")] for row in rows]
        assert kinds == ["point", "point", "point", "regression"]
        assert_csv_parses(out / "report.csv")
        trace = json.loads((out / "trace.json").read_text())
        assert len(trace["rows"]) == 3

    def test_rerun_determinism(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "seed": 3,
                "source": marginal_spec(amplitude=0.05),
                "experiment": {"eps_ladder": [0.6, 0.45]},
                "solver": {"epsilon": 0.45},
            },
        )
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert main(["experiment", "expansion", "--config", str(cfg),
                         "--out", str(out)]) == 0
        for name in ("report.csv", "trace.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestOtherExperiments:
    def test_longtraj_schema(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "source": marginal_spec(n=49),
                "experiment": {"R": 0.1, "eps_ladder": [0.4, 0.3]},
                "solver": {"epsilon": 0.3},
            },
        )
        out = tmp_path / "out"
        assert main(["experiment", "longtraj", "--config", str(cfg),
                     "--out", str(out)]) == 0
        assert_csv_parses(out / "report.csv")
        header, rows = read_csv_rows(out / "report.csv")
        assert len(rows) == 4  # two points + two slope rows

    def test_quasimin_writes_defects_csv(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "source": marginal_spec(n=49),
                "experiment": {"R": 0.3, "eps_ladder": [0.3, 0.2]},
                "solver": {"epsilon": 0.2},
            },
        )
        out = tmp_path / "out"
        assert main(["experiment", "quasimin", "--config", str(cfg),
                     "--out", str(out)]) == 0
        assert_csv_parses(out / "report.csv")
        assert_csv_parses(out / "defects.csv")

    def test_campanato_trace_and_radius_scan(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "source": marginal_spec(n=65, amplitude=0.05),
                "experiment": {"R0": 0.8, "theta": 0.5, "max_levels": 6},
                "solver": {"epsilon": 0.08},
            },
        )
        out = tmp_path / "out"
        assert main(["experiment", "campanato", "--config", str(cfg),
                     "--out", str(out)]) == 0
        assert_csv_parses(out / "report.csv")
        assert_csv_parses(out / "radius_scan.csv")
        trace = json.loads((out / "trace.json").read_text())
        assert trace["stop_reason"] in (
            "reached_epsilon_scale", "smallness_violated", "admissibility_exit",
            "max_levels",
        )
        radii = [lvl["r"] for lvl in trace["levels"]]
        assert all(a > b for a, b in zip(radii, radii[1:]))

    def test_onestep_report(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "source": marginal_spec(n=65, amplitude=0.05),
                "experiment": {"R0": 0.5, "theta": 0.5},
                "solver": {"epsilon": 0.05},
            },
        )
        out = tmp_path / "out"
        assert main(["experiment", "onestep", "--config", str(cfg),
                     "--out", str(out)]) == 0
        assert_csv_parses(out / "report.csv")
        header, rows = read_csv_rows(out / "report.csv")
        assert len(rows) == 1
        assert "E_before" in header and "E_after" in header

    def test_softlemma_schema(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "source": marginal_spec(n=49),
                "experiment": {"R": 1.5, "rho_ladder": [0.2, 0.4], "Delta_R": 0.05},
                "solver": {"epsilon": 0.15},
            },
        )
        out = tmp_path / "out"
        assert main(["experiment", "softlemma", "--config", str(cfg),
                     "--out", str(out)]) == 0
        assert_csv_parses(out / "report.csv")
        header, rows = read_csv_rows(out / "report.csv")
        assert len(rows) == 2
