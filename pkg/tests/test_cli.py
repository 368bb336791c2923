"""Command line interface: configs, CSV/manifest outputs, error paths."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from polsphere import SphereSpec, SphereSystem, save_system
from polsphere.cli import ConfigError, load_config_file, main, resolve_config

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def small_lattice_config(**extra):
    cfg = {"system": {"lattice": {"kind": "alternating", "n_per_axis": 2}}, "lmax": 3}
    cfg.update(extra)
    return cfg


def test_version_subprocess():
    out = subprocess.run(
        [sys.executable, "-m", "polsphere", "--version"],
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "polsphere 0.1.0"


def test_solve_outputs(tmp_path):
    cfg = write_config(tmp_path, "cfg.json", small_lattice_config())
    out = tmp_path / "run"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0

    header, rows = read_csv(out / "solve_coefficients.csv")
    assert header == ["sphere", "l", "m", "nu"]
    assert len(rows) == 8 * 16

    header, rows = read_csv(out / "solve_summary.csv")
    assert header == [
        "n_spheres",
        "lmax",
        "backend",
        "tree_order",
        "tree_depth",
        "tolerance",
        "energy",
        "iterations",
        "converged",
        "final_residual",
    ]
    (row,) = rows
    assert row[0] == "8" and row[1] == "3" and row[2] == "direct"
    assert row[3] == "" and row[4] == ""  # tree columns blank on direct runs
    assert row[8] == "1"
    assert float(row[9]) <= 1e-8

    assert (out / "solve_residuals.png").read_bytes()[:8] == PNG_MAGIC
    manifest = json.loads((out / "solve_manifest.json").read_text())
    assert manifest["experiment"] == "solve"
    assert manifest["config"]["lmax"] == 3
    assert "solve_summary.csv" in manifest["outputs"]
    assert manifest["versions"]["numpy"] == np.__version__


def test_rerun_is_bit_identical(tmp_path):
    cfg = write_config(tmp_path, "cfg.json", small_lattice_config())
    out = tmp_path / "run"
    argv = ["solve", "--config", str(cfg), "--out", str(out), "--no-figures"]
    assert main(argv) == 0
    first = {
        p.name: p.read_bytes() for p in out.iterdir()
    }
    assert main(argv) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second
    assert not (out / "solve_residuals.png").exists()


def test_manifest_reruns_as_config(tmp_path):
    cfg = write_config(tmp_path, "cfg.json", small_lattice_config())
    first = tmp_path / "a"
    second = tmp_path / "b"
    assert main(["solve", "--config", str(cfg), "--out", str(first), "--no-figures"]) == 0
    manifest = first / "solve_manifest.json"
    assert (
        main(["solve", "--config", str(manifest), "--out", str(second), "--no-figures"])
        == 0
    )
    for name in ("solve_coefficients.csv", "solve_summary.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_forces_with_fd_columns(tmp_path):
    system = SphereSystem(
        (
            SphereSpec([0.0, 0.0, 0.0], 1.0, 10.0, 1.0),
            SphereSpec([4.0, 0.0, 0.0], 1.2, 3.0, -1.0),
        )
    )
    sys_path = tmp_path / "pair.json"
    save_system(system, sys_path)
    cfg = write_config(
        tmp_path,
        "cfg.json",
        {"system": {"file": str(sys_path)}, "lmax": 4, "fd_spheres": [0]},
    )
    out = tmp_path / "run"
    assert main(["forces", "--config", str(cfg), "--out", str(out)]) == 0

    header, rows = read_csv(out / "forces.csv")
    assert header == [
        "sphere", "cx", "cy", "cz", "radius",
        "Fx", "Fy", "Fz", "Fmag", "fd_Fx", "fd_Fy", "fd_Fz",
    ]
    assert len(rows) == 2
    force = np.array([float(v) for v in rows[0][5:8]])
    fd = np.array([float(v) for v in rows[0][9:12]])
    assert np.all(np.abs(fd - force) <= np.maximum(1e-5 * np.abs(force), 1e-9))
    assert rows[1][9:12] == ["", "", ""]  # no differencing requested there

    header, (row,) = read_csv(out / "forces_summary.csv")
    sum_cols = {name: float(row[header.index(name)]) for name in
                ("force_sum_x", "force_sum_y", "force_sum_z")}
    assert max(abs(v) for v in sum_cols.values()) < 1e-10
    assert (out / "forces.png").read_bytes()[:8] == PNG_MAGIC


def test_single_sphere_solves_in_one_iteration(tmp_path):
    sys_path = tmp_path / "one.json"
    save_system(
        SphereSystem((SphereSpec([0.0, 0.0, 0.0], 1.0, 10.0, 1.0),)), sys_path
    )
    cfg = write_config(
        tmp_path, "cfg.json", {"system": {"file": str(sys_path)}, "lmax": 5}
    )
    out = tmp_path / "run"
    assert main(["solve", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    header, (row,) = read_csv(out / "solve_summary.csv")
    assert row[header.index("iterations")] == "1"


def test_convergence_run(tmp_path):
    cfg = write_config(
        tmp_path,
        "cfg.json",
        {
            "system": {"lattice": {"kind": "alternating", "n_per_axis": 2}},
            "lmax_sweep": [2, 3],
            "reference_lmax": 6,
            "tolerance": 1e-10,
        },
    )
    out = tmp_path / "run"
    assert main(["convergence", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = read_csv(out / "convergence.csv")
    assert header == [
        "lmax", "force_error", "charge_error", "iterations", "reference_lmax",
        "n_spheres", "backend", "tree_order", "tree_depth", "tolerance",
    ]
    assert [r[0] for r in rows] == ["2", "3"]
    assert float(rows[1][1]) < float(rows[0][1])  # force error drops with degree
    assert float(rows[1][2]) < float(rows[0][2])
    manifest = json.loads((out / "convergence_manifest.json").read_text())
    assert manifest["results"]["force_decay_per_degree"] > 0
    assert (out / "convergence.png").read_bytes()[:8] == PNG_MAGIC


def test_nstudy_run(tmp_path):
    cfg = write_config(
        tmp_path,
        "cfg.json",
        {"n_sweep": [8], "lmax_list": [3], "reference_lmax": 5, "tolerance": 1e-9},
    )
    out = tmp_path / "run"
    assert main(["nstudy", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    header, rows = read_csv(out / "nstudy.csv")
    assert header == [
        "n_spheres", "lmax", "force_error", "iterations", "reference_iterations",
        "reference_lmax", "backend", "tree_order", "tree_depth", "tolerance",
    ]
    assert len(rows) == 1
    assert rows[0][0] == "8" and rows[0][1] == "3"
    assert float(rows[0][2]) > 0


def test_separation_run(tmp_path):
    cfg = write_config(
        tmp_path,
        "cfg.json",
        {
            "separation_sweep": [1.0, 0.3],
            "lmax": 4,
            "reference_lmax": 10,
            "tolerance": 1e-9,
        },
    )
    out = tmp_path / "run"
    assert main(["separation", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    header, rows = read_csv(out / "separation.csv")
    assert header == [
        "separation", "rel_error_1", "rel_error_2", "force_ratio", "iterations",
        "r2", "reference_lmax",
        "n_spheres", "lmax", "backend", "tree_order", "tree_depth", "tolerance",
    ]
    assert [r[0] for r in rows] == ["1.0", "0.3"]
    # truncation error grows as the gap closes
    assert float(rows[1][1]) > float(rows[0][1])


def test_scaling_single_point(tmp_path):
    cfg = write_config(
        tmp_path,
        "cfg.json",
        {
            "n_sweep": [8],
            "lmax": 3,
            "backend": "tree",
            "tree_order": 8,
            "repeats": 1,
            "direct_ns": [],
        },
    )
    out = tmp_path / "run"
    assert main(["scaling", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    header, rows = read_csv(out / "scaling.csv")
    assert header == [
        "n_spheres", "backend", "t_setup", "t_solve", "t_forces", "t_total",
        "iterations", "converged", "energy", "lmax", "tree_order", "tree_depth",
        "tolerance",
    ]
    assert len(rows) == 1
    assert rows[0][1] == "tree"
    assert float(rows[0][5]) > 0
    manifest = json.loads((out / "scaling_manifest.json").read_text())
    assert "results" not in manifest  # one point, nothing to fit


def test_tree_backend_via_flags(tmp_path):
    cfg = write_config(tmp_path, "cfg.json", small_lattice_config())
    out = tmp_path / "run"
    rc = main(
        [
            "solve", "--config", str(cfg), "--out", str(out), "--no-figures",
            "--backend", "tree", "--tree-order", "8", "--tree-depth", "auto",
        ]
    )
    assert rc == 0
    header, (row,) = read_csv(out / "solve_summary.csv")
    assert row[header.index("backend")] == "tree"
    assert row[header.index("tree_order")] == "8"


def test_bad_json_reports_position(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "lmax": 3,\n}\n', encoding="utf-8")
    rc = main(["solve", "--config", str(path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "invalid JSON at line 3" in err


def test_missing_config_file(tmp_path, capsys):
    rc = main(["solve", "--config", str(tmp_path / "nope.json")])
    assert rc == 2
    assert "config file not found" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, "cfg.json", {"lmaxx": 3})
    rc = main(["solve", "--config", str(cfg)])
    assert rc == 2
    assert "unknown config key 'lmaxx'" in capsys.readouterr().err


def test_lmax_disallowed_for_convergence(tmp_path, capsys):
    cfg = write_config(tmp_path, "cfg.json", {"lmax": 4})
    rc = main(["convergence", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 2
    assert "lmax_sweep" in capsys.readouterr().err


def test_noncube_lattice_total_rejected(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        "cfg.json",
        {"n_sweep": [10], "lmax": 3, "repeats": 1, "backend": "direct"},
    )
    rc = main(["scaling", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 2
    assert "cube" in capsys.readouterr().err


def test_overlapping_system_file_rejected(tmp_path, capsys):
    sys_path = tmp_path / "bad.json"
    save_system(
        SphereSystem(
            (
                SphereSpec([0.0, 0.0, 0.0], 1.0, 5.0),
                SphereSpec([1.0, 0.0, 0.0], 1.0, 5.0),
            )
        ),
        sys_path,
    )
    cfg = write_config(tmp_path, "cfg.json", {"system": {"file": str(sys_path)}})
    rc = main(["solve", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 2
    assert "overlap" in capsys.readouterr().err


def test_resolve_config_precedence():
    cfg = resolve_config("solve", {"lmax": 5, "tolerance": 1e-6}, {"lmax": 7})
    assert cfg["lmax"] == 7  # command line beats file
    assert cfg["tolerance"] == 1e-6  # file beats defaults
    assert cfg["backend"] == "direct"


def test_resolve_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        resolve_config("solve", {"backend": "magic"}, {})
    with pytest.raises(ConfigError):
        resolve_config("solve", {"tolerance": -1.0}, {})
    with pytest.raises(ConfigError):
        resolve_config("convergence", {"lmax_sweep": []}, {})
    with pytest.raises(ConfigError):
        resolve_config("separation", {"separation_sweep": [0.5, 0.0]}, {})
    with pytest.raises(ConfigError):
        resolve_config("solve", {"system": {"lattice": {"kind": "hex", "n_per_axis": 2}}}, {})


def test_load_config_rejects_non_object(tmp_path):
    path = tmp_path / "list.json"
    path.write_text("[1, 2, 3]\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config_file(path)
