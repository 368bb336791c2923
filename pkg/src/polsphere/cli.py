"""Command line front end: solves, force reports, and the study subcommands.

Subcommands
-----------
solve        solve for the induced surface charge and write its coefficients
forces       solve and write the per-sphere forces and the total energy
convergence  error vs truncation degree against a high-degree reference
nstudy       error and iteration counts vs particle count at fixed degree
separation   two-sphere error vs surface separation against deep references
scaling      wall-clock timing of the force pipeline vs particle count

Every subcommand reads an optional JSON configuration, writes UTF-8 CSV
files with stable documented headers, a JSON run manifest holding the fully
resolved configuration, and (unless --no-figures) PNG renderings of the main
result columns.  Re-running a manifest reproduces every non-timing column
bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .forces import compute_all_forces, energy_gradient_fd
from .geometry import (
    NonPositiveParameter,
    OverlapError,
    SphereSpec,
    SphereSystem,
    free_charge_vector,
    load_system,
    make_alternating_lattice,
    make_layered_lattice,
)
from .harmonics import degree_map, order_map
from .operators import OperatorContext, apply_V, energy
from .solver import SolveSettings, solve_induced_charge


class ConfigError(Exception):
    """A configuration file or option is malformed or inconsistent."""


_LATTICES = {"alternating": make_alternating_lattice, "layered": make_layered_lattice}
_LATTICE_EDGE = {"alternating": 6.0, "layered": 7.0}

_DEFAULT_SYSTEM = {"lattice": {"kind": "alternating", "n_per_axis": 3}}

_COMMON_DEFAULTS = {
    "system": _DEFAULT_SYSTEM,
    "lmax": 6,
    "backend": "direct",
    "tree_depth": "auto",
    "tree_order": None,
    "mac_ratio": None,
    "tolerance": 1e-8,
    "max_iterations": 400,
    "output_dir": ".",
    "figures": True,
    "seed": None,
}

# accuracy studies keep the solver tolerance far below discretization error
# so the iteration count never pollutes the measured error
_EXPERIMENT_DEFAULTS = {
    "solve": {},
    "forces": {"fd_spheres": [], "fd_step": 1e-4},
    "convergence": {
        "lmax_sweep": list(range(2, 11)),
        "reference_lmax": 20,
        "tolerance": 1e-11,
    },
    "nstudy": {
        "n_sweep": [8, 27, 64],
        "lmax_list": [6, 9],
        "reference_lmax": 15,
        "lattice_kind": "alternating",
        "edge": None,
        "tolerance": 1e-11,
    },
    "separation": {
        "separation_sweep": [1.0, 0.7, 0.5, 0.3, 0.2, 0.15, 0.1, 0.07, 0.05],
        "r2": 1.0,
        "kappa_spheres": 100.0,
        "lmax": 10,
        "reference_lmax": 30,
        "tolerance": 1e-11,
    },
    "scaling": {
        "n_sweep": [512, 1728, 4096],
        "lattice_kind": "alternating",
        "edge": None,
        "backend": "tree",
        "tree_order": 12,
        "mac_ratio": 0.5,
        "repeats": 3,
        "direct_ns": [],
        "direct_repeats": 1,
    },
}

# experiments that generate their own geometry reject a configured system,
# and sweep-driven experiments reject a single top-level lmax
_NO_SYSTEM = {"nstudy", "separation", "scaling"}
_NO_LMAX = {"convergence", "nstudy"}

_META_HEADER = ["n_spheres", "lmax", "backend", "tree_order", "tree_depth", "tolerance"]


def load_config_file(path) -> dict:
    """Read a JSON configuration, unwrapping a previously written manifest."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if "config" in raw and "experiment" in raw:
        if not isinstance(raw["config"], dict):
            raise ConfigError(f"{path}: manifest 'config' entry must be an object")
        return raw["config"]
    return raw


def resolve_config(experiment: str, file_cfg: dict | None, overrides: dict) -> dict:
    """Merge defaults, file configuration, and command line overrides."""
    cfg = dict(_COMMON_DEFAULTS)
    cfg.update(_EXPERIMENT_DEFAULTS[experiment])
    allowed = set(cfg)
    if experiment in _NO_SYSTEM:
        allowed.discard("system")
        cfg.pop("system", None)
    if experiment in _NO_LMAX:
        allowed.discard("lmax")
        cfg.pop("lmax", None)

    for source, name in ((file_cfg or {}, "config key"), (overrides, "option")):
        for key, value in source.items():
            if key not in allowed:
                hint = ""
                if key == "system" and experiment in _NO_SYSTEM:
                    hint = f" ({experiment} generates its own geometry)"
                if key == "lmax" and experiment in _NO_LMAX:
                    sweep = "lmax_sweep" if experiment == "convergence" else "lmax_list"
                    hint = f" ({experiment} sweeps the degree; set {sweep})"
                raise ConfigError(f"unknown {name} {key!r} for {experiment!r}{hint}")
            if value is not None or key in ("tree_order", "mac_ratio", "edge", "seed"):
                cfg[key] = value

    _validate_config(experiment, cfg)
    return cfg


def _validate_config(experiment: str, cfg: dict) -> None:
    if cfg["backend"] not in ("direct", "tree"):
        raise ConfigError(f"backend must be 'direct' or 'tree', got {cfg['backend']!r}")
    depth = cfg["tree_depth"]
    if depth != "auto" and (not isinstance(depth, int) or depth < 0):
        raise ConfigError(f"tree_depth must be 'auto' or a non-negative integer, got {depth!r}")
    if not isinstance(cfg["tolerance"], (int, float)) or cfg["tolerance"] <= 0:
        raise ConfigError(f"tolerance must be positive, got {cfg['tolerance']!r}")
    for key in ("lmax", "tree_order", "reference_lmax", "max_iterations", "repeats", "direct_repeats"):
        value = cfg.get(key)
        if value is not None and (not isinstance(value, int) or value < 0):
            raise ConfigError(f"{key} must be a non-negative integer, got {value!r}")
    for key in ("lmax_sweep", "n_sweep", "lmax_list", "separation_sweep", "direct_ns"):
        if key in cfg:
            sweep = cfg[key]
            if not isinstance(sweep, (list, tuple)) or (key != "direct_ns" and not sweep):
                raise ConfigError(f"{key} must be a non-empty list")
    if "system" in cfg:
        _check_system_spec(cfg["system"])
    kind = cfg.get("lattice_kind")
    if kind is not None and kind not in _LATTICES:
        raise ConfigError(f"lattice_kind must be one of {sorted(_LATTICES)}, got {kind!r}")
    if "separation_sweep" in cfg and any(s <= 0 for s in cfg["separation_sweep"]):
        raise ConfigError("separations must be positive (spheres may not touch)")
    if "r2" in cfg and cfg["r2"] <= 0:
        raise ConfigError(f"r2 must be positive, got {cfg['r2']!r}")


def _check_system_spec(spec) -> None:
    if not isinstance(spec, dict) or len(spec) != 1 or next(iter(spec)) not in ("file", "lattice"):
        raise ConfigError("system must be {'file': path} or {'lattice': {...}}")
    if "file" in spec and not Path(spec["file"]).exists():
        raise ConfigError(f"system file not found: {spec['file']}")
    if "lattice" in spec:
        lat = spec["lattice"]
        if not isinstance(lat, dict) or lat.get("kind") not in _LATTICES:
            raise ConfigError("lattice spec needs kind 'alternating' or 'layered'")
        if not isinstance(lat.get("n_per_axis"), int) or lat["n_per_axis"] < 1:
            raise ConfigError("lattice spec needs a positive integer n_per_axis")


def build_system(spec: dict) -> SphereSystem:
    """Construct the sphere system named by a config 'system' entry."""
    if "file" in spec:
        return load_system(spec["file"])
    lat = spec["lattice"]
    edge = lat.get("edge")
    if edge is None:
        edge = _LATTICE_EDGE[lat["kind"]]
    return _LATTICES[lat["kind"]](lat["n_per_axis"], edge=edge)


def _lattice_by_total(kind: str, n_total: int, edge) -> SphereSystem:
    per_axis = round(n_total ** (1.0 / 3.0))
    if per_axis**3 != n_total:
        raise ConfigError(f"lattice sweeps need perfect cubes, got N={n_total}")
    if edge is None:
        edge = _LATTICE_EDGE[kind]
    return _LATTICES[kind](per_axis, edge=edge)


def make_context(system: SphereSystem, cfg: dict, lmax=None, backend=None) -> OperatorContext:
    return OperatorContext(
        system,
        lmax=cfg["lmax"] if lmax is None else lmax,
        backend=cfg["backend"] if backend is None else backend,
        tree_levels=cfg["tree_depth"],
        tree_order=cfg["tree_order"],
        mac_ratio=cfg["mac_ratio"],
    )


def _settings(cfg: dict) -> SolveSettings:
    return SolveSettings(tolerance=cfg["tolerance"], max_iterations=cfg["max_iterations"])


def _solve(ctx: OperatorContext, cfg: dict):
    sigma_f = free_charge_vector(ctx.system, ctx.lmax)
    report = solve_induced_charge(ctx, sigma_f, _settings(cfg))
    if not report.converged:
        print(
            f"warning: solver stopped at {report.iterations} iterations with "
            f"residual {report.residual_history[-1]:.3e}",
            file=sys.stderr,
        )
    return sigma_f, report


# ---------------------------------------------------------------------------
# emission helpers


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip form, bit-stable
    return str(value)


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _write_manifest(path: Path, experiment: str, cfg: dict, outputs, results=None) -> Path:
    manifest = {
        "experiment": experiment,
        "config": cfg,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "polsphere": __version__,
        },
        "seed": cfg.get("seed"),
        "outputs": [p.name for p in outputs],
    }
    if results:
        manifest["results"] = results
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _meta(ctx: OperatorContext, cfg: dict) -> list:
    if ctx.backend == "tree":
        return [ctx.n_spheres, ctx.lmax, "tree", ctx.tree_order, ctx.octree.levels, cfg["tolerance"]]
    return [ctx.n_spheres, ctx.lmax, "direct", None, None, cfg["tolerance"]]


def _render(path: Path, draw) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(7.0, 4.5))
    try:
        draw(fig)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
    finally:
        plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# error metrics


def _avg_force_error(forces, reference) -> float:
    """Mean Euclidean distance between per-sphere force vectors."""
    return float(np.mean(np.linalg.norm(forces - reference, axis=1)))


def _avg_charge_error(radii, nu, nu_ref) -> float:
    """Mean per-sphere surface L2 norm of the density difference."""
    padded = nu.truncated(nu_ref.degree_max).values
    diff = padded - nu_ref.values
    per_sphere = np.sqrt(radii**2 * np.sum(diff**2, axis=1))
    return float(np.mean(per_sphere))


def _loglinear_fit(x, logy):
    """Least-squares slope/intercept of log(y) against x, plus R^2."""
    slope, intercept = np.polyfit(x, logy, 1)
    fitted = slope * np.asarray(x) + intercept
    ss_res = float(np.sum((logy - fitted) ** 2))
    ss_tot = float(np.sum((logy - np.mean(logy)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# subcommands


def run_solve(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    system = build_system(cfg["system"])
    ctx = make_context(system, cfg)
    sigma_f, report = _solve(ctx, cfg)
    total_energy = energy(ctx, sigma_f, report.nu)

    degree, order = degree_map(ctx.lmax), order_map(ctx.lmax)
    rows = []
    for i in range(ctx.n_spheres):
        for k in range(report.nu.values.shape[1]):
            rows.append([i, degree[k], order[k], report.nu.values[i, k]])
    files = [_write_csv(out / "solve_coefficients.csv", ["sphere", "l", "m", "nu"], rows)]

    header = _META_HEADER + ["energy", "iterations", "converged", "final_residual"]
    summary = _meta(ctx, cfg) + [
        total_energy,
        report.iterations,
        report.converged,
        report.residual_history[-1],
    ]
    files.append(_write_csv(out / "solve_summary.csv", header, [summary]))

    if cfg["figures"]:

        def draw(fig):
            ax = fig.subplots()
            ax.semilogy(range(len(report.residual_history)), report.residual_history, "o-")
            ax.set_xlabel("iteration")
            ax.set_ylabel("relative residual")
            ax.set_title(f"N={ctx.n_spheres}, lmax={ctx.lmax}, backend={ctx.backend}")
            ax.grid(True, which="both", alpha=0.3)

        files.append(_render(out / "solve_residuals.png", draw))

    files.append(_write_manifest(out / "solve_manifest.json", "solve", cfg, files))
    print(f"energy {total_energy!r}, {report.iterations} iterations")
    return files


def run_forces(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    system = build_system(cfg["system"])
    t0 = time.perf_counter()
    ctx = make_context(system, cfg)
    sigma_f, report = _solve(ctx, cfg)
    t_solve = time.perf_counter() - t0
    t0 = time.perf_counter()
    force_report = compute_all_forces(ctx, report.nu)
    t_forces = time.perf_counter() - t0

    fd_spheres = cfg["fd_spheres"]
    if fd_spheres == "all":
        fd_spheres = list(range(ctx.n_spheres))
    fd = {}
    for i in fd_spheres:
        if not isinstance(i, int) or not 0 <= i < ctx.n_spheres:
            raise ConfigError(f"fd_spheres entry {i!r} is not a sphere index")
        factory = lambda sys_: make_context(sys_, cfg)
        fd[i] = energy_gradient_fd(
            factory, system, free_charge_vector(system, ctx.lmax), i, h=cfg["fd_step"]
        )

    header = ["sphere", "cx", "cy", "cz", "radius", "Fx", "Fy", "Fz", "Fmag"]
    if fd:
        header += ["fd_Fx", "fd_Fy", "fd_Fz"]
    rows = []
    for i in range(ctx.n_spheres):
        row = (
            [i]
            + list(ctx.centers[i])
            + [ctx.radii[i]]
            + list(force_report.forces[i])
            + [force_report.diagnostics[i]]
        )
        if fd:
            row += list(fd[i]) if i in fd else [None, None, None]
        rows.append(row)
    files = [_write_csv(out / "forces.csv", header, rows)]

    header = _META_HEADER + [
        "energy",
        "iterations",
        "force_sum_x",
        "force_sum_y",
        "force_sum_z",
        "sum_force_mag",
        "t_solve",
        "t_forces",
    ]
    summary = _meta(ctx, cfg) + [
        force_report.energy,
        report.iterations,
        *force_report.force_sum,
        force_report.diagnostics.sum(),
        t_solve,
        t_forces,
    ]
    files.append(_write_csv(out / "forces_summary.csv", header, [summary]))

    if cfg["figures"]:

        def draw(fig):
            ax = fig.subplots()
            ax.bar(range(ctx.n_spheres), force_report.diagnostics)
            ax.set_xlabel("sphere")
            ax.set_ylabel("|F|")
            ax.set_title(f"force magnitudes, N={ctx.n_spheres}, lmax={ctx.lmax}")

        files.append(_render(out / "forces.png", draw))

    files.append(_write_manifest(out / "forces_manifest.json", "forces", cfg, files))
    print(
        f"energy {force_report.energy!r}, |sum F| = "
        f"{np.linalg.norm(force_report.force_sum):.3e}, "
        f"solve {t_solve:.2f}s + forces {t_forces:.2f}s"
    )
    return files


def run_convergence(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    system = build_system(cfg["system"])
    ref_lmax = cfg["reference_lmax"]
    sweep = sorted(cfg["lmax_sweep"])
    if sweep[-1] >= ref_lmax:
        raise ConfigError(f"lmax_sweep reaches {sweep[-1]} but the reference is {ref_lmax}")

    ref_ctx = make_context(system, cfg, lmax=ref_lmax)
    _, ref_report = _solve(ref_ctx, cfg)
    ref_forces = compute_all_forces(ref_ctx, ref_report.nu).forces
    print(f"reference lmax={ref_lmax}: {ref_report.iterations} iterations")

    rows = []
    force_errors, charge_errors = [], []
    for lmax in sweep:
        ctx = make_context(system, cfg, lmax=lmax)
        _, report = _solve(ctx, cfg)
        forces = compute_all_forces(ctx, report.nu).forces
        f_err = _avg_force_error(forces, ref_forces)
        c_err = _avg_charge_error(ctx.radii, report.nu, ref_report.nu)
        force_errors.append(f_err)
        charge_errors.append(c_err)
        meta = _meta(ctx, cfg)
        rows.append([lmax, f_err, c_err, report.iterations, ref_lmax, meta[0]] + meta[2:])
        print(f"lmax={lmax}: force error {f_err:.3e}, charge error {c_err:.3e}")

    header = ["lmax", "force_error", "charge_error", "iterations", "reference_lmax"] + [
        "n_spheres",
        "backend",
        "tree_order",
        "tree_depth",
        "tolerance",
    ]
    files = [_write_csv(out / "convergence.csv", header, rows)]

    results = {}
    if len(sweep) > 1:
        for label, errs in (("force", force_errors), ("charge", charge_errors)):
            slope, _, r2 = _loglinear_fit(sweep, np.log10(errs))
            results[f"{label}_decay_per_degree"] = -slope
            results[f"{label}_fit_r2"] = r2
            print(f"{label} error decays 10^{slope:.3f} per degree (R^2 {r2:.4f})")

    if cfg["figures"]:

        def draw(fig):
            ax = fig.subplots()
            ax.semilogy(sweep, force_errors, "o-", label="force")
            ax.semilogy(sweep, charge_errors, "s-", label="charge")
            ax.set_xlabel("truncation degree lmax")
            ax.set_ylabel("average error")
            ax.set_title(f"N={system.n_spheres}, reference lmax={ref_lmax}")
            ax.legend()
            ax.grid(True, which="both", alpha=0.3)

        files.append(_render(out / "convergence.png", draw))

    files.append(_write_manifest(out / "convergence_manifest.json", "convergence", cfg, files, results))
    return files


def run_nstudy(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ref_lmax = cfg["reference_lmax"]
    lmax_list = sorted(cfg["lmax_list"])
    if lmax_list[-1] >= ref_lmax:
        raise ConfigError(f"lmax_list reaches {lmax_list[-1]} but the reference is {ref_lmax}")

    rows = []
    errors = {lmax: [] for lmax in lmax_list}
    ns = sorted(cfg["n_sweep"])
    for n_total in ns:
        system = _lattice_by_total(cfg["lattice_kind"], n_total, cfg["edge"])
        ref_ctx = make_context(system, cfg, lmax=ref_lmax)
        _, ref_report = _solve(ref_ctx, cfg)
        ref_forces = compute_all_forces(ref_ctx, ref_report.nu).forces
        for lmax in lmax_list:
            ctx = make_context(system, cfg, lmax=lmax)
            _, report = _solve(ctx, cfg)
            forces = compute_all_forces(ctx, report.nu).forces
            f_err = _avg_force_error(forces, ref_forces)
            errors[lmax].append(f_err)
            meta = _meta(ctx, cfg)
            rows.append([n_total, lmax, f_err, report.iterations, ref_report.iterations, ref_lmax] + meta[2:])
            print(
                f"N={n_total}, lmax={lmax}: force error {f_err:.3e}, "
                f"{report.iterations} iterations (reference {ref_report.iterations})"
            )

    header = [
        "n_spheres",
        "lmax",
        "force_error",
        "iterations",
        "reference_iterations",
        "reference_lmax",
        "backend",
        "tree_order",
        "tree_depth",
        "tolerance",
    ]
    files = [_write_csv(out / "nstudy.csv", header, rows)]

    results = {
        f"error_spread_lmax{lmax}": float(max(errs) / min(errs))
        for lmax, errs in errors.items()
        if len(errs) > 1 and min(errs) > 0
    }

    if cfg["figures"]:

        def draw(fig):
            ax = fig.subplots()
            for lmax in lmax_list:
                ax.semilogy(ns, errors[lmax], "o-", label=f"lmax={lmax}")
            ax.set_xlabel("number of spheres N")
            ax.set_ylabel("average force error")
            ax.set_title(f"{cfg['lattice_kind']} lattice, reference lmax={ref_lmax}")
            ax.legend()
            ax.grid(True, which="both", alpha=0.3)

        files.append(_render(out / "nstudy.png", draw))

    files.append(_write_manifest(out / "nstudy_manifest.json", "nstudy", cfg, files, results))
    return files


def _separated_pair(s: float, r2: float, kappa: float) -> SphereSystem:
    """Two spheres on the z axis, surfaces a distance s apart."""
    return SphereSystem(
        (
            SphereSpec((0.0, 0.0, 0.0), 1.0, kappa, -1.0),
            SphereSpec((0.0, 0.0, 1.0 + r2 + s), r2, kappa, 1.0),
        ),
        kappa0=1.0,
    )


def run_separation(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ref_lmax = cfg["reference_lmax"]
    if cfg["lmax"] >= ref_lmax:
        raise ConfigError(f"lmax {cfg['lmax']} must stay below the reference {ref_lmax}")
    sweep = sorted(cfg["separation_sweep"], reverse=True)

    rows = []
    rel_errors, ratios = [], []
    for s in sweep:
        system = _separated_pair(s, cfg["r2"], cfg["kappa_spheres"])
        ref_ctx = make_context(system, cfg, lmax=ref_lmax)
        _, ref_report = _solve(ref_ctx, cfg)
        ref_forces = compute_all_forces(ref_ctx, ref_report.nu).forces
        ctx = make_context(system, cfg)
        _, report = _solve(ctx, cfg)
        forces = compute_all_forces(ctx, report.nu).forces
        rel = np.linalg.norm(forces - ref_forces, axis=1) / np.linalg.norm(ref_forces, axis=1)
        ratio = float(np.linalg.norm(ref_forces[0]) / np.linalg.norm(forces[0]))
        rel_errors.append(rel)
        ratios.append(ratio)
        meta = _meta(ctx, cfg)
        rows.append([s, rel[0], rel[1], ratio, report.iterations, cfg["r2"], ref_lmax] + meta)
        print(f"s={s}: relative errors {rel[0]:.3e} / {rel[1]:.3e}, force ratio {ratio:.4f}")

    header = [
        "separation",
        "rel_error_1",
        "rel_error_2",
        "force_ratio",
        "iterations",
        "r2",
        "reference_lmax",
    ] + _META_HEADER
    files = [_write_csv(out / "separation.csv", header, rows)]

    if cfg["figures"]:
        rel_arr = np.array(rel_errors)

        def draw(fig):
            ax1, ax2 = fig.subplots(1, 2)
            ax1.loglog(sweep, rel_arr[:, 0], "o-", label="sphere 1")
            ax1.loglog(sweep, rel_arr[:, 1], "s-", label="sphere 2")
            ax1.set_xlabel("separation s")
            ax1.set_ylabel("relative force error")
            ax1.legend()
            ax1.grid(True, which="both", alpha=0.3)
            ax2.semilogx(sweep, ratios, "o-")
            ax2.set_xlabel("separation s")
            ax2.set_ylabel("|F_ref| / |F| on sphere 1")
            ax2.grid(True, which="both", alpha=0.3)
            fig.suptitle(f"r2={cfg['r2']}, lmax={cfg['lmax']}, reference lmax={ref_lmax}")

        files.append(_render(out / "separation.png", draw))

    files.append(_write_manifest(out / "separation_manifest.json", "separation", cfg, files))
    return files


def _timed_force_run(system: SphereSystem, cfg: dict, backend: str, repeats: int) -> dict:
    """One benchmark point: setup with warm caches, then best-of-n phases."""
    t0 = time.perf_counter()
    ctx = make_context(system, cfg, backend=backend)
    sigma_f = free_charge_vector(system, ctx.lmax)
    settings = _settings(cfg)
    # warm every lazy table: both operator output degrees plus the gradients
    apply_V(ctx, sigma_f, out_degree=ctx.lmax)
    apply_V(ctx, sigma_f, out_degree=ctx.lmax + 1)
    _ = ctx.gradient_table
    t_setup = time.perf_counter() - t0

    best = None
    for _ in range(max(1, repeats)):
        t1 = time.perf_counter()
        report = solve_induced_charge(ctx, sigma_f, settings)
        t2 = time.perf_counter()
        force_report = compute_all_forces(ctx, report.nu)
        t3 = time.perf_counter()
        candidate = (t2 - t1, t3 - t2)
        if best is None or sum(candidate) < sum(best):
            best = candidate
    t_solve, t_forces = best
    return {
        "n": system.n_spheres,
        "backend": backend,
        "t_setup": t_setup,
        "t_solve": t_solve,
        "t_forces": t_forces,
        "t_total": t_setup + t_solve + t_forces,
        "iterations": report.iterations,
        "converged": report.converged,
        "energy": force_report.energy,
        "tree_order": ctx.tree_order if backend == "tree" else None,
        "tree_depth": ctx.octree.levels if backend == "tree" else None,
    }


def run_scaling(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ns = sorted(cfg["n_sweep"])
    runs = [(n, cfg["backend"], cfg["repeats"]) for n in ns]
    runs += [(n, "direct", cfg["direct_repeats"]) for n in sorted(cfg["direct_ns"]) if cfg["backend"] != "direct"]

    rows = []
    measured = []
    for n_total, backend, repeats in runs:
        system = _lattice_by_total(cfg["lattice_kind"], n_total, cfg["edge"])
        point = _timed_force_run(system, cfg, backend, repeats)
        measured.append(point)
        rows.append(
            [
                point["n"],
                point["backend"],
                point["t_setup"],
                point["t_solve"],
                point["t_forces"],
                point["t_total"],
                point["iterations"],
                point["converged"],
                point["energy"],
                cfg["lmax"],
                point["tree_order"],
                point["tree_depth"],
                cfg["tolerance"],
            ]
        )
        print(
            f"N={point['n']} backend={backend}: setup {point['t_setup']:.2f}s, "
            f"solve {point['t_solve']:.2f}s, forces {point['t_forces']:.2f}s "
            f"({point['iterations']} iterations)"
        )

    header = [
        "n_spheres",
        "backend",
        "t_setup",
        "t_solve",
        "t_forces",
        "t_total",
        "iterations",
        "converged",
        "energy",
        "lmax",
        "tree_order",
        "tree_depth",
        "tolerance",
    ]
    files = [_write_csv(out / "scaling.csv", header, rows)]

    results = {}
    main_points = [p for p in measured if p["backend"] == cfg["backend"]]
    if len(main_points) > 1:
        slope, _, r2 = _loglinear_fit(
            np.log10([p["n"] for p in main_points]), np.log10([p["t_total"] for p in main_points])
        )
        results["time_exponent"] = slope
        results["time_fit_r2"] = r2
        print(f"t_total grows like N^{slope:.3f} (R^2 {r2:.4f})")
    by_n = {p["n"]: p for p in main_points}
    for p in measured:
        if p["backend"] == "direct" and cfg["backend"] != "direct" and p["n"] in by_n:
            ratio = p["t_total"] / by_n[p["n"]]["t_total"]
            results[f"direct_over_{cfg['backend']}_N{p['n']}"] = ratio
            print(f"N={p['n']}: direct / {cfg['backend']} time ratio {ratio:.1f}")

    if cfg["figures"]:

        def draw(fig):
            ax = fig.subplots()
            for backend in dict.fromkeys(p["backend"] for p in measured):
                pts = [p for p in measured if p["backend"] == backend]
                ax.loglog([p["n"] for p in pts], [p["t_total"] for p in pts], "o-", label=backend)
            anchor = main_points[0]
            guide_n = np.array([min(ns), max(ns)], dtype=float)
            ax.loglog(
                guide_n,
                anchor["t_total"] * guide_n / anchor["n"],
                "k--",
                alpha=0.5,
                label="linear",
            )
            ax.set_xlabel("number of spheres N")
            ax.set_ylabel("wall time (s)")
            ax.set_title(f"lmax={cfg['lmax']}, order={cfg['tree_order']}")
            ax.legend()
            ax.grid(True, which="both", alpha=0.3)

        files.append(_render(out / "scaling.png", draw))

    files.append(_write_manifest(out / "scaling_manifest.json", "scaling", cfg, files, results))
    return files


_RUNNERS = {
    "solve": run_solve,
    "forces": run_forces,
    "convergence": run_convergence,
    "nstudy": run_nstudy,
    "separation": run_separation,
    "scaling": run_scaling,
}


# ---------------------------------------------------------------------------
# argument parsing


def _depth_argument(text: str):
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or an integer, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polsphere",
        description="Induced-charge electrostatics of many dielectric spheres.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "solve": "solve for the induced surface charge",
        "forces": "compute per-sphere electrostatic forces",
        "convergence": "error vs truncation degree",
        "nstudy": "error and iteration counts vs particle count",
        "separation": "two-sphere error vs surface separation",
        "scaling": "wall-clock timing vs particle count",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", metavar="PATH", help="JSON configuration or a previous manifest")
        p.add_argument("--out", metavar="DIR", help="output directory (default '.')")
        p.add_argument("--backend", choices=("direct", "tree"))
        p.add_argument("--lmax", type=int, help="truncation degree of the surface densities")
        p.add_argument("--tol", type=float, help="solver relative residual tolerance")
        p.add_argument("--tree-depth", type=_depth_argument, metavar="D", help="octree depth or 'auto'")
        p.add_argument("--tree-order", type=int, metavar="P", help="octree expansion order")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides = {
        "output_dir": args.out,
        "backend": args.backend,
        "lmax": args.lmax,
        "tolerance": args.tol,
        "tree_depth": args.tree_depth,
        "tree_order": args.tree_order,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.no_figures:
        overrides["figures"] = False
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = resolve_config(args.command, file_cfg, _overrides_from_args(args))
        files = _RUNNERS[args.command](cfg)
    except (ConfigError, OverlapError, NonPositiveParameter) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in files:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
