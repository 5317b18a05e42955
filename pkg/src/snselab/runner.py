"""Command-line front end: configs, dispatch, artifacts, replay.

A run is described by an INI-style key-value file; command-line flags
override file values, and the merged effective configuration is what the
emitted manifest records.  Every artifact in a run directory is a
deterministic function of (manifest, build): CSV tables, the JSON summary
(schema "snse-lab/1"), and checkpoints carry no timestamps or machine
state, so `replay` can regenerate and byte-compare them.

Exit codes: 0 success, 2 configuration error, 3 numerical error (solver
or transport capacity), 4 acceptance-band failure under --enforce.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as exp
from . import forcing as forcing_mod
from . import integrator as integ
from . import measures as measures_mod
from . import rng, spectral
from .errors import (CapacityError, ConfigError, FitError, RangeError,
                     SnseLabError, SolverError, StructuralError)
from .experiments import InitialCondition, ObservableSpec
from .measures import DistanceParams

log = logging.getLogger("snselab")

SCHEMA = "snse-lab/1"
SUBCOMMANDS = ("simulate", "converge-time", "converge-space", "holder",
               "contraction", "weak", "bias", "couple", "certify-metric",
               "replay")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ACCEPTANCE = 4


# -- configuration ----------------------------------------------------------------

def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _parse_list(text: str) -> tuple:
    return tuple(_parse_scalar(tok) for tok in text.split(",") if tok.strip())


@dataclass
class RunConfig:
    """Validated, fully-defaulted run description (a plain nested dict)."""

    sections: dict

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        val = self.get(section, key)
        if val is None:
            raise ConfigError("missing required value", field=f"{section}.{key}")
        return val


_LIST_KEYS = {
    ("discretization", "delta_ladder"), ("discretization", "shells_ladder"),
    ("experiment", "deltas"), ("experiment", "shells_list"),
    ("experiment", "n_ladder"), ("experiment", "perturbations"),
    ("forcing", "amplitudes"),
}

_DEFAULTS = {
    "physics": {"nu": 1.0},
    "forcing": {"preset": "low-mode", "shells": 4, "variance": 0.5},
    "discretization": {"shells": 16, "delta": 0.01, "delta0": None},
    "experiment": {"kind": None, "horizon": 1.0, "ensemble": 128},
    "distance": {"eps": 0.1, "s": 0.5, "alpha": "auto"},
    "nudge": {"shells": 8, "beta": "auto", "compute_shifts": True,
              "perturbation": 1e-2},
    "observable": {"kind": "clipped-norm", "radius": 4.0,
                   "mode_kx": 1, "mode_ky": 0},
    "initial": {"kind": "random", "amplitude": 1.0, "spectral_slope": -3.0},
    "reproducibility": {"seed": 0, "record_stride": 1},
    "io": {"out_dir": "runs/out", "checkpoint_cadence": 0},
}


def load_config(path: str | None) -> RunConfig:
    sections = {name: dict(vals) for name, vals in _DEFAULTS.items()}
    if path is not None:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = cp.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}", field="config")
        for section in cp.sections():
            tgt = sections.setdefault(section, {})
            for key, raw in cp.items(section):
                if (section, key) in _LIST_KEYS or "," in raw:
                    tgt[key] = _parse_list(raw)
                else:
                    tgt[key] = _parse_scalar(raw)
    return RunConfig(sections)


def _validate_common(cfg: RunConfig) -> None:
    nu = cfg.get("physics", "nu")
    if not isinstance(nu, (int, float)) or nu <= 0:
        raise ConfigError("viscosity must be a positive number", field="physics.nu")
    delta = cfg.get("discretization", "delta")
    delta0 = cfg.get("discretization", "delta0")
    if delta0 is not None and delta is not None and delta > delta0:
        raise ConfigError(f"delta={delta} exceeds delta0={delta0}",
                          field="discretization.delta")
    for key in ("delta_ladder", "shells_ladder"):
        ladder = cfg.get("discretization", key)
        if ladder is not None:
            diffs = np.diff(np.asarray(ladder, dtype=float))
            if not (np.all(diffs > 0) or np.all(diffs < 0)):
                raise ConfigError("ladder must be strictly monotone",
                                  field=f"discretization.{key}")
    stride = cfg.get("reproducibility", "record_stride")
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError("record_stride must be a positive integer",
                          field="reproducibility.record_stride")


def effective_manifest(cfg: RunConfig, subcommand: str,
                       seed: int) -> configparser.ConfigParser:
    """The merged config (every defaulted field echoed) plus run metadata.

    Thread count is deliberately absent: parallelism never changes any
    emitted number, so it is not part of what a run *is*.
    """
    out = configparser.ConfigParser()
    out["meta"] = {"schema": SCHEMA, "version": __version__,
                   "subcommand": subcommand, "seed": str(seed)}
    for section in sorted(cfg.sections):
        body = {}
        for key in sorted(cfg.sections[section]):
            val = cfg.sections[section][key]
            if val is None:
                continue
            if isinstance(val, tuple):
                body[key] = ", ".join(_fmt(v) for v in val)
            else:
                body[key] = _fmt(val)
        out[section] = body
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


# -- artifact emission --------------------------------------------------------------

def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) or isinstance(v, np.floating):
        return format(float(v), ".17g")
    return str(v)


def write_table_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_csv_cell(row.get(k, "")) for k in keys])


def _jsonable(obj):
    if isinstance(obj, exp.RateFit):
        return obj.as_dict()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def write_bundle(report: exp.StudyReport, out_dir: Path,
                 manifest: configparser.ConfigParser,
                 extra_checks: dict | None = None) -> dict:
    """Emit manifest, per-table CSVs, and the JSON summary; returns summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.cfg", "w") as fh:
        manifest.write(fh)
    tables_dir = out_dir / "tables"
    tables_dir.mkdir(exist_ok=True)
    for name, rows in report.tables.items():
        write_table_csv(rows, tables_dir / f"{name}.csv")
    checks = dict(report.checks)
    if extra_checks:
        checks.update(extra_checks)
    summary = {
        "schema": SCHEMA,
        "study": report.name,
        "seed": report.seed,
        "fits": {k: v.as_dict() for k, v in report.fits.items()},
        "scalars": _jsonable(report.scalars),
        "checks": _jsonable(checks),
        "notes": list(report.notes),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- trajectory checkpoints -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint(state: spectral.SpectralField, params: integ.SchemeParams,
               seed: int, trajectory_id: int, step_index: int, directory: Path) -> Path:
    """Persist a state plus the manifest needed for exact continuation."""
    directory.mkdir(parents=True, exist_ok=True)
    field_path = directory / f"state_{step_index:08d}.fld"
    spectral.save_field(state, field_path)
    meta = {"format_version": CHECKPOINT_VERSION, "step_index": step_index,
            "seed": seed, "trajectory_id": trajectory_id,
            "params": {"nu": params.nu, "delta": params.delta,
                       "shells": params.shells, "delta0": params.delta0,
                       "solver": params.solver, "tol": params.tol,
                       "max_iter": params.max_iter}}
    (directory / f"state_{step_index:08d}.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return field_path


def restore(field_path: Path):
    """Load (state, params, seed, trajectory_id, step_index) from a checkpoint."""
    field_path = Path(field_path)
    state = spectral.load_field(field_path)
    meta_path = field_path.with_suffix(".json")
    if not meta_path.exists():
        raise StructuralError(f"missing checkpoint manifest {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise StructuralError(
            f"checkpoint format version {meta.get('format_version')} unsupported")
    p = meta["params"]
    params = integ.SchemeParams(p["nu"], p["delta"], p["shells"], p["delta0"],
                                p["solver"], p["tol"], p["max_iter"])
    if params.shells != state.grid.shells:
        raise StructuralError("checkpoint cutoff does not match its manifest")
    return state, params, meta["seed"], meta["trajectory_id"], meta["step_index"]


# -- study assembly from config ----------------------------------------------------------

def _initial_condition(cfg: RunConfig) -> InitialCondition:
    sec = cfg.sections.get("initial", {})
    return InitialCondition(
        kind=sec.get("kind", "random"),
        amplitude=float(sec.get("amplitude", 1.0)),
        spectral_slope=float(sec.get("spectral_slope", -3.0)),
        mode=(int(sec.get("mode_kx", 1)), int(sec.get("mode_ky", 0))),
        mode_kind=sec.get("mode_kind", "cos"))


def _observable(cfg: RunConfig) -> ObservableSpec:
    sec = cfg.sections.get("observable", {})
    return ObservableSpec(kind=sec.get("kind", "clipped-norm"),
                          radius=float(sec.get("radius", 4.0)),
                          mode=(int(sec.get("mode_kx", 1)),
                                int(sec.get("mode_ky", 0))))


def _alpha(cfg: RunConfig) -> float | None:
    a = cfg.get("distance", "alpha")
    if a == "auto" or a is None:
        return None
    return float(a)


def _forcing_args(cfg: RunConfig) -> tuple[int, float]:
    return (int(cfg.get("forcing", "shells")),
            float(cfg.get("forcing", "variance")))


def build_forcing(cfg: RunConfig, grid) -> forcing_mod.ForcingBasis:
    """Forcing from the [forcing] section.

    preset = low-mode: directions span the first `shells` eigenvalue
    shells; total `variance` split evenly unless an explicit `amplitudes`
    list (one per direction, cos and sin per wavevector) is given.
    preset = explicit: numbered keys dir1, dir2, ... with values
    "kx, ky, cos|sin, amplitude" building one direction each.
    """
    sec = cfg.sections.get("forcing", {})
    preset = sec.get("preset", "low-mode")
    if preset == "low-mode":
        shells, variance = _forcing_args(cfg)
        amplitudes = sec.get("amplitudes")
        return forcing_mod.low_mode_basis(grid, shells, variance, amplitudes)
    if preset == "explicit":
        fields = []
        for key in sorted(k for k in sec if k.startswith("dir")):
            val = sec[key]
            if not isinstance(val, tuple) or len(val) != 4:
                raise ConfigError("expected 'kx, ky, cos|sin, amplitude'",
                                  field=f"forcing.{key}")
            kx, ky, kind, amp = val
            fields.append(spectral.harmonic_field(grid, int(kx), int(ky),
                                                  kind=str(kind),
                                                  amplitude=float(amp),
                                                  normalized=True))
        if not fields:
            raise ConfigError("explicit preset needs dir1, dir2, ... entries",
                              field="forcing.preset")
        return forcing_mod.basis_from_fields(fields)
    raise ConfigError(f"unknown forcing preset {preset!r}", field="forcing.preset")


def _band_check(value: float, lo: float, hi: float) -> bool:
    return bool(lo <= value <= hi)


def run_study(subcommand: str, cfg: RunConfig, seed: int, threads: int) -> tuple:
    """Build, run, and band-check the study behind one subcommand."""
    f_shells, f_var = _forcing_args(cfg)
    nu = float(cfg.get("physics", "nu"))
    ic = _initial_condition(cfg)
    e = cfg.sections.get("experiment", {})
    checks: dict[str, bool] = {}

    if subcommand == "converge-time":
        deltas = e.get("deltas") or cfg.get("discretization", "delta_ladder") \
            or exp.TemporalOrderConfig.deltas
        study = exp.TemporalOrderConfig(
            deltas=tuple(float(d) for d in deltas),
            shells=int(cfg.get("discretization", "shells")),
            horizon=float(e.get("horizon", 1.0)),
            ensemble=int(e.get("ensemble", 128)),
            nu=nu, forcing_shells=f_shells, forcing_variance=f_var,
            refine=int(e.get("refine", 16)),
            p_moment=float(e.get("p_moment", 0.5)),
            ic=ic, noise_on=bool(e.get("noise_on", True)), threads=threads)
        report = exp.temporal_order_study(study, seed)
        fit = report.fits["order_p"]
        checks["temporal-order-band"] = _band_check(fit.slope, 0.40, 0.60)
        checks["temporal-order-r2"] = fit.r_squared >= 0.97
    elif subcommand == "converge-space":
        ladder = e.get("shells_list") or cfg.get("discretization", "shells_ladder") \
            or exp.SpatialOrderConfig.shell_ladder
        study = exp.SpatialOrderConfig(
            shell_ladder=tuple(int(s) for s in ladder),
            reference_shells=int(e.get("reference_shells", 24)),
            delta=float(cfg.get("discretization", "delta")),
            horizon=float(e.get("horizon", 0.5)),
            ensemble=int(e.get("ensemble", 96)),
            nu=nu, forcing_shells=f_shells, forcing_variance=f_var,
            ic=_initial_condition(cfg), threads=threads)
        report = exp.spatial_order_study(study, seed)
        if "order_sq_vs_modes" in report.fits:
            fit = report.fits["order_sq_vs_modes"]
            checks["spatial-order-band"] = _band_check(fit.slope, -1.3, -0.7)
            checks["spatial-order-r2"] = fit.r_squared >= 0.9
    elif subcommand == "holder":
        study = exp.HolderConfig(
            shells=int(cfg.get("discretization", "shells")),
            delta=float(cfg.get("discretization", "delta")),
            burn_steps=int(e.get("burn_steps", 128)),
            window_steps=int(e.get("window_steps", 256)),
            lag_min_steps=int(e.get("lag_min_steps", 2)),
            lag_max_steps=int(e.get("lag_max_steps", 200)),
            moment=int(e.get("moment", 2)),
            ensemble=int(e.get("ensemble", 64)),
            nu=nu, forcing_shells=f_shells, forcing_variance=f_var,
            ic=ic, threads=threads)
        report = exp.holder_study(study, seed)
        checks["holder-band"] = _band_check(report.scalars["exponent"], 0.7, 1.1)
    elif subcommand == "contraction":
        study = exp.ContractionConfig(
            shells_list=tuple(int(s) for s in e.get("shells_list", (3, 4, 5))),
            deltas=tuple(float(d) for d in e.get("deltas", (0.02, 0.01, 0.005))),
            horizon=float(e.get("horizon", 12.0)),
            record_time=float(e.get("record_time", 0.5)),
            ensemble=int(e.get("ensemble", 32)),
            nu=nu,
            forcing_shells=min(f_shells, min(int(s) for s in e.get("shells_list", (3, 4, 5)))),
            forcing_variance=f_var,
            gap_amplitude=float(e.get("gap_amplitude", 1.0)),
            eps=float(e.get("eps", 1.0)), s=float(e.get("s", 1.0)),
            alpha=_alpha(cfg), ic=ic, threads=threads)
        report = exp.contraction_study(study, seed)
    elif subcommand == "weak":
        study = exp.WeakErrorConfig(
            shells_list=tuple(int(s) for s in e.get("shells_list", (4, 8, 12))),
            deltas=tuple(float(d) for d in e.get("deltas", (0.04, 0.02, 0.01))),
            reference_shells=int(e.get("reference_shells", 16)),
            reference_delta=float(e.get("reference_delta", 0.005)),
            horizon=float(e.get("horizon", 4.0)),
            record_time=float(e.get("record_time", 0.2)),
            ensemble=int(e.get("ensemble", 128)),
            nu=nu, forcing_shells=f_shells, forcing_variance=f_var,
            observables=(_observable(cfg),),
            eps=float(cfg.get("distance", "eps")),
            s=float(cfg.get("distance", "s")),
            alpha=_alpha(cfg),
            report_lipschitz=bool(e.get("report_lipschitz", False)),
            ic=ic, threads=threads)
        report = exp.weak_error_study(study, seed)
    elif subcommand == "bias":
        n_ladder = e.get("n_ladder", exp.StationaryBiasConfig.n_ladder)
        study = exp.StationaryBiasConfig(
            shells=int(cfg.get("discretization", "shells")),
            delta=float(cfg.get("discretization", "delta")),
            n_ladder=tuple(int(n) for n in n_ladder),
            replicas=int(e.get("replicas", 64)),
            reference_steps=int(e.get("reference_steps", 80_000)),
            burn_fraction=float(e.get("burn_fraction", 0.5)),
            mse_burn_steps=int(e.get("mse_burn_steps", 100)),
            nu=nu, forcing_shells=f_shells, forcing_variance=f_var,
            observable=_observable(cfg), ic=ic, threads=threads)
        report = exp.stationary_bias_study(study, seed)
        checks["bias-exponent-band"] = _band_check(
            report.scalars["bias_exponent"], 0.7, 1.3)
        checks["mse-exponent-band"] = _band_check(
            report.scalars["mse_exponent"], 0.7, 1.3)
    elif subcommand == "couple":
        n = cfg.sections.get("nudge", {})
        beta = n.get("beta", "auto")
        perturbations = e.get("perturbations") or (float(n.get("perturbation", 1e-2)),)
        study = exp.CouplingStudyConfig(
            shells=int(cfg.get("discretization", "shells")),
            delta=float(cfg.get("discretization", "delta")),
            horizon=float(e.get("horizon", 10.0)),
            shells_controlled=int(n.get("shells", 8)),
            beta=None if beta == "auto" else float(beta),
            perturbations=tuple(float(p) for p in perturbations),
            ensemble=int(e.get("ensemble", 64)),
            nu=nu, forcing_shells=f_shells, forcing_variance=f_var,
            compute_shifts=bool(n.get("compute_shifts", True)),
            ic=ic, threads=threads)
        report = exp.coupling_study(study, seed)
        rows = report.tables["perturbations"]
        checks["gap-decay"] = all(
            r["exact_coupling"] or r["gap_ratio"] <= 1e-3 for r in rows)
        checks["per-step-factor"] = all(
            r["exact_coupling"] or (r["per_step_log_factor"] is not None
                                    and r["per_step_log_factor"] <= 0.0
                                    and r["r_squared"] >= 0.9) for r in rows)
        if "kl_linearity_slope" in report.scalars:
            checks["kl-linearity-band"] = _band_check(
                report.scalars["kl_linearity_slope"], 0.8, 1.2)
            checks["kl-majorant-spread"] = report.scalars["kl_ratio_spread"] <= 10.0
    elif subcommand == "certify-metric":
        report = certify_metric_report(cfg, seed,
                                       n_triples=int(e.get("triples", 10_000)))
        checks.update(report.checks)
    else:
        raise ConfigError(f"unknown experiment kind {subcommand!r}",
                          field="experiment.kind")
    return report, checks


def certify_metric_report(cfg: RunConfig, seed: int,
                          n_triples: int = 10_000) -> exp.StudyReport:
    """Metric axioms of the clamped distance plus the weighted generalized
    triangle inequality, tested on random field triples."""
    shells = int(cfg.get("discretization", "shells"))
    grid = spectral.make_grid(shells)
    f_shells, f_var = _forcing_args(cfg)
    nu = float(cfg.get("physics", "nu"))
    alpha = _alpha(cfg)
    if alpha is None:
        alpha = measures_mod.default_alpha(nu, f_var)
    dp = DistanceParams(float(cfg.get("distance", "eps")),
                        float(cfg.get("distance", "s")), alpha)

    z = rng.standard_normals(seed, [0], np.arange(3 * n_triples),
                             2 * grid.n_half, tag=rng.Tag.SAMPLES)[0]
    # normalized so |field| ~ O(1), matching the energy scale of the dynamics
    norm = 2.0 * np.pi * np.sqrt(2.0 * grid.n_half)
    fields = (z[:, :grid.n_half] + 1j * z[:, grid.n_half:]) / norm
    triples = fields.reshape(n_triples, 3, grid.n_half)

    d_uv = np.sqrt(spectral.norm_l2_sq(triples[:, 0] - triples[:, 1]))
    d_uw = np.sqrt(spectral.norm_l2_sq(triples[:, 0] - triples[:, 2]))
    d_wv = np.sqrt(spectral.norm_l2_sq(triples[:, 2] - triples[:, 1]))
    r_uv = measures_mod.rho_from_dist(d_uv, dp)
    r_uw = measures_mod.rho_from_dist(d_uw, dp)
    r_wv = measures_mod.rho_from_dist(d_wv, dp)
    metric_violations = int(np.sum(r_uv > r_uw + r_wv + 1e-12))

    cert = measures_mod.certify_triangle(
        dp, 2.0, ((triples[i, 0], triples[i, 1], triples[i, 2])
                  for i in range(n_triples)))

    report = exp.StudyReport("metric-certification",
                             {"eps": dp.eps, "s": dp.s, "alpha": dp.alpha,
                              "gamma": 2.0, "n_triples": n_triples, "shells": shells},
                             seed)
    report.scalars["k_tilde"] = cert.k_tilde
    report.scalars["metric_triangle_violations"] = metric_violations
    report.scalars["weighted_triangle_violations"] = len(cert.violations)
    report.checks["metric-axioms"] = metric_violations == 0
    report.checks["weighted-triangle"] = len(cert.violations) == 0
    report.tables["violations"] = [
        {"index": i, "log_lhs": a, "log_rhs": b} for i, a, b in cert.violations]
    return report


# -- simulate / replay ---------------------------------------------------------------

def run_simulate(cfg: RunConfig, seed: int, out_dir: Path,
                 manifest: configparser.ConfigParser) -> dict:
    shells = int(cfg.get("discretization", "shells"))
    delta = float(cfg.get("discretization", "delta"))
    delta0 = cfg.get("discretization", "delta0")
    p = integ.SchemeParams(float(cfg.get("physics", "nu")), delta, shells,
                           None if delta0 is None else float(delta0),
                           solver=cfg.get("discretization", "solver",
                                          "fixed-point"),
                           tol=float(cfg.get("discretization", "tol", 1e-12)))
    grid = p.grid()
    basis = build_forcing(cfg, grid)
    ic = _initial_condition(cfg)
    xi0 = ic.build(grid, seed)
    n_steps = int(cfg.get("experiment", "steps", 0))
    stride = int(cfg.get("reproducibility", "record_stride"))
    cadence = int(cfg.get("io", "checkpoint_cadence"))

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.cfg", "w") as fh:
        manifest.write(fh)
    ck_root = out_dir / "checkpoints" / _manifest_digest(manifest)
    checkpoint(xi0, p, seed, 0, 0, ck_root)

    rows = []
    if n_steps > 0:
        stream = forcing_mod.NoiseStream(seed, 0)
        traj = integ.simulate(xi0, n_steps, p, basis, stream, record_stride=stride)
        for i, n in enumerate(range(n_steps + 1)):
            rows.append({"step": n, "t": n * delta,
                         "energy_sq": float(traj.energy_sq[n]),
                         "h1_sq": float(traj.h1_sq[n]),
                         "iterations": int(traj.iterations[n - 1]) if n > 0 else 0})
        if cadence > 0:
            for i, n in enumerate(traj.step_indices):
                if n > 0 and n % cadence == 0:
                    checkpoint(traj.state(i), p, seed, 0, int(n), ck_root)
        checkpoint(traj.final(), p, seed, 0, int(traj.step_indices[-1]), ck_root)
    else:
        rows.append({"step": 0, "t": 0.0, "energy_sq": xi0.l2_norm() ** 2,
                     "h1_sq": spectral.sobolev_norm_sq(grid, xi0.coeffs, 1.0),
                     "iterations": 0})
    tables_dir = out_dir / "tables"
    tables_dir.mkdir(exist_ok=True)
    write_table_csv(rows, tables_dir / "diagnostics.csv")
    summary = {"schema": SCHEMA, "study": "simulate", "seed": seed,
               "scalars": {"steps": n_steps,
                           "final_energy_sq": rows[-1]["energy_sq"]},
               "checks": {}, "fits": {}, "notes": []}
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _manifest_digest(manifest: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    manifest.write(buf)
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()[:16]


def run_replay(run_dir: Path, out_dir: Path | None) -> int:
    """Re-execute a run from its manifest and byte-compare the artifacts."""
    manifest_path = run_dir / "manifest.cfg"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest at {manifest_path}", field="replay")
    cp = configparser.ConfigParser()
    cp.read(manifest_path)
    subcommand = cp.get("meta", "subcommand")
    seed = cp.getint("meta", "seed")
    cfg = load_config(str(manifest_path))
    cfg.sections.pop("meta", None)

    replay_dir = out_dir if out_dir is not None else run_dir / "replay"
    execute(subcommand, cfg, seed, 1, replay_dir, enforce=False)

    mismatches = []
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file() or replay_dir in path.parents:
            continue
        rel = path.relative_to(run_dir)
        if rel.parts and rel.parts[0] == "replay":
            continue
        twin = replay_dir / rel
        if not twin.exists():
            mismatches.append(f"missing from replay: {rel}")
        elif path.read_bytes() != twin.read_bytes():
            mismatches.append(f"differs: {rel}")
    if mismatches:
        for m in mismatches:
            log.error("replay mismatch: %s", m)
        return 1
    log.info("replay reproduced %s byte-identically", run_dir)
    return 0


def execute(subcommand: str, cfg: RunConfig, seed: int, threads: int,
            out_dir: Path, enforce: bool) -> int:
    _validate_common(cfg)
    manifest = effective_manifest(cfg, subcommand, seed)
    if subcommand == "simulate":
        run_simulate(cfg, seed, out_dir, manifest)
        return EXIT_OK
    report, checks = run_study(subcommand, cfg, seed, threads)
    summary = write_bundle(report, out_dir, manifest, checks)
    failed = [k for k, ok in summary["checks"].items() if not ok]
    for key, ok in sorted(summary["checks"].items()):
        log.info("%s: %s", key, "pass" if ok else "FAIL")
    if failed and enforce:
        log.error("acceptance checks failed: %s", ", ".join(failed))
        return EXIT_ACCEPTANCE
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="snse-lab",
        description="Stochastic 2D Navier-Stokes vorticity laboratory")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "replay":
            p.add_argument("run_dir", type=Path)
            p.add_argument("--out", type=Path, default=None)
            p.add_argument("-v", "--verbose", action="store_true")
            continue
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--enforce", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            p.add_argument("--steps", type=int, default=None)
        if name == "couple":
            p.add_argument("--nudge-shells", type=int, default=None)
            p.add_argument("--beta", default=None)
            p.add_argument("--perturbation", default=None)
            p.add_argument("--ensemble", type=int, default=None)
            p.add_argument("--horizon", type=float, default=None)
        if name == "certify-metric":
            p.add_argument("--triples", type=int, default=None)
    return ap


def _apply_cli_overrides(args, cfg: RunConfig) -> None:
    if getattr(args, "steps", None) is not None:
        cfg.sections.setdefault("experiment", {})["steps"] = args.steps
    if getattr(args, "triples", None) is not None:
        cfg.sections.setdefault("experiment", {})["triples"] = args.triples
    if getattr(args, "ensemble", None) is not None:
        cfg.sections.setdefault("experiment", {})["ensemble"] = args.ensemble
    if getattr(args, "horizon", None) is not None:
        cfg.sections.setdefault("experiment", {})["horizon"] = args.horizon
    if getattr(args, "nudge_shells", None) is not None:
        cfg.sections.setdefault("nudge", {})["shells"] = args.nudge_shells
    if getattr(args, "beta", None) is not None:
        cfg.sections.setdefault("nudge", {})["beta"] = _parse_scalar(args.beta)
    if getattr(args, "perturbation", None) is not None:
        cfg.sections.setdefault("experiment", {})["perturbations"] = \
            _parse_list(args.perturbation)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.subcommand == "replay":
            return EXIT_ACCEPTANCE if run_replay(args.run_dir, args.out) else EXIT_OK
        cfg = load_config(args.config)
        _apply_cli_overrides(args, cfg)
        seed = args.seed if args.seed is not None else int(
            cfg.get("reproducibility", "seed"))
        out_dir = args.out if args.out is not None else Path(
            cfg.get("io", "out_dir"))
        return execute(args.subcommand, cfg, seed, args.threads, out_dir,
                       args.enforce)
    except ConfigError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    except FitError as err:
        log.error("fit refused: %s", err)
        return EXIT_CONFIG
    except (SolverError, CapacityError, RangeError) as err:
        log.error("numerical error: %s", err)
        return EXIT_NUMERICAL
    except SnseLabError as err:
        log.error("%s", err)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
