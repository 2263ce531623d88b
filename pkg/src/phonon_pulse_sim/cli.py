"""Command-line experiment runner.

Declarative JSON configs (strictly validated, unknown keys rejected) are
resolved against named presets, executed, and written out as CSV time
series plus a JSON run manifest and a small matplotlib plot script.  The
same resolved config is echoed into the manifest, so a run can always be
repeated from its own manifest.  Exit codes: 0 success, 2 config error,
3 physics invariant breach, 4 I/O failure, 5 reproduction check failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import importlib.util
import json
import math
import os
import subprocess
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .dynamics import (
    IntegratorConfig,
    ensemble_average,
    evolve_master,
    evolve_schrodinger,
    mcwf_trajectory,
    standard_observables,
)
from .exceptions import (
    ConfigError,
    IntegrationError,
    InvalidParameterError,
    NoExtremumError,
    PhononPulseError,
    ReproduceCheckError,
    TruncationInsufficientError,
    UndefinedCorrelationError,
    UndefinedDarkStateError,
)
from .fockspace import find_g_n
from .model import (
    HilbertConfig,
    PhysicalParams,
    PulseTrain,
    named_presets,
    pulse_amplitude,
    rotating_hamiltonian,
    static_hamiltonian,
    validity_margin,
)
from .observables import analyze_correlation, pair_emission_statistics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHYSICS = 3
EXIT_IO = 4
EXIT_CHECK = 5

_EXPERIMENTS = (
    "pure-evolve",
    "master-evolve",
    "trajectory",
    "ensemble",
    "correlations",
    "find-gn",
    "validity-check",
)

_SECTION_KEYS = {
    "params": ("g", "delta_1", "delta_2", "omega_m", "kappa", "gamma_m", "n_th", "theta_b"),
    "pulses": ("omega_0", "sigma", "t1", "t2", "period", "window_sigmas"),
    "hilbert": ("n_a", "n_b"),
    "integrator": (
        "t_start",
        "t_end",
        "n_samples",
        "rel_tol",
        "abs_tol",
        "max_step",
        "max_step_pulse",
        "method",
        "check_invariants",
    ),
    "correlations": ("orders", "window", "tau_max", "n_tau"),
    "find_gn": ("n",),
}

_TOP_KEYS = (
    "preset",
    "experiment",
    "params",
    "pulses",
    "hilbert",
    "integrator",
    "initial_state",
    "n_traj",
    "base_seed",
    "pair_window",
    "output_dir",
    "correlations",
    "find_gn",
)

# Experiment-shape defaults layered on top of the physics presets.
_PRESET_SHAPES = {
    "paper-fig2": {
        "experiment": "pure-evolve",
        "integrator": {"t_start": 0.0, "t_end": 3000.0, "n_samples": 601},
    },
    "paper-fig3": {
        "experiment": "master-evolve",
        "integrator": {"t_start": 0.0, "t_end": 30000.0, "n_samples": 1501},
    },
    "paper-fig4": {
        "experiment": "trajectory",
        "integrator": {"t_start": 0.0, "t_end": 30000.0, "n_samples": 1501},
    },
    "paper-fig5": {
        "experiment": "correlations",
        "integrator": {"t_start": 0.0, "t_end": 18600.0, "n_samples": 931},
        "correlations": {
            "orders": [1, 2],
            "window": [3500.0, 18500.0],
            "tau_max": 7500.0,
            "n_tau": 51,
        },
    },
    "experimental": {
        "experiment": "master-evolve",
        "integrator": {"t_start": 0.0, "t_end": 30000.0, "n_samples": 1501},
    },
}

_MARGIN_THRESHOLD = 10.0


def default_config():
    """Fully populated config dict before any preset or user layer."""
    params, train = named_presets()["paper-fig2"]
    return {
        "preset": None,
        "experiment": None,
        "params": asdict(params),
        "pulses": asdict(train),
        "hilbert": {"n_a": 3, "n_b": 15},
        "integrator": {
            "t_start": 0.0,
            "t_end": 3000.0,
            "n_samples": 601,
            "rel_tol": 1e-8,
            "abs_tol": 1e-10,
            "max_step": None,
            "max_step_pulse": None,
            "method": "RK45",
            "check_invariants": True,
        },
        "initial_state": "vacuum",
        "n_traj": 1,
        "base_seed": 0,
        "pair_window": None,
        "output_dir": None,
        "correlations": {
            "orders": [1, 2],
            "window": [3500.0, 18500.0],
            "tau_max": 7500.0,
            "n_tau": 51,
        },
        "find_gn": {"n": 2},
    }


def _check_keys(section, mapping):
    allowed = _SECTION_KEYS[section] if section else _TOP_KEYS
    for key in mapping:
        if key not in allowed:
            where = f"section {section!r}" if section else "top level"
            raise ConfigError(f"unknown key {key!r} at {where}")


def _merge_layer(base, layer):
    _check_keys(None, layer)
    for key, value in layer.items():
        if isinstance(value, dict) and key in _SECTION_KEYS:
            _check_keys(key, value)
            if base[key] is None:
                base[key] = copy.deepcopy(default_config()[key])
            base[key].update(value)
        else:
            if key in _SECTION_KEYS and value is not None and not isinstance(value, dict):
                raise ConfigError(f"key {key!r} must be an object or null")
            base[key] = copy.deepcopy(value)
    return base


def preset_layer(name):
    """Config fragment for one named preset (physics plus run shape)."""
    presets = named_presets()
    if name not in presets:
        known = ", ".join(sorted(presets))
        raise ConfigError(f"unknown preset {name!r} (known: {known})")
    params, train = presets[name]
    layer = {"preset": name, "params": asdict(params), "pulses": asdict(train)}
    for key, value in _PRESET_SHAPES[name].items():
        layer[key] = copy.deepcopy(value)
    return layer


def _parse_set(expr):
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_set(cfg, key, value):
    parts = key.split(".")
    if parts[0] not in _TOP_KEYS:
        raise ConfigError(f"unknown config key {parts[0]!r}")
    if len(parts) == 1:
        if parts[0] in _SECTION_KEYS and value is not None and not isinstance(value, dict):
            raise ConfigError(f"key {key!r} must be an object or null")
        if isinstance(value, dict) and parts[0] in _SECTION_KEYS:
            _check_keys(parts[0], value)
        cfg[parts[0]] = value
        return
    if len(parts) != 2 or parts[0] not in _SECTION_KEYS:
        raise ConfigError(f"cannot address {key!r}")
    section, leaf = parts
    if leaf not in _SECTION_KEYS[section]:
        raise ConfigError(f"unknown key {leaf!r} in section {section!r}")
    if cfg[section] is None:
        raise ConfigError(f"section {section!r} is null; set it to an object first")
    cfg[section][leaf] = value


def resolve_config(config_path=None, preset=None, set_exprs=()):
    """Layer defaults, preset, config file, and --set overrides, strictly."""
    file_layer = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_layer = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {config_path}: {exc}") from exc
        if not isinstance(file_layer, dict):
            raise ConfigError("config file must hold a JSON object")
        _check_keys(None, file_layer)
    effective_preset = preset if preset is not None else file_layer.get("preset")
    cfg = default_config()
    if effective_preset is not None:
        _merge_layer(cfg, preset_layer(effective_preset))
    _merge_layer(cfg, file_layer)
    cfg["preset"] = effective_preset
    for expr in set_exprs:
        key, value = _parse_set(expr)
        _apply_set(cfg, key, value)
    if cfg["experiment"] is None:
        raise ConfigError("no experiment selected (set 'experiment' or use a preset)")
    if cfg["experiment"] not in _EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {cfg['experiment']!r} (known: {', '.join(_EXPERIMENTS)})"
        )
    return cfg


def _materialize(cfg):
    """Turn the resolved dict into domain objects (validating as we go)."""
    try:
        params = PhysicalParams(**cfg["params"])
        train = None if cfg["pulses"] is None else PulseTrain(**cfg["pulses"])
        hc = HilbertConfig(**cfg["hilbert"])
        integ = dict(cfg["integrator"])
        t_start, t_end = float(integ.pop("t_start")), float(integ.pop("t_end"))
        n_samples = int(integ.pop("n_samples"))
        if not t_end > t_start or n_samples < 2:
            raise ConfigError("integrator needs t_end > t_start and n_samples >= 2")
        icfg = IntegratorConfig(
            sample_times=np.linspace(t_start, t_end, n_samples), **integ
        )
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    psi0 = _initial_vector(cfg["initial_state"], hc)
    n_traj = cfg["n_traj"]
    if int(n_traj) != n_traj or n_traj < 1:
        raise ConfigError(f"n_traj must be a positive integer, got {n_traj!r}")
    return params, train, hc, icfg, psi0


def _initial_vector(spec, hc):
    if spec == "vacuum" or spec is None:
        return None
    if (
        isinstance(spec, (list, tuple))
        and len(spec) == 2
        and all(int(x) == x for x in spec)
    ):
        n, m = int(spec[0]), int(spec[1])
        if not (0 <= n < hc.n_a and 0 <= m < hc.n_b):
            raise ConfigError(f"initial state [{n}, {m}] outside the truncation")
        vec = np.zeros(hc.dim, dtype=complex)
        vec[n * hc.n_b + m] = 1.0
        return vec
    raise ConfigError(f"initial_state must be 'vacuum' or [n, m], got {spec!r}")


class RunOutput:
    """Tables, manifest fields, and raw arrays produced by one experiment."""

    def __init__(self):
        self.tables = {}  # filename -> (header list, column list)
        self.results = {}
        self.checks = []
        self.raw = {}
        self.notes = []

    def add_check(self, name, value, limit, ok, direction="<"):
        self.checks.append(
            {
                "name": name,
                "value": _json_safe(value),
                "limit": limit,
                "direction": direction,
                "status": "pass" if ok else "warn",
            }
        )


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def _margin_check(out, params, train):
    if train is None:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        margin = validity_margin(params, train.omega_0, threshold=_MARGIN_THRESHOLD)
    out.add_check(
        "validity_margin", margin, _MARGIN_THRESHOLD, margin >= _MARGIN_THRESHOLD, ">"
    )


def _drive_table(train, times):
    return (
        ["time[1/omega_m]", "Omega_1[omega_m]", "Omega_2[omega_m]"],
        [times, pulse_amplitude(train, "pump", times), pulse_amplitude(train, "stokes", times)],
    )


def _observable_tables(times, cols):
    pop_names = [name for name in cols if name.startswith("P_")]
    tables = {
        "populations.csv": (
            ["time[1/omega_m]"] + [f"{n}[1]" for n in pop_names],
            [times] + [cols[n] for n in pop_names],
        ),
        "mean_phonon.csv": (
            ["time[1/omega_m]", "mean_phonon[1]"],
            [times, cols["mean_phonon"]],
        ),
    }
    return tables


def _run_pure(params, train, hc, icfg, psi0):
    h_of_t = (
        rotating_hamiltonian(params, train, hc)
        if train is not None
        else (lambda t, _h=static_hamiltonian(params, hc): _h)
    )
    vec = psi0 if psi0 is not None else _initial_vector([0, 0], hc)
    res = evolve_schrodinger(vec, h_of_t, icfg)
    obs = standard_observables(params, hc)
    cols = {}
    for name, op in obs.items():
        if op.ndim == 1:
            cols[name] = np.clip(np.abs(res.states @ op.conj()) ** 2, 0.0, 1.0)
        else:
            cols[name] = np.real(
                np.einsum("ti,ij,tj->t", res.states.conj(), op, res.states)
            )
    out = RunOutput()
    out.tables.update(_observable_tables(res.times, cols))
    if train is not None:
        out.tables["drives.csv"] = _drive_table(train, res.times)
    out.raw["times"] = res.times
    out.raw["cols"] = cols
    out.results["peak_populations"] = {
        n: float(np.max(c)) for n, c in cols.items() if n.startswith("P_")
    }
    _margin_check(out, params, train)
    return out


def _run_master(params, train, hc, icfg, psi0):
    res = evolve_master(psi0, params, train, hc, icfg)
    obs = standard_observables(params, hc)
    cols = {}
    for name, op in obs.items():
        if op.ndim == 1:
            vals = np.real(np.einsum("i,tij,j->t", op.conj(), res.states, op))
            cols[name] = np.clip(vals, 0.0, 1.0)
        else:
            cols[name] = np.real(np.einsum("tij,ji->t", res.states, op))
    out = RunOutput()
    out.tables.update(_observable_tables(res.times, cols))
    if train is not None:
        out.tables["drives.csv"] = _drive_table(train, res.times)
    out.raw["times"] = res.times
    out.raw["cols"] = cols
    out.raw["states"] = res.states

    trace_dev = float(np.max(np.abs(np.real(np.trace(res.states, axis1=1, axis2=2)) - 1.0)))
    out.add_check("trace_deviation", trace_dev, 1e-6, trace_dev < 1e-6)
    if hc.n_a >= 3:
        top = slice((hc.n_a - 1) * hc.n_b, hc.n_a * hc.n_b)
        leak = float(
            np.max(np.sum(np.real(np.diagonal(res.states, axis1=1, axis2=2))[:, top], axis=1))
        )
        out.add_check("photon_leakage", leak, 0.02, leak < 0.02)
    _margin_check(out, params, train)
    out.results["peak_populations"] = {
        n: float(np.max(c)) for n, c in cols.items() if n.startswith("P_")
    }
    return out


def _jump_table(jumps):
    times = [t for t, _ in jumps]
    labels = [label for _, label in jumps]
    return (["time[1/omega_m]", "channel"], [times, labels])


def _run_trajectory(params, train, hc, icfg, psi0, seed):
    rec = mcwf_trajectory(psi0, params, train, hc, icfg, seed=seed)
    cols = {name: np.clip(v, 0.0, 1.0) if name.startswith("P_") else v
            for name, v in rec.observables.items()}
    out = RunOutput()
    out.tables.update(_observable_tables(rec.sample_times, cols))
    out.tables["jumps.csv"] = _jump_table(rec.jumps)
    if train is not None:
        out.tables["drives.csv"] = _drive_table(train, rec.sample_times)
    out.raw["record"] = rec
    counts = {}
    for _, label in rec.jumps:
        counts[label] = counts.get(label, 0) + 1
    out.results["seed"] = seed
    out.results["jump_counts"] = counts
    _margin_check(out, params, train)
    return out


def _run_ensemble(params, train, hc, icfg, psi0, n_traj, base_seed, pair_window):
    ens = ensemble_average(
        params, train, hc, icfg, n_traj=n_traj, base_seed=base_seed, psi0=psi0
    )
    out = RunOutput()
    names = list(ens.means)
    out.tables["ensemble_mean.csv"] = (
        ["time[1/omega_m]"] + [f"{n}[1]" for n in names],
        [ens.times] + [ens.means[n] for n in names],
    )
    out.tables["ensemble_stderr.csv"] = (
        ["time[1/omega_m]"] + [f"{n}[1]" for n in names],
        [ens.times] + [ens.stderrs[n] for n in names],
    )
    out.raw["ensemble"] = ens
    out.results["n_traj"] = n_traj
    out.results["base_seed"] = base_seed

    window = pair_window
    if window is None and params.gamma_m > 0:
        window = 5.0 / params.gamma_m
    if window is not None:
        if train is not None and train.period < 10.0 * window:
            out.notes.append(
                f"pulse period {train.period:g} is below 10x the pair window "
                f"{window:g}; pair clustering may straddle periods"
            )
        stats_ = pair_emission_statistics(ens.records, window)
        out.tables["pair_delays.csv"] = (
            ["pair_index[1]", "delay[1/omega_m]"],
            [np.arange(stats_.intra_pair_delays.size), stats_.intra_pair_delays],
        )
        out.tables["pair_intervals.csv"] = (
            ["interval_index[1]", "interval[1/omega_m]"],
            [np.arange(stats_.inter_pair_intervals.size), stats_.inter_pair_intervals],
        )
        out.raw["pair_stats"] = stats_
        out.results["pairs"] = {
            "pair_window": window,
            "n_pairs": stats_.n_pairs,
            "n_unpaired": stats_.n_unpaired,
            "mean_pairs_per_trajectory": stats_.mean_pairs_per_trajectory,
        }
    _margin_check(out, params, train)
    return out


def _run_correlations(params, train, hc, icfg, psi0, corr_cfg):
    orders = corr_cfg["orders"]
    if not orders or any(o not in (1, 2) for o in orders):
        raise ConfigError(f"correlation orders must be drawn from [1, 2], got {orders!r}")
    window = tuple(float(x) for x in corr_cfg["window"])
    tau = np.linspace(0.0, float(corr_cfg["tau_max"]), int(corr_cfg["n_tau"]))
    series = evolve_master(psi0, params, train, hc, icfg)
    out = RunOutput()
    trace_dev = float(
        np.max(np.abs(np.real(np.trace(series.states, axis1=1, axis2=2)) - 1.0))
    )
    out.add_check("trace_deviation", trace_dev, 1e-6, trace_dev < 1e-6)
    for order in orders:
        result = analyze_correlation(
            params, train, hc, icfg, order, window, tau, rho0=psi0, series=series
        )
        out.tables[f"g{order}_equal_time.csv"] = (
            ["time[1/omega_m]", f"g{order}_equal_time[1]"],
            [result.equal_time.times, result.equal_time.values],
        )
        out.tables[f"g{order}_delayed.csv"] = (
            ["tau[1/omega_m]", f"g{order}_delayed[1]"],
            [result.delayed.times, result.delayed.values],
        )
        out.raw[f"corr_{order}"] = result
        out.results[f"t_s{order}"] = result.t_star
        out.results[f"g{order}_at_t_s{order}"] = float(result.delayed.values[0])
        out.results[f"verdict_{order}"] = result.verdict
    _margin_check(out, params, train)
    return out


def _run_find_gn(cfg):
    n = int(cfg["find_gn"]["n"])
    value = find_g_n(n)
    out = RunOutput()
    out.results["n"] = n
    out.results["g_n"] = value
    out.notes.append(f"g_{n}/omega_m = {value:.12f}")
    return out


def _run_validity_check(params, train):
    out = RunOutput()
    omega_0 = train.omega_0 if train is not None else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        margin = validity_margin(params, omega_0, threshold=_MARGIN_THRESHOLD)
    nearest_k = int(round(2.0 * params.beta * params.beta))
    out.results["validity_margin"] = _json_safe(margin)
    out.results["nearest_integer_k"] = nearest_k
    out.add_check(
        "validity_margin", margin, _MARGIN_THRESHOLD, margin >= _MARGIN_THRESHOLD, ">"
    )
    return out


def execute(cfg):
    """Run the experiment described by a resolved config dict."""
    params, train, hc, icfg, psi0 = _materialize(cfg)
    experiment = cfg["experiment"]
    if experiment == "pure-evolve":
        return _run_pure(params, train, hc, icfg, psi0)
    if experiment == "master-evolve":
        return _run_master(params, train, hc, icfg, psi0)
    if experiment == "trajectory":
        return _run_trajectory(params, train, hc, icfg, psi0, seed=int(cfg["base_seed"]))
    if experiment == "ensemble":
        return _run_ensemble(
            params,
            train,
            hc,
            icfg,
            psi0,
            n_traj=int(cfg["n_traj"]),
            base_seed=int(cfg["base_seed"]),
            pair_window=cfg["pair_window"],
        )
    if experiment == "correlations":
        return _run_correlations(params, train, hc, icfg, psi0, cfg["correlations"])
    if experiment == "find-gn":
        return _run_find_gn(cfg)
    if experiment == "validity-check":
        return _run_validity_check(params, train)
    raise ConfigError(f"unknown experiment {experiment!r}")


def _fmt_cell(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_tables(outdir, tables):
    written = []
    for name, (header, columns) in tables.items():
        with open(outdir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in zip(*columns):
                writer.writerow([_fmt_cell(v) for v in row])
        written.append(name)
    return written


_PLOT_TEMPLATE = '''"""Render the CSV series in this directory to SVG files."""
import csv
import pathlib

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = pathlib.Path(__file__).resolve().parent
FILES = {files!r}


def load(name):
    with open(HERE / name, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = list(zip(*rows[1:]))
    return rows[0], [[float(x) for x in col] for col in cols]


for name in FILES:
    header, cols = load(name)
    if not cols:
        continue
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for label, ys in zip(header[1:], cols[1:]):
        ax.plot(cols[0], ys, label=label, linewidth=1.0)
    ax.set_xlabel(header[0])
    ax.set_title(name)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(HERE / (name[: -len(".csv")] + ".svg"))
    plt.close(fig)
print(f"rendered {{len(FILES)}} plots")
'''


def _write_plot_script(outdir, csv_names):
    numeric = [n for n in csv_names if n != "jumps.csv"]
    if not numeric:
        return []
    path = outdir / "plot.py"
    path.write_text(_PLOT_TEMPLATE.format(files=numeric))
    written = ["plot.py"]
    if importlib.util.find_spec("matplotlib") is not None:
        proc = subprocess.run(
            [sys.executable, str(path)],
            cwd=outdir,
            capture_output=True,
            timeout=600,
            check=False,
        )
        if proc.returncode == 0:
            written.extend(
                n[: -len(".csv")] + ".svg"
                for n in numeric
                if (outdir / (n[: -len(".csv")] + ".svg")).exists()
            )
    return written


def _write_manifest(outdir, manifest):
    missing = [n for n in manifest["outputs"] if not (outdir / n).exists()]
    if missing:
        raise OSError(f"declared outputs missing on disk: {missing}")
    tmp = outdir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, outdir / "manifest.json")


def _output_dir(cfg, fallback_name):
    root = os.environ.get("PPS_OUTPUT_DIR", "runs")
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path(root) / fallback_name


def _persist_run(cfg, out, outdir, duration):
    outdir.mkdir(parents=True, exist_ok=True)
    written = _write_tables(outdir, out.tables)
    written += _write_plot_script(outdir, list(out.tables))
    manifest = {
        "toolkit_version": __version__,
        "experiment": cfg["experiment"],
        "duration_seconds": round(duration, 3),
        "config": cfg,
        "outputs": written,
        "checks": out.checks,
        "results": out.results,
        "notes": out.notes,
    }
    _write_manifest(outdir, manifest)
    return written


def cmd_run(args):
    cfg = resolve_config(args.config, args.preset, args.set or ())
    outdir = _output_dir(cfg, cfg["preset"] or cfg["experiment"])
    cfg["output_dir"] = str(outdir)
    started = time.perf_counter()
    out = execute(cfg)
    written = _persist_run(cfg, out, outdir, time.perf_counter() - started)
    print(f"experiment: {cfg['experiment']}" + (f" (preset {cfg['preset']})" if cfg["preset"] else ""))
    print(f"outputs: {outdir} ({', '.join(written + ['manifest.json'])})")
    for check in out.checks:
        print(
            f"check {check['name']}: {check['value']:.6g} "
            f"({check['direction']} {check['limit']:g}) {check['status']}"
        )
    for note in out.notes:
        print(f"note: {note}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Figure reproduction
# ---------------------------------------------------------------------------

_FAST_TWEAKS = {
    "fig2": ["integrator.n_samples=301"],
    "fig3": ["integrator.n_samples=751", "integrator.max_step_pulse=0.3"],
    "fig4": ["integrator.n_samples=751", "integrator.max_step_pulse=0.3"],
    "fig5": [
        "integrator.n_samples=466",
        "integrator.t_end=18600.0",
        "integrator.max_step_pulse=0.3",
        "correlations.n_tau=11",
    ],
}


def _value_at(times, cols, name, t):
    idx = int(np.argmin(np.abs(times - t)))
    if abs(float(times[idx]) - t) > 1e-9:
        raise ReproduceCheckError(f"sample grid does not contain t={t}")
    return float(cols[name][idx])


def _figure_checks(figure, out, cfg, fast):
    checks = []

    def record(name, passed, detail):
        checks.append({"name": name, "passed": bool(passed), "detail": detail})

    if figure == "fig2":
        times, cols = out.raw["times"], out.raw["cols"]
        target = _value_at(times, cols, "P_02", 1800.0)
        record("P02_at_1800", target >= 0.99, f"P_02(1800) = {target:.6f} (need >= 0.99)")
        others = {
            n: _value_at(times, cols, n, 1800.0)
            for n in cols
            if n.startswith("P_") and n != "P_02"
        }
        worst = max(others, key=others.get)
        record(
            "others_at_1800",
            all(v <= 0.01 for v in others.values()),
            f"largest other population {worst} = {others[worst]:.2e} (need <= 0.01)",
        )
    elif figure == "fig3":
        times, cols = out.raw["times"], out.raw["cols"]
        peak = float(np.max(cols["P_02"]))
        record("max_P02_above_half", peak > 0.5, f"max P_02 = {peak:.6f} (need > 0.5)")
        record("max_P02_below_one", peak < 1.0, f"max P_02 = {peak:.6f} (need < 1.0)")
        period = cfg["pulses"]["period"]
        mask = (times >= 2500.0) & (times + period <= times[-1] + 1e-9)
        shifted = np.searchsorted(times, times[mask] + period)
        dev = max(
            float(np.max(np.abs(col[mask] - col[shifted])))
            for name, col in cols.items()
            if name.startswith("P_")
        )
        record("periodicity", dev < 0.01, f"max |P(t) - P(t+T)| = {dev:.4f} (need < 0.01)")
        trace = next(c for c in out.checks if c["name"] == "trace_deviation")
        record(
            "trace_deviation",
            trace["status"] == "pass",
            f"max |tr rho - 1| = {trace['value']:.3e} (need < 1e-06)",
        )
    elif figure == "fig4":
        rec = out.raw["record"]
        n_down = sum(1 for _, label in rec.jumps if label == "mech_down")
        record(
            "trajectory_has_cascades",
            n_down >= 2,
            f"trajectory logged {n_down} mechanical decays (need >= 2)",
        )
        checks.extend(_cascade_checks(cfg, n_seeds=400 if fast else 2000))
    elif figure == "fig5":
        for order, direction in ((1, "bunched-pairs"), (2, "antibunched-pairs")):
            result = out.raw[f"corr_{order}"]
            v0 = float(result.delayed.values[0])
            later = result.delayed.values[1:]
            finite = later[np.isfinite(later)]
            if order == 1:
                record("g1_peak_above_one", v0 > 1.0, f"g1(t_s1,t_s1) = {v0:.4f} (need > 1)")
                record(
                    "g1_delay_dominated",
                    bool(np.all(v0 > finite)) and finite.size == later.size,
                    f"g1 exceeds all {finite.size} delayed samples",
                )
            else:
                record("g2_dip_below_one", v0 < 1.0, f"g2(t_s2,t_s2) = {v0:.4f} (need < 1)")
                record(
                    "g2_delay_dominating",
                    bool(np.all(v0 < finite)) and finite.size == later.size,
                    f"g2 lies below all {finite.size} delayed samples",
                )
            record(
                f"verdict_{order}",
                result.verdict == direction,
                f"order-{order} verdict {result.verdict!r} (expected {direction!r})",
            )
    return checks


def _cascade_checks(cfg, n_seeds):
    """Drives-off cascade statistics from the two-phonon state."""
    params = PhysicalParams(**cfg["params"])
    hc = HilbertConfig(**cfg["hilbert"])
    gamma = params.gamma_m
    horizon = 20.0 / gamma
    icfg = IntegratorConfig(sample_times=np.array([0.0, horizon]))
    psi0 = _initial_vector([0, 2], hc)
    ens = ensemble_average(
        params, None, hc, icfg, n_traj=n_seeds, base_seed=0, observables={}, psi0=psi0
    )
    counts = [
        sum(1 for _, label in rec.jumps if label == "mech_down") for rec in ens.records
    ]
    exact_two = all(c == 2 for c in counts)
    firsts = np.array(
        [min(t for t, label in rec.jumps if label == "mech_down") for rec in ens.records]
    )
    ks = stats.kstest(firsts, "expon", args=(0.0, 1.0 / (2.0 * gamma))).statistic
    checks = [
        {
            "name": "cascade_two_jumps",
            "passed": exact_two,
            "detail": f"{n_seeds} trajectories, mech_down counts "
            f"min={min(counts)} max={max(counts)} (need exactly 2)",
        },
        {
            "name": "cascade_first_jump_ks",
            "passed": bool(ks < 0.05),
            "detail": f"KS distance to Exp(2*gamma_m) = {ks:.4f} (need < 0.05)",
        },
    ]
    return checks


def cmd_reproduce(args):
    figure = args.figure
    set_exprs = list(_FAST_TWEAKS[figure]) if args.fast else []
    cfg = resolve_config(None, f"paper-{figure}", set_exprs)
    outdir = _output_dir({"output_dir": None}, f"reproduce-{figure}")
    cfg["output_dir"] = str(outdir)
    started = time.perf_counter()
    out = execute(cfg)
    checks = _figure_checks(figure, out, cfg, args.fast)
    duration = time.perf_counter() - started

    written = _persist_run(cfg, out, outdir, duration)
    report = {
        "figure": figure,
        "fast": bool(args.fast),
        "duration_seconds": round(duration, 3),
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }
    (outdir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"reproduce {figure}{' (fast)' if args.fast else ''}: outputs in {outdir}")
    for check in checks:
        print(f"  {'PASS' if check['passed'] else 'FAIL'} {check['name']}: {check['detail']}")
    if not report["passed"]:
        failed = ", ".join(c["name"] for c in checks if not c["passed"])
        raise ReproduceCheckError(f"reproduce {figure} failed checks: {failed}")
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def cmd_find_gn(args):
    value = find_g_n(args.n)
    print(f"g_{args.n}/omega_m = {value:.12f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="phonon-pulse-sim",
        description="Pulsed-drive optomechanics simulator: phonon-pair emission experiments.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file or preset")
    run_p.add_argument("--config", help="JSON experiment config")
    run_p.add_argument("--preset", help="named preset (e.g. paper-fig3)")
    run_p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a resolved config entry (dotted keys, JSON values)",
    )
    run_p.set_defaults(func=cmd_run)

    rep_p = sub.add_parser("reproduce", help="re-run a published figure and check it")
    rep_p.add_argument("figure", choices=["fig2", "fig3", "fig4", "fig5"])
    rep_p.add_argument("--fast", action="store_true", help="coarser, quicker settings")
    rep_p.set_defaults(func=cmd_reproduce)

    gn_p = sub.add_parser("find-gn", help="coupling ratio closing the two-phonon subspace")
    gn_p.add_argument("--n", type=int, required=True, help="even truncation index N")
    gn_p.set_defaults(func=cmd_find_gn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run" and not (args.config or args.preset):
        print("error: config: run needs --config and/or --preset", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReproduceCheckError as exc:
        print(f"error: reproduce: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (
        IntegrationError,
        TruncationInsufficientError,
        UndefinedCorrelationError,
        UndefinedDarkStateError,
        NoExtremumError,
    ) as exc:
        print(f"error: physics: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except PhononPulseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
