"""Command-line entry point.

Every subcommand reads one JSON scenario file, writes its artifacts into the
output directory and finishes with ``manifest.json`` listing them.

Exit codes: 0 success, 2 configuration error, 3 compile error,
4 tolerance not met.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .evolve import (
    ControlSchedule,
    EvolveError,
    complex_csv,
    diagonal_phases,
    evolve_state,
    leakage_profile,
    wrap_phase,
)
from .gates import (
    CompileError,
    RegisterSim,
    compile_controlled_phase,
    compile_k_phase,
    synthesize_single_qudit,
)
from .layout import (
    SCHEMES,
    GeometryParams,
    LayoutError,
    RegisterLayout,
    Scheme,
    argmax_summary,
    build_register,
    dimension_csv,
    dimension_scan,
    inter_qudit_pairs,
    with_screening,
)
from .model import DEFAULT_BASIS_CAP, DEFAULT_DELTA_MAX, ModelError
from .tune import TuneError, optimize_schedule, phase_gate_benchmark, transfer_benchmark

EXIT_OK, EXIT_CONFIG, EXIT_COMPILE, EXIT_TOLERANCE = 0, 2, 3, 4
UNITS = {"length": "nm", "energy": "meV", "time": "ps"}
COMMANDS = ("dim-scan", "gate", "simulate", "optimize", "layout")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output encoding
# ---------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class LayoutConfig:
    scheme: str = "aux_per_qudit"
    n_qudits: int = 2
    levels: int = 3
    intra_spacing: float = 20.0
    qudit_aux_spacing: float = 20.0
    aux_spacing: float = 20.0
    stagger: float = 30.0
    eps_substrate: float = 11.7
    eps_aux: float = 11.7
    trench_screening: float = 1.0
    aux_screening: float = 1.0
    screening_overrides: list = field(default_factory=list)


@dataclass
class PhysicsConfig:
    delta_max: float = DEFAULT_DELTA_MAX
    detuning: float = 5.0
    t_coh: float = 1.0e4
    basis_cap: int = DEFAULT_BASIS_CAP


@dataclass
class OutputConfig:
    directory: str = "out"


TASK_KEYS = {
    "dim-scan": {"K": None, "d_min": 2, "d_max": 10, "schemes": [s.value for s in SCHEMES]},
    "gate": {
        "kind": "controlled_phase",
        "participants": [0, 1],
        "phase": math.pi,
        "delta": None,
        "tolerance": 1e-3,
        "qudit": 0,
        "target": "identity",
        "cancel_pairwise": False,
    },
    "simulate": {"schedule": None, "initial_state": None},
    "optimize": {
        "benchmark": "transfer",
        "perturbation": 0.2,
        "budget": 200,
        "restarts": 3,
        "lambda": 1.0,
        "tolerance": None,
        "phase": math.pi,
        "participants": [0, 1],
    },
    "layout": {},
}
REQUIRED_TASK = {"dim-scan": ("K",), "simulate": ("schedule", "initial_state")}
TOP_KEYS = {"units", "layout", "physics", "task", "output", "seed", "threads"}


@dataclass
class ScenarioConfig:
    command: str
    layout: LayoutConfig
    physics: PhysicsConfig
    task: dict
    output: OutputConfig
    seed: int = 0
    threads: int = 1
    base_dir: Path = Path(".")

    def canonical(self) -> dict:
        return {
            "command": self.command,
            "layout": vars(self.layout),
            "physics": vars(self.physics),
            "task": self.task,
            "seed": self.seed,
            "threads": self.threads,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}")
    out = cls()
    for k, v in data.items():
        default = getattr(out, k)
        if isinstance(default, bool) or isinstance(v, bool):
            if not isinstance(v, bool) or not isinstance(default, bool):
                raise ConfigError(f"{name}.{k}: wrong type")
        elif isinstance(default, int) and not isinstance(v, int):
            raise ConfigError(f"{name}.{k}: expected an integer")
        elif isinstance(default, float) and not isinstance(v, (int, float)):
            raise ConfigError(f"{name}.{k}: expected a number")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{name}.{k}: expected a string")
        elif isinstance(default, list) and not isinstance(v, list):
            raise ConfigError(f"{name}.{k}: expected a list")
        setattr(out, k, float(v) if isinstance(default, float) else v)
    return out


def parse_config(data: Any, command: str, base_dir: Path = Path(".")) -> ScenarioConfig:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    if "units" in data and data["units"] != UNITS:
        raise ConfigError(f"units: must be {UNITS}")
    task_in = data.get("task", {}) or {}
    if not isinstance(task_in, dict):
        raise ConfigError("task: expected an object")
    allowed = TASK_KEYS[command]
    unknown = set(task_in) - set(allowed)
    if unknown:
        raise ConfigError(f"task: unknown key(s) {sorted(unknown)} for {command}")
    for key in REQUIRED_TASK.get(command, ()):
        if task_in.get(key) is None:
            raise ConfigError(f"task.{key}: required for {command}")
    task = {**allowed, **task_in}
    seed = data.get("seed", 0)
    threads = data.get("threads", 1)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed: expected an unsigned 64-bit integer")
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        raise ConfigError("threads: expected a positive integer")
    return ScenarioConfig(
        command,
        _section(LayoutConfig, data.get("layout"), "layout"),
        _section(PhysicsConfig, data.get("physics"), "physics"),
        task,
        _section(OutputConfig, data.get("output"), "output"),
        seed,
        threads,
        base_dir,
    )


def load_config(path: str | os.PathLike, command: str) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(data, command, path.parent)


def make_layout(cfg: ScenarioConfig) -> RegisterLayout:
    lc = cfg.layout
    try:
        scheme = Scheme(lc.scheme)
    except ValueError as exc:
        raise ConfigError(f"layout.scheme: unknown scheme {lc.scheme!r}") from exc
    geo = GeometryParams(
        intra_spacing=lc.intra_spacing,
        qudit_aux_spacing=lc.qudit_aux_spacing,
        aux_spacing=lc.aux_spacing,
        stagger=lc.stagger,
        trench_screening=lc.trench_screening,
        aux_screening=lc.aux_screening,
        eps_substrate=lc.eps_substrate,
        eps_aux=lc.eps_aux,
    )
    layout = build_register(scheme, lc.n_qudits, lc.levels, geo)
    for i, ov in enumerate(lc.screening_overrides):
        where = f"layout.screening_overrides[{i}]"
        if not isinstance(ov, dict) or "s" not in ov or len(ov) != 2:
            raise ConfigError(f"{where}: expected {{'s': value, 'sites' | 'qudits': ...}}")
        if "sites" in ov:
            pairs = [tuple(ov["sites"])]
        elif "qudits" in ov:
            a, b = ov["qudits"]
            pairs = inter_qudit_pairs(layout, a, b)
        else:
            raise ConfigError(f"{where}: needs 'sites' or 'qudits'")
        layout = with_screening(layout, float(ov["s"]), pairs)
    return layout


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: ScenarioConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.files: list[str] = []
        self.start = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        (self.out / name).write_text(text)
        self.files.append(name)

    def finish(self, status: int) -> int:
        manifest = {
            "tool": "chargequdit",
            "version": __version__,
            "command": self.cfg.command,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "threads": self.cfg.threads,
            "exit_code": status,
            "files": sorted([*self.files, "manifest.json"]),
            "wall_clock_s": time.perf_counter() - self.start,
        }
        (self.out / "manifest.json").write_text(dumps(manifest) + "\n")
        return status


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_dim_scan(cfg: ScenarioConfig, run: Run) -> int:
    t = cfg.task
    k = t["K"]
    if not isinstance(k, int) or isinstance(k, bool):
        raise ConfigError("task.K: expected an integer")
    try:
        schemes = [Scheme(s) for s in t["schemes"]]
        reports = dimension_scan(k, range(int(t["d_min"]), int(t["d_max"]) + 1), schemes)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc
    run.write("dimension.csv", dimension_csv(reports))
    summary = argmax_summary(reports)
    run.write("summary.txt", summary + "\n")
    print(summary)
    return EXIT_OK


def _single_target(spec, d: int) -> np.ndarray:
    if spec == "identity":
        return np.eye(d, dtype=complex)
    if spec == "cyclic":
        return np.roll(np.eye(d), 1, axis=0).astype(complex)
    if spec == "fourier":
        w = np.exp(2j * np.pi / d)
        return np.array([[w ** (i * j) for j in range(d)] for i in range(d)]) / np.sqrt(d)
    if isinstance(spec, dict) and set(spec) == {"re", "im"}:
        return np.asarray(spec["re"], dtype=float) + 1j * np.asarray(spec["im"], dtype=float)
    raise ConfigError("task.target: 'identity', 'cyclic', 'fourier' or {'re': [[...]], 'im': [[...]]}")


def cmd_gate(cfg: ScenarioConfig, run: Run) -> int:
    t = cfg.task
    layout = make_layout(cfg)
    ph = cfg.physics
    sim = RegisterSim(layout, ph.delta_max, ph.basis_cap)
    kind = t["kind"]
    if kind == "single_qudit":
        report = synthesize_single_qudit(
            layout, int(t["qudit"]), _single_target(t["target"], layout.levels),
            delta_max=ph.delta_max, t_coh=ph.t_coh, sim=sim,
        )
    elif kind in ("controlled_phase", "k_phase"):
        compile_fn = compile_controlled_phase if kind == "controlled_phase" else compile_k_phase
        extra = {"cancel_pairwise": bool(t["cancel_pairwise"])} if kind == "k_phase" else {}
        report = compile_fn(
            layout, list(t["participants"]), float(t["phase"]),
            delta=t["delta"], delta_max=ph.delta_max, detuning=ph.detuning,
            t_coh=ph.t_coh, sim=sim, **extra,
        )
    else:
        raise ConfigError(f"task.kind: unknown gate kind {kind!r}")
    doc = report.to_dict()
    doc["tolerance"] = float(t["tolerance"])
    doc["tolerance_met"] = report.infidelity <= float(t["tolerance"])
    run.write("report.json", dumps(doc) + "\n")
    run.write("schedule.json", dumps(report.schedule.to_dict()) + "\n")
    print(f"{report.gate}: avg_fidelity={report.fidelity.average_fidelity:.6f} "
          f"leakage={report.fidelity.leakage:.3g} duration_ps={report.duration:.4g}")
    return EXIT_OK if doc["tolerance_met"] else EXIT_TOLERANCE


def _initial_state(spec, sim: RegisterSim) -> np.ndarray:
    n = len(sim.basis)
    if isinstance(spec, dict) and set(spec) == {"levels"}:
        levels = spec["levels"]
        try:
            idx = sim.basis.index[sim.basis.config_for_levels(levels)]
        except (KeyError, IndexError, LayoutError) as exc:
            raise ConfigError(f"task.initial_state.levels: invalid levels {levels}") from exc
        psi = np.zeros(n, dtype=complex)
        psi[idx] = 1.0
        return psi
    if isinstance(spec, dict) and set(spec) == {"re", "im"}:
        psi = np.asarray(spec["re"], dtype=float) + 1j * np.asarray(spec["im"], dtype=float)
        if psi.shape != (n,):
            raise ConfigError(f"task.initial_state: expected {n} amplitudes")
        norm = np.linalg.norm(psi)
        if not norm > 0:
            raise ConfigError("task.initial_state: zero vector")
        return psi / norm
    raise ConfigError("task.initial_state: expected {'levels': [...]} or {'re': [...], 'im': [...]}")


def _load_schedule(spec, base: Path) -> ControlSchedule:
    if isinstance(spec, str):
        path = (base / spec) if not Path(spec).is_absolute() else Path(spec)
        try:
            spec = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"task.schedule: {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"task.schedule: {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return ControlSchedule.from_dict(spec)
    except (EvolveError, ModelError) as exc:
        raise ConfigError(f"task.schedule: {exc}") from exc


def config_label(layout: RegisterLayout, config) -> str:
    """``|1 2>`` for dot levels; auxiliaries appear as ``a<site id>``."""
    parts = [f"a{s}" if layout.sites[s].is_aux else str(layout.sites[s].level) for s in config]
    return "|" + " ".join(parts) + ">"


def cmd_simulate(cfg: ScenarioConfig, run: Run) -> int:
    layout = make_layout(cfg)
    sim = RegisterSim(layout, cfg.physics.delta_max, cfg.physics.basis_cap)
    schedule = _load_schedule(cfg.task["schedule"], cfg.base_dir)
    try:
        schedule.validate(layout, cfg.physics.delta_max)
    except EvolveError as exc:
        raise ConfigError(f"task.schedule: {exc}") from exc
    psi0 = _initial_state(cfg.task["initial_state"], sim)
    u = sim.propagate(schedule)
    psi = evolve_state(psi0, u)
    labels = [config_label(layout, c) for c in sim.basis.configs]
    run.write("final_state.csv", complex_csv(psi, labels))
    phases = np.angle(np.diag(u))
    lines = ["index,config,phase_rad"] + [f"{i},{labels[i]},{_fmt_float(float(p))}" for i, p in enumerate(phases)]
    metrics = {
        "duration_ps": schedule.duration,
        "norm": float(np.linalg.norm(psi)),
        "leakage": leakage_profile(psi, sim.p),
        "computational_population": 1.0 - leakage_profile(psi, sim.p),
    }
    if all(not any(s.controls.delta.values()) for s in schedule.segments):
        oracle = diagonal_phases(sim.basis, schedule, sim.builder)
        metrics["oracle_max_phase_error_rad"] = float(np.max(np.abs(wrap_phase(phases - oracle))))
    run.write("phases.csv", "\n".join(lines) + "\n")
    run.write("metrics.json", dumps(metrics) + "\n")
    print(f"leakage={metrics['leakage']:.3g}")
    return EXIT_OK


def cmd_optimize(cfg: ScenarioConfig, run: Run) -> int:
    t = cfg.task
    budget = t["budget"]
    if not isinstance(budget, int) or isinstance(budget, bool) or budget < 1:
        raise ConfigError("task.budget: must be a positive integer")
    if t["benchmark"] == "transfer":
        problem = transfer_benchmark(float(t["perturbation"]), cfg.physics.delta_max, float(t["lambda"]))
    elif t["benchmark"] == "phase_gate":
        layout = make_layout(cfg)
        sim = RegisterSim(layout, cfg.physics.delta_max, cfg.physics.basis_cap)
        rep = compile_controlled_phase(layout, list(t["participants"]), float(t["phase"]),
                                       delta_max=cfg.physics.delta_max, detuning=cfg.physics.detuning, sim=sim)
        problem = phase_gate_benchmark(rep, sim, float(t["perturbation"]), float(t["lambda"]))
    else:
        raise ConfigError(f"task.benchmark: unknown benchmark {t['benchmark']!r}")
    result = optimize_schedule(problem, budget, seed=cfg.seed, restarts=int(t["restarts"]))
    run.write("trace.csv", result.trace_csv())
    run.write("schedule.json", dumps(problem.build(result.x).to_dict()) + "\n")
    run.write("result.json", dumps(result.to_dict()) + "\n")
    print(f"objective {result.initial_objective:.3g} -> {result.objective:.3g} in {result.n_evals} evaluations")
    tol = t["tolerance"]
    return EXIT_TOLERANCE if tol is not None and result.objective > float(tol) else EXIT_OK


def cmd_layout(cfg: ScenarioConfig, run: Run) -> int:
    layout = make_layout(cfg)
    run.write("layout.json", dumps(layout.to_dict()) + "\n")
    run.write("sites.csv", layout.site_table_csv())
    print(f"{layout.n_sites} sites, {len(layout.aux_sites())} auxiliaries")
    return EXIT_OK


HANDLERS = {
    "dim-scan": cmd_dim_scan,
    "gate": cmd_gate,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "layout": cmd_layout,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chargequdit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON scenario file")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, help="overrides the config thread count")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed: expected an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads: expected a positive integer")
            cfg.threads = args.threads
        out_dir = Path(args.out) if args.out else cfg.base_dir / cfg.output.directory
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, out_dir)
    try:
        status = HANDLERS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except (LayoutError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except (CompileError, TuneError, EvolveError) as exc:
        print(f"compile error: {exc}", file=sys.stderr)
        status = EXIT_COMPILE
    return run.finish(status)


if __name__ == "__main__":
    sys.exit(main())
