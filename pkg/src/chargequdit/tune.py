"""Pulse-parameter optimisation, crosstalk scans and permittivity tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .constants import HBAR
from .evolve import ControlSchedule, Segment, diagonal_phases, gate_fidelity, projector, propagate, wrap_phase
from .gates import (
    DEFAULT_PHASE_SEGMENT,
    DEFAULT_T_COH,
    GateReport,
    RegisterSim,
    _distinct_aux,
    coherence_budget,
    transfer_time,
    wait_rates,
)
from .layout import RegisterLayout, build_register, inter_qudit_pairs, with_permittivity, with_screening
from .model import DEFAULT_DELTA_MAX, ControlValues


class TuneError(ValueError):
    pass


class _BudgetExhausted(Exception):
    pass


@dataclass
class OptimizationProblem:
    """Box-bounded parameters mapped to a schedule and scored against ``target``.

    ``objective = (1 - average fidelity) + lam * leakage``.
    """

    names: tuple[str, ...]
    x0: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    build: Callable[[np.ndarray], ControlSchedule]
    sim: RegisterSim
    target: np.ndarray
    p: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = len(self.names)
        if not (self.x0.shape == self.lower.shape == self.upper.shape == (n,)):
            raise TuneError("parameter vector, bounds and names differ in length")
        if np.any(self.lower > self.upper):
            raise TuneError("infeasible bounds: lower > upper")
        if np.any(self.x0 < self.lower) or np.any(self.x0 > self.upper):
            raise TuneError("initial parameters outside bounds")
        if not self.lam >= 0:
            raise TuneError("leakage weight must be non-negative")

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def evaluate(self, x):
        u = propagate(self.sim.basis, self.build(self.clip(x)), self.sim.delta_max, self.sim.builder)
        return gate_fidelity(u, self.target, self.p)

    def objective(self, x) -> float:
        rep = self.evaluate(x)
        return (1.0 - rep.average_fidelity) + self.lam * rep.leakage


@dataclass
class OptimizationResult:
    names: tuple[str, ...]
    x: np.ndarray
    objective: float
    initial_objective: float
    n_evals: int
    trace: list[tuple[int, float, np.ndarray]] = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "objective", *self.names])
        for i, f, x in self.trace:
            w.writerow([i, f"{f:.17g}", *(f"{v:.17g}" for v in x)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "parameters": {n: float(v) for n, v in zip(self.names, self.x)},
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "evaluations": self.n_evals,
        }


def optimize_schedule(
    problem: OptimizationProblem,
    budget: int = 200,
    seed: int = 0,
    restarts: int = 3,
    target_objective: float = 0.0,
) -> OptimizationResult:
    """Nelder-Mead with seeded restarts, capped at ``budget`` objective calls.

    Every evaluation is clipped into the box. The returned point is the best
    evaluated one, so its objective never exceeds the starting objective.
    """
    if budget < 1:
        raise TuneError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    trace: list[tuple[int, float, np.ndarray]] = []
    best = {"x": problem.x0.copy(), "f": math.inf}

    def f(x):
        if len(trace) >= budget:
            raise _BudgetExhausted
        x = problem.clip(x)
        val = problem.objective(x)
        if not math.isfinite(val):
            val = math.inf
        trace.append((len(trace), val, x.copy()))
        if val < best["f"]:
            best["x"], best["f"] = x.copy(), val
        if best["f"] <= target_objective:
            raise _BudgetExhausted
        return val

    f0 = f(problem.x0)
    if not math.isfinite(f0):
        raise TuneError("objective is not finite at the starting point")
    width = problem.upper - problem.lower
    per_run = max(1, -(-(budget - 1) // (restarts + 1)))
    for r in range(restarts + 1):
        if len(trace) >= budget or best["f"] <= target_objective:
            break
        start = best["x"].copy()
        if r:
            start = problem.clip(start + 0.05 * width * rng.standard_normal(start.size))
        # Simplex edges of 5% of each parameter (or of its box when the value is 0).
        step = np.where(start != 0, 0.05 * np.abs(start), 0.05 * width)
        step = np.where(step > 0, step, 1e-3)
        simplex = np.vstack([start] + [start + np.eye(start.size)[i] * step[i] for i in range(start.size)])
        try:
            minimize(
                f,
                start,
                method="Nelder-Mead",
                options={
                    "initial_simplex": simplex,
                    "maxfev": min(per_run, budget - len(trace)),
                    "xatol": 1e-12,
                    "fatol": 1e-15,
                },
            )
        except _BudgetExhausted:
            break
    return OptimizationResult(problem.names, best["x"], best["f"], f0, len(trace), trace)


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------

def transfer_benchmark(
    perturbation: float = 0.2,
    delta: float = DEFAULT_DELTA_MAX,
    lam: float = 1.0,
    levels: int = 3,
) -> OptimizationProblem:
    """Single-electron transfer ``|1> <-> aux`` scored against ``iX`` on that pair.

    Parameters are the pulse duration and tunnelling; the exact optimum is
    ``delta * t / hbar = pi / 2``.
    """
    layout = build_register("aux_per_qudit", 1, levels)
    sim = RegisterSim(layout)
    handle = layout.b_gate_between(layout.dot(0, 1), layout.aux_of(0)[0])
    keep = [sim.basis.index[(layout.dot(0, 1),)], sim.basis.index[(layout.aux_of(0)[0],)]]
    t0 = transfer_time(delta) * (1.0 + perturbation)

    def build(x):
        return ControlSchedule([Segment(float(x[0]), ControlValues(delta={handle: float(x[1])}), "transfer")])

    return OptimizationProblem(
        names=("duration_ps", "delta_meV"),
        x0=np.array([t0, delta]),
        lower=np.array([0.0, 0.0]),
        upper=np.array([10.0 * transfer_time(delta), DEFAULT_DELTA_MAX]),
        build=build,
        sim=sim,
        target=np.array([[0, 1j], [1j, 0]]),
        p=projector(keep, len(sim.basis)),
        lam=lam,
    )


def phase_gate_benchmark(report: GateReport, sim: RegisterSim, perturbation: float = 0.2, lam: float = 1.0) -> OptimizationProblem:
    """Re-tune the transfer and wait durations of a compiled phase gate.

    Parameters are the durations of the transfer and wait segments. The
    transfers start stretched by ``1 + perturbation``; every other control
    stays as compiled.
    """
    segs = list(report.schedule.segments)
    idx = [i for i, s in enumerate(segs) if s.label in ("transfer", "wait")]
    if not any(segs[i].label == "transfer" for i in idx):
        raise TuneError("report has no transfer segments to tune")
    x0 = np.array([segs[i].duration * (1.0 + perturbation if segs[i].label == "transfer" else 1.0) for i in idx])
    names = tuple(f"{segs[i].label}_{k}_ps" for k, i in enumerate(idx))
    upper = np.maximum(3.0 * x0, 1.0)

    def build(x):
        out = list(segs)
        for v, i in zip(x, idx):
            out[i] = Segment(float(v), segs[i].controls, segs[i].label)
        return ControlSchedule(out)

    return OptimizationProblem(names, x0, np.zeros_like(x0), upper, build, sim, report.target, sim.p, lam)


# ---------------------------------------------------------------------------
# crosstalk
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrosstalkRow:
    screening: float
    spectator: int
    level: int
    phase: float  # rad, spectator-conditional phase accrued during the wait
    oracle_phase: float
    infidelity: float


@dataclass
class CrosstalkReport:
    participants: tuple[int, ...]
    rows: list[CrosstalkRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "spectator", "phase_rad", "infidelity"])
        for r in self.rows:
            w.writerow([f"{r.screening:.17g}", f"q{r.spectator}=|{r.level}>", f"{r.phase:.17g}", f"{r.infidelity:.17g}"])
        return buf.getvalue()

    def max_phase(self, s: float) -> float:
        return max((abs(r.phase) for r in self.rows if r.screening == s), default=0.0)


def _wait_schedule(schedule: ControlSchedule) -> ControlSchedule:
    return ControlSchedule([s for s in schedule.segments if s.label == "wait"])


def crosstalk_scan(
    layout: RegisterLayout,
    report: GateReport,
    screening: Sequence[float],
    spectators: Sequence[int] | None = None,
    spectator_levels: Sequence[int] | None = None,
) -> CrosstalkReport:
    """Spectator crosstalk of ``report``'s schedule against trench screening.

    For each ``s`` the screening between spectator and participant sites is
    set to ``s`` and the schedule is rerun. The residual phase of spectator
    level ``l`` is the conditional phase, accrued during the wait, between
    "participants on their auxiliaries" and the spectator sitting in ``l``
    rather than ``|1>``. It is read off the simulated wait propagator and
    compared with the diagonal oracle. The infidelity is that of the whole
    gate against the compiled target (identity on spectators).
    """
    participants = tuple(report.participants)
    if spectators is None:
        spectators = [q for q in range(layout.n_qudits) if q not in participants]
    spectators = list(spectators)
    if set(spectators) & set(participants):
        raise TuneError("spectators overlap participants")
    levels = list(spectator_levels) if spectator_levels else list(range(2, layout.levels + 1))
    aux = _distinct_aux(layout, participants) if layout.scheme.value != "always_on" else {}
    wait = _wait_schedule(report.schedule)
    rows = []
    for s in sorted(float(v) for v in screening):
        lay = with_screening(layout, s, inter_qudit_pairs(layout, participants, spectators))
        sim = RegisterSim(lay)
        u = sim.propagate(report.schedule)
        infid = 1.0 - gate_fidelity(u, report.target, sim.p).average_fidelity
        uw = sim.propagate(wait)
        oracle = diagonal_phases(sim.basis, wait, sim.builder)
        sim_ph = np.angle(np.diag(uw))
        for q in spectators:
            for lv in levels:
                rows.append(
                    CrosstalkRow(
                        s, q, lv,
                        _spectator_phase(sim, sim_ph, participants, aux, q, lv),
                        _spectator_phase(sim, oracle, participants, aux, q, lv),
                        infid,
                    )
                )
    return CrosstalkReport(participants, rows)


def _spectator_phase(sim: RegisterSim, phases, participants, aux, q: int, level: int) -> float:
    layout = sim.layout
    base = [layout.dot(i, 1) for i in range(layout.n_qudits)]

    def ph(on_aux: bool, lv: int) -> float:
        cfg = list(base)
        cfg[q] = layout.dot(q, lv)
        if on_aux:
            for p in participants:
                cfg[p] = aux[p]
        return float(phases[sim.basis.index[tuple(cfg)]])

    raw = ph(True, level) - ph(False, level) - ph(True, 1) + ph(False, 1)
    return float(wrap_phase(raw))


# ---------------------------------------------------------------------------
# permittivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PermittivityRow:
    eps_r: float
    delta_v: float  # meV
    t_wait: float  # ps
    duration: float  # ps
    gate_count: int


def permittivity_speedup(
    layout: RegisterLayout,
    participants: Sequence[int],
    phi: float,
    eps_values: Sequence[float],
    delta: float = DEFAULT_DELTA_MAX,
    t_coh: float = DEFAULT_T_COH,
) -> list[PermittivityRow]:
    """Nominal phase-gate timing as the host permittivity changes.

    ``t_wait = phi_w * hbar / |dV|`` with ``phi_w`` the requested phase taken
    in the direction the interaction accumulates it, so ``t_wait`` is
    proportional to ``eps_r``. The duration adds two transfers and the
    phase-correction segment.
    """
    participants = tuple(participants)
    aux = _distinct_aux(layout, participants)
    overhead = 2.0 * transfer_time(delta) + DEFAULT_PHASE_SEGMENT
    rows = []
    for eps in eps_values:
        if not eps > 0:
            raise TuneError("permittivity must be positive")
        lay = with_permittivity(layout, float(eps))
        dv = sum(wait_rates(lay, participants, aux).values())
        phi_w = float((phi if dv < 0 else -phi) % (2 * math.pi))
        t_wait = phi_w * HBAR / abs(dv)
        duration = overhead + t_wait
        rows.append(PermittivityRow(float(eps), dv, t_wait, duration, coherence_budget(duration, t_coh)[1]))
    return rows


def permittivity_csv(rows: Sequence[PermittivityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["eps_r", "delta_v_meV", "t_wait_ps", "duration_ps", "gate_count"])
    for r in rows:
        w.writerow([f"{r.eps_r:.17g}", f"{r.delta_v:.17g}", f"{r.t_wait:.17g}", f"{r.duration:.17g}", r.gate_count])
    return buf.getvalue()
