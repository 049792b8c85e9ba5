"""Gate compilation: single-qudit synthesis, auxiliary-mediated phase gates,
parallel merging and coherence budgeting.

Controlled-phase protocol (one auxiliary per participant):

1. transfer-in: every participant's ``|1>`` electron tunnels onto its
   auxiliary with a resonant pulse of area pi/2;
2. wait with all tunnelling off while the auxiliary Coulomb term imprints
   the conditional phase;
3. transfer-out: the same pulse again;
4. a short S-gate segment cancelling every single-qudit phase.

The wait time is calibrated by simulation so that the realised conditional
phase (including what accrues during the transfers) equals the request.
The protocol is accurate when the conditional energy is small compared with
the tunnelling amplitude; otherwise the transfers are blockaded and the
report shows it.

When the participants share one auxiliary (``shared_aux``), at most one
electron fits on it and the gate is driven through that blockade instead:
the first participant moves in, each other participant does a detuned
full Rabi cycle (blocked when the auxiliary is occupied), and the first
participant moves back.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constants import HBAR
from .evolve import (
    ControlSchedule,
    FidelityReport,
    Segment,
    gate_fidelity,
    projector,
    propagate,
    wrap_phase,
)
from .layout import RegisterLayout, Scheme
from .model import (
    DEFAULT_BASIS_CAP,
    DEFAULT_DELTA_MAX,
    ConfigurationBasis,
    ControlValues,
    HamiltonianBuilder,
    enumerate_basis,
    pair_coupling,
)

DEFAULT_T_COH = 1.0e4  # ps
DEFAULT_DETUNING = 5.0  # meV
DEFAULT_PHASE_SEGMENT = 0.5  # ps
WEAK_INTERACTION_FLOOR = 1e-6  # meV


class CompileError(ValueError):
    pass


class CollisionError(CompileError):
    pass


class WeakInteractionError(CompileError):
    pass


@dataclass(frozen=True)
class GateSpec:
    kind: str  # "single_qudit" | "controlled_phase" | "k_phase"
    participants: tuple[int, ...]
    phase: float = math.pi
    target: np.ndarray | None = None
    tolerance: float = 1e-3


@dataclass(frozen=True)
class GateReport:
    gate: str
    participants: tuple[int, ...]
    schedule: ControlSchedule
    fidelity: FidelityReport
    target: np.ndarray
    t_coh: float = DEFAULT_T_COH
    phase: float | None = None
    t_wait: float = 0.0
    delta_v: float | None = None
    conditional_phase: float | None = None
    pairwise_phases: dict[tuple[int, ...], float] = field(default_factory=dict)
    k_body_residual: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.schedule.duration

    @property
    def budget_fraction(self) -> float:
        return self.duration / self.t_coh

    @property
    def infidelity(self) -> float:
        return 1.0 - self.fidelity.average_fidelity

    def to_dict(self) -> dict:
        out = {
            "gate": self.gate,
            "participants": list(self.participants),
            "duration_ps": self.duration,
            "avg_fidelity": self.fidelity.average_fidelity,
            "process_fidelity": self.fidelity.process_fidelity,
            "leakage": self.fidelity.leakage,
            "global_phase_rad": self.fidelity.global_phase,
            "budget_fraction": self.budget_fraction,
            "t_coh_ps": self.t_coh,
        }
        if self.phase is not None:
            out["phase_rad"] = self.phase
            out["t_wait_ps"] = self.t_wait
            out["delta_v_meV"] = self.delta_v
            out["conditional_phase_rad"] = self.conditional_phase
            out["pairwise_phases_rad"] = {
                "-".join(map(str, k)): v for k, v in self.pairwise_phases.items()
            }
            out["k_body_residual_rad"] = self.k_body_residual
        if self.notes:
            out["notes"] = list(self.notes)
        return out


class RegisterSim:
    """Basis, term cache and computational-subspace bookkeeping for one layout."""

    def __init__(self, layout: RegisterLayout, delta_max: float = DEFAULT_DELTA_MAX, cap: int = DEFAULT_BASIS_CAP):
        self.layout = layout
        self.delta_max = delta_max
        self.basis: ConfigurationBasis = enumerate_basis(layout, cap)
        self.builder = HamiltonianBuilder(self.basis)
        self.comp = self.basis.computational_indices()
        self.p = projector(self.comp, len(self.basis))
        d, n = layout.levels, layout.n_qudits
        self.comp_levels = list(itertools.product(range(1, d + 1), repeat=n))
        self._comp_pos = {lv: i for i, lv in enumerate(self.comp_levels)}

    def propagate(self, schedule: ControlSchedule) -> np.ndarray:
        return propagate(self.basis, schedule, self.delta_max, self.builder)

    def comp_index(self, levels: Sequence[int]) -> int:
        return self._comp_pos[tuple(levels)]

    def comp_phases(self, u: np.ndarray) -> np.ndarray:
        """Angles of the diagonal of ``u`` on the computational subspace."""
        return np.angle(np.diag(u)[self.comp])

    def diagonal_target(self, pattern) -> np.ndarray:
        return np.diag(np.exp(1j * np.array([pattern(lv) for lv in self.comp_levels])))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def transfer_time(delta: float) -> float:
    """Duration (ps) of a complete two-site transfer at tunnelling ``delta``."""
    if not delta > 0:
        raise CompileError("tunnelling amplitude must be positive")
    return math.pi * HBAR / (2.0 * delta)


def transfer_pulse(
    layout: RegisterLayout,
    qudit: int,
    from_level: int,
    to_site: int,
    delta: float,
    delta_max: float = DEFAULT_DELTA_MAX,
) -> Segment:
    src = layout.dot(qudit, from_level)
    handle = layout.b_gate_between(src, to_site)
    if handle is None:
        raise CompileError(f"no B-gate between site {src} and site {to_site}")
    if delta > delta_max * (1 + 1e-12):
        raise CompileError(f"tunnelling {delta} meV exceeds maximum {delta_max} meV")
    return Segment(transfer_time(delta), ControlValues(delta={handle: delta}), "transfer")


def coherence_budget(report: "GateReport | float", t_coh: float = DEFAULT_T_COH) -> tuple[float, int]:
    """Fraction of ``t_coh`` used and how many such gates fit in sequence."""
    duration = report.duration if isinstance(report, GateReport) else float(report)
    if not duration > 0:
        raise ValueError("duration must be positive")
    return duration / t_coh, int(math.floor(t_coh / duration * (1 + 1e-12)))


def _reference_levels(layout: RegisterLayout, participants) -> list[int]:
    return [2 if q in participants else 1 for q in range(layout.n_qudits)]


def _resonance_shift(layout: RegisterLayout, qudit: int, aux: int, occupied: Sequence[int]) -> float:
    """S-gate shift on ``aux`` equalising it with ``qudit``'s ``|1>`` dot.

    ``occupied`` lists the sites of the other electrons in the reference
    configuration.
    """
    pair = pair_coupling(layout)
    src = layout.dot(qudit, 1)
    return -float(sum(pair[aux, s] - pair[src, s] for s in occupied))


def _inclusion_exclusion(values: dict[frozenset, float], subset: Sequence[int]) -> float:
    total = 0.0
    k = len(subset)
    for r in range(k + 1):
        for sub in itertools.combinations(subset, r):
            total += (-1) ** (k - r) * values[frozenset(sub)]
    return total


def _subset_phases(sim: RegisterSim, theta: np.ndarray, participants) -> dict[frozenset, float]:
    ref = _reference_levels(sim.layout, participants)
    out = {}
    for r in range(len(participants) + 1):
        for sub in itertools.combinations(participants, r):
            lv = list(ref)
            for q in sub:
                lv[q] = 1
            out[frozenset(sub)] = float(theta[sim.comp_index(lv)])
    return out


def _wrap_dict(values: dict) -> dict:
    # Unwrap relative to the empty set so inclusion-exclusion stays small.
    base = values[frozenset()]
    return {k: base + float(wrap_phase(v - base)) for k, v in values.items()}


def interaction_coefficients(sim: RegisterSim, u: np.ndarray, participants) -> dict[frozenset, float]:
    """Phase coefficient ``c_S`` for every subset ``S`` of at least two participants."""
    vals = _wrap_dict(_subset_phases(sim, sim.comp_phases(u), participants))
    out = {}
    for r in range(2, len(participants) + 1):
        for sub in itertools.combinations(participants, r):
            out[frozenset(sub)] = float(wrap_phase(_inclusion_exclusion(vals, sub)))
    return out


def _pattern_from_coefficients(coeffs: dict[frozenset, float]):
    def pattern(levels):
        return sum(c for s, c in coeffs.items() if all(levels[q] == 1 for q in s))
    return pattern


def _local_correction(
    sim: RegisterSim, u: np.ndarray, pattern, participants, t_seg: float
) -> ControlValues:
    """S-gate shifts for one segment of length ``t_seg`` removing single-qudit phases.

    Only participants are corrected; spectator gates stay free for
    parallel use.
    """
    layout = sim.layout
    theta = sim.comp_phases(u)
    ref = _reference_levels(layout, participants)
    t_ref = theta[sim.comp_index(ref)]
    p_ref = pattern(ref)
    shift = {}
    for q in participants:
        for d in range(1, layout.levels + 1):
            lv = list(ref)
            lv[q] = d
            got = theta[sim.comp_index(lv)] - t_ref
            want = pattern(lv) - p_ref
            f = float(wrap_phase(want - got))
            if abs(f) > 1e-14:
                shift[layout.s_gate_of(layout.dot(q, d))] = -f * HBAR / t_seg
    return ControlValues(shift=shift)


def _finish(
    sim: RegisterSim,
    body: ControlSchedule,
    pattern,
    participants,
    t_seg: float = DEFAULT_PHASE_SEGMENT,
) -> tuple[ControlSchedule, np.ndarray, np.ndarray]:
    """Append a calibrated local-phase segment; return schedule, propagator, target."""
    probe = ControlSchedule(list(body.segments) + [Segment(t_seg, ControlValues(), "phase-correction")])
    u0 = sim.propagate(probe)
    corr = _local_correction(sim, u0, pattern, participants, t_seg)
    sched = ControlSchedule(list(body.segments) + [Segment(t_seg, corr, "phase-correction")])
    u = sim.propagate(sched)
    return sched, u, sim.diagonal_target(pattern)


# ---------------------------------------------------------------------------
# multi-qudit phase gates
# ---------------------------------------------------------------------------

def _check_participants(layout: RegisterLayout, participants) -> tuple[int, ...]:
    participants = tuple(int(q) for q in participants)
    if len(set(participants)) != len(participants):
        raise CompileError("duplicate participants")
    for q in participants:
        if not 0 <= q < layout.n_qudits:
            raise CompileError(f"qudit {q} not in register")
    ordered = sorted(participants)
    if ordered != list(range(ordered[0], ordered[0] + len(ordered))):
        raise CompileError(f"participants {participants} are not adjacent")
    if layout.levels < 2:
        raise CompileError("need at least two levels")
    return participants


def _common_aux(layout: RegisterLayout, participants) -> int | None:
    common = set(layout.aux_of(participants[0]))
    for q in participants[1:]:
        common &= set(layout.aux_of(q))
    return min(common) if common else None


def _distinct_aux(layout: RegisterLayout, participants) -> dict[int, int]:
    """Assign each participant its own auxiliary or raise."""
    for q in participants:
        if not layout.aux_of(q):
            raise CompileError(f"qudit {q} has no auxiliary dot")
    for choice in itertools.product(*(layout.aux_of(q) for q in participants)):
        if len(set(choice)) == len(choice):
            return dict(zip(participants, choice))
    raise CollisionError("participants cannot be given distinct auxiliaries")


def compile_controlled_phase(
    layout: RegisterLayout,
    participants: Sequence[int],
    phi: float,
    **kwargs,
) -> GateReport:
    """Two-qudit phase ``phi`` on the joint ``|1 1>`` state."""
    if len(participants) != 2:
        raise CompileError("controlled phase takes exactly two participants")
    return compile_k_phase(layout, participants, phi, **kwargs)


def compile_k_phase(
    layout: RegisterLayout,
    participants: Sequence[int],
    phi: float,
    delta: float | None = None,
    delta_max: float = DEFAULT_DELTA_MAX,
    detuning: float = DEFAULT_DETUNING,
    t_coh: float = DEFAULT_T_COH,
    cancel_pairwise: bool = False,
    sim: RegisterSim | None = None,
) -> GateReport:
    """Phase gate on ``k`` adjacent qudits driven through their auxiliaries.

    ``phi`` is the phase left on the all-``|1>`` participant state once
    single-qudit phases are removed.
    """
    participants = _check_participants(layout, participants)
    if len(participants) < 2:
        raise CompileError("need at least two participants")
    if layout.scheme is Scheme.ALWAYS_ON:
        raise CompileError("always_on registers have no auxiliary dots")
    delta = delta_max if delta is None else float(delta)
    if not 0 < delta <= delta_max * (1 + 1e-12):
        raise CompileError(f"transfer tunnelling {delta} outside (0, {delta_max}] meV")
    sim = sim or RegisterSim(layout, delta_max)

    if layout.scheme is Scheme.SHARED_AUX:
        common = _common_aux(layout, participants)
        if common is not None:
            if len(participants) == 2:
                raise CollisionError(
                    f"qudits {participants} share auxiliary site {common}: a controlled "
                    "two-qudit interaction through a shared auxiliary would act on all of "
                    "its owners"
                )
            return _compile_blockade(sim, participants, common, phi, delta, t_coh)
    aux = _distinct_aux(layout, participants)
    report = _compile_transfer_wait(sim, participants, aux, phi, delta, detuning, t_coh)
    if cancel_pairwise and len(participants) > 2:
        report = _cancel_pairwise(sim, report, delta, detuning, t_coh)
    return report


def _transfer_segment(sim: RegisterSim, participants, aux, delta, detuning) -> Segment:
    layout = sim.layout
    ctrl = ControlValues()
    ref_sites = [layout.dot(q, 1) for q in range(layout.n_qudits)]
    for q in participants:
        handle = layout.b_gate_between(layout.dot(q, 1), aux[q])
        ctrl.delta[handle] = delta
        others = [s for i, s in enumerate(ref_sites) if i != q]
        shift = _resonance_shift(layout, q, aux[q], others)
        if shift:
            ctrl.shift[layout.s_gate_of(aux[q])] = shift
        for d in range(2, layout.levels + 1):
            ctrl.shift[layout.s_gate_of(layout.dot(q, d))] = detuning
    return Segment(transfer_time(delta), ctrl, "transfer")


def wait_rates(layout: RegisterLayout, participants, aux) -> dict[frozenset, float]:
    """Conditional energies (meV) for every participant subset during the wait.

    Participants in ``|1>`` sit on their auxiliaries, the others on the
    reference level 2; spectators stay on ``|1>``.
    """
    pair = pair_coupling(layout)
    ref = _reference_levels(layout, participants)
    energies = {}
    for r in range(len(participants) + 1):
        for sub in itertools.combinations(participants, r):
            sites = [layout.dot(q, lv) for q, lv in enumerate(ref)]
            for q in sub:
                sites[q] = aux[q]
            energies[frozenset(sub)] = sum(pair[a, b] for a, b in itertools.combinations(sites, 2))
    out = {}
    for r in range(2, len(participants) + 1):
        for sub in itertools.combinations(participants, r):
            out[frozenset(sub)] = _inclusion_exclusion(energies, sub)
    return out


def _compile_transfer_wait(sim, participants, aux, phi, delta, detuning, t_coh) -> GateReport:
    transfer = _transfer_segment(sim, participants, aux, delta, detuning)
    rates = wait_rates(sim.layout, participants, aux)
    total_rate = sum(rates.values())  # meV
    if abs(total_rate) < WEAK_INTERACTION_FLOOR:
        raise WeakInteractionError(
            f"conditional energy {total_rate:.3g} meV below floor {WEAK_INTERACTION_FLOOR} meV: "
            "interaction too weak"
        )
    full = frozenset(participants)

    def body(t_wait: float) -> ControlSchedule:
        segs = [transfer]
        if t_wait > 0:
            segs.append(Segment(t_wait, ControlValues(), "wait"))
        segs.append(transfer)
        return ControlSchedule(segs)

    def realised(t_wait: float) -> tuple[float, dict]:
        coeffs = interaction_coefficients(sim, sim.propagate(body(t_wait)), participants)
        return sum(coeffs.values()), coeffs

    phase_rate = -total_rate / HBAR  # rad / ps accrued on the all-|1> state
    phi0, coeffs0 = realised(0.0)
    if abs(float(wrap_phase(phi))) < 1e-15:
        t_wait = 0.0
    else:
        gap = float((phi - phi0) % (2 * math.pi)) if phase_rate > 0 else float((phi0 - phi) % (2 * math.pi))
        t_wait = gap / abs(phase_rate)
        for _ in range(4):
            err = float(wrap_phase(realised(t_wait)[0] - phi))
            if abs(err) < 1e-12:
                break
            t_wait = max(0.0, t_wait - err / phase_rate)

    # Target: zero-wait coefficients plus the linear wait contribution.
    target = {s: coeffs0[s] - rates[s] * t_wait / HBAR for s in coeffs0}
    if len(participants) == 2:
        target = {full: float(phi)}
    sched, u, target_m = _finish(sim, body(t_wait), _pattern_from_coefficients(target), participants)
    fid = gate_fidelity(u, target_m, sim.p)
    coeffs = interaction_coefficients(sim, u, participants)
    pairwise = {tuple(sorted(s)): v for s, v in coeffs.items() if len(s) == 2}
    residual = coeffs[full] if len(participants) > 2 else None
    notes = []
    strongest = max(abs(v) for v in rates.values())
    if strongest > 0.1 * delta:
        notes.append(
            f"conditional energy {strongest:.3g} meV exceeds a tenth of the transfer "
            f"tunnelling {delta:.3g} meV; transfers are partly blockaded"
        )
    return GateReport(
        gate="controlled_phase" if len(participants) == 2 else "k_phase",
        participants=tuple(participants),
        schedule=sched,
        fidelity=fid,
        target=target_m,
        t_coh=t_coh,
        phase=float(phi),
        t_wait=t_wait,
        delta_v=total_rate,
        conditional_phase=float(sum(coeffs.values())),
        pairwise_phases=pairwise,
        k_body_residual=residual,
        notes=notes,
    )


def _cancel_pairwise(sim, report: GateReport, delta, detuning, t_coh) -> GateReport:
    """Append two-body gates undoing every pairwise phase of ``report``."""
    segs = list(report.schedule.segments)
    participants = report.participants
    for pair, c in sorted(report.pairwise_phases.items()):
        if abs(float(wrap_phase(c))) < 1e-12:
            continue
        aux = _distinct_aux(sim.layout, pair)
        sub = _compile_transfer_wait(sim, pair, aux, float((-c) % (2 * math.pi)), delta, detuning, t_coh)
        segs.extend(sub.schedule.segments)
    body = ControlSchedule(segs)
    u = sim.propagate(body)
    full = frozenset(participants)
    residual = {full: interaction_coefficients(sim, u, participants)[full]}
    sched, u, target_m = _finish(sim, body, _pattern_from_coefficients(residual), participants)
    coeffs = interaction_coefficients(sim, u, participants)
    return GateReport(
        gate="k_phase",
        participants=participants,
        schedule=sched,
        fidelity=gate_fidelity(u, target_m, sim.p),
        target=target_m,
        t_coh=t_coh,
        phase=float(sum(coeffs.values())),
        t_wait=report.t_wait,
        delta_v=report.delta_v,
        conditional_phase=float(sum(coeffs.values())),
        pairwise_phases={tuple(sorted(s)): v for s, v in coeffs.items() if len(s) == 2},
        k_body_residual=coeffs[full],
        notes=report.notes + ["pairwise phases cancelled"],
    )


def blockade_pulse(delta: float, phase: float) -> tuple[float, float]:
    """Detuning (meV) and duration (ps) of a full Rabi cycle returning with ``phase``.

    A two-site cycle at tunnelling ``delta`` and site detuning ``eps`` returns
    the electron with phase ``pi - pi * eps / W``, ``W = sqrt(eps^2 + 4 delta^2)``.
    """
    theta = float(phase % (2 * math.pi))
    if theta == 0.0:
        raise CompileError("a zero-phase cycle needs no pulse")
    c = 1.0 - theta / math.pi
    width = 2.0 * delta / math.sqrt(1.0 - c * c)
    return c * width, 2.0 * math.pi * HBAR / width


def _compile_blockade(sim: RegisterSim, participants, aux: int, phi, delta, t_coh) -> GateReport:
    layout = sim.layout
    control, targets = participants[0], participants[1:]
    ref_sites = [layout.dot(q, 1) for q in range(layout.n_qudits)]

    def move(q: int, extra: dict | None = None) -> ControlValues:
        handle = layout.b_gate_between(layout.dot(q, 1), aux)
        ctrl = ControlValues(delta={handle: delta})
        others = [s for i, s in enumerate(ref_sites) if i != q]
        shift = _resonance_shift(layout, q, aux, others)
        if extra:
            shift += extra.get("aux", 0.0)
        if shift:
            ctrl.shift[layout.s_gate_of(aux)] = shift
        return ctrl

    segs = [Segment(transfer_time(delta), move(control), "transfer")]
    cycle_phase = float((-phi) % (2 * math.pi))
    if cycle_phase > 1e-15:
        eps, t_cycle = blockade_pulse(delta, cycle_phase)
        for q in targets:
            segs.append(Segment(t_cycle, move(q, {"aux": eps}), "blockade-cycle"))
    segs.append(Segment(transfer_time(delta), move(control), "transfer"))

    target = {frozenset((control, q)): float(phi) for q in targets}
    sched, u, target_m = _finish(sim, ControlSchedule(segs), _pattern_from_coefficients(target), participants)
    coeffs = interaction_coefficients(sim, u, participants)
    full = frozenset(participants)
    return GateReport(
        gate="k_phase",
        participants=tuple(participants),
        schedule=sched,
        fidelity=gate_fidelity(u, target_m, sim.p),
        target=target_m,
        t_coh=t_coh,
        phase=float(phi),
        t_wait=0.0,
        delta_v=None,
        conditional_phase=float(sum(coeffs.values())),
        pairwise_phases={tuple(sorted(s)): v for s, v in coeffs.items() if len(s) == 2},
        k_body_residual=coeffs[full],
        notes=[f"shared auxiliary {aux}: blockade protocol with control qudit {control}"],
    )


# ---------------------------------------------------------------------------
# single-qudit synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    """Two-level unitary ``P(a) X(theta) P(b)`` on levels ``(lower, lower+1)``.

    ``P(x) = diag(1, e^{ix})`` and ``X(theta) = exp(i theta/2 sigma_x)`` is
    what a resonant B-gate pulse of length ``theta * hbar / (2 delta)`` does.
    """

    lower: int
    theta: float
    a: float
    b: float
    global_phase: float

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta / 2), math.sin(self.theta / 2)
        pa = np.diag([1.0, np.exp(1j * self.a)])
        pb = np.diag([1.0, np.exp(1j * self.b)])
        x = np.array([[c, 1j * s], [1j * s, c]])
        return np.exp(1j * self.global_phase) * pa @ x @ pb


def two_level_params(w: np.ndarray, lower: int = 0) -> Rotation:
    w = np.asarray(w, dtype=complex)
    c = min(1.0, abs(w[0, 0]))
    theta = 2.0 * math.acos(c)
    if c > 1e-12 and abs(w[1, 0]) > 1e-12:
        g = np.angle(w[0, 0])
        a = np.angle(w[1, 0]) - g - math.pi / 2
        b = np.angle(w[0, 1]) - g - math.pi / 2
    elif c > 1e-12:
        g = np.angle(w[0, 0])
        a = np.angle(w[1, 1]) - g
        b = 0.0
    else:
        g = np.angle(w[1, 0]) - math.pi / 2
        a = 0.0
        b = np.angle(w[0, 1]) - g - math.pi / 2
    return Rotation(lower, theta, float(wrap_phase(a)), float(wrap_phase(b)), float(g))


def givens_decompose(u: np.ndarray) -> tuple[list[Rotation], np.ndarray]:
    """Adjacent-level factorisation ``U = R_1 R_2 ... R_m diag(phases)``.

    ``m <= D(D-1)/2``; rotations with zero angle are dropped.
    """
    u = np.asarray(u, dtype=complex)
    d = u.shape[0]
    work = u.copy()
    factors: list[Rotation] = []
    for col in range(d - 1):
        for row in range(d - 1, col, -1):
            x, y = work[row - 1, col], work[row, col]
            if abs(y) < 1e-14:
                continue
            r = math.hypot(abs(x), abs(y))
            # g maps (x, y) to (r, 0): g = [[x*, y*], [-y, x]] / r
            g = np.array([[np.conj(x), np.conj(y)], [-y, x]]) / r
            work[[row - 1, row], :] = g @ work[[row - 1, row], :]
            factors.append(two_level_params(g.conj().T, row - 1))
    phases = np.angle(np.diag(work))
    def trivial(f: Rotation) -> bool:
        return f.theta < 1e-13 and abs(wrap_phase(f.global_phase)) < 1e-13 and abs(wrap_phase(f.a + f.b + f.global_phase)) < 1e-13

    return [f for f in factors if not trivial(f)], phases


def _embed(rot: Rotation, d: int) -> np.ndarray:
    m = np.eye(d, dtype=complex)
    m[rot.lower:rot.lower + 2, rot.lower:rot.lower + 2] = rot.matrix()
    return m


def synthesize_single_qudit(
    layout: RegisterLayout,
    qudit: int,
    target: np.ndarray,
    delta_max: float = DEFAULT_DELTA_MAX,
    t_phase: float = DEFAULT_PHASE_SEGMENT,
    t_coh: float = DEFAULT_T_COH,
    sim: RegisterSim | None = None,
) -> GateReport:
    """Compile an arbitrary ``D x D`` unitary on one qudit into B- and S-gate segments."""
    target = np.asarray(target, dtype=complex)
    d = layout.levels
    if target.shape != (d, d):
        raise CompileError(f"target must be {d}x{d}")
    if np.max(np.abs(target.conj().T @ target - np.eye(d))) > 1e-10:
        raise CompileError("target is not unitary")
    if not 0 <= qudit < layout.n_qudits:
        raise CompileError(f"qudit {qudit} not in register")
    sim = sim or RegisterSim(layout, delta_max)
    dots = layout.qudit_dots(qudit)
    rotations, final = givens_decompose(target)

    # Application order: final phases first, then rotations from last to first.
    ops: list[tuple[str, object]] = [("phase", np.asarray(final, dtype=float))]
    for rot in reversed(rotations):
        pre = np.zeros(d)
        # The block's overall phase is relative to the untouched levels.
        pre[rot.lower] = rot.global_phase
        pre[rot.lower + 1] = rot.b + rot.global_phase
        post = np.zeros(d)
        post[rot.lower + 1] = rot.a
        ops += [("phase", pre), ("pulse", rot), ("phase", post)]

    # Spectators parked on |1> shift this qudit's levels by a static energy.
    pair = pair_coupling(layout)
    others = [layout.dot(q, 1) for q in range(layout.n_qudits) if q != qudit]
    static = np.array([sum(pair[s, o] for o in others) for s in dots])

    segs: list[Segment] = []
    pending = np.zeros(d)
    for kind, op in ops:
        if kind == "phase":
            pending = pending + op
            continue
        rot = op
        block = (rot.lower, rot.lower + 1)
        t_rot = rot.theta * HBAR / (2.0 * delta_max)
        # Block levels are zeroed; the rest evolve freely, which commutes with
        # the pulse and is undone in advance.
        for i in range(d):
            if i not in block:
                pending[i] += static[i] * t_rot / HBAR
        if np.any(np.abs(wrap_phase(pending)) > 1e-14):
            segs.append(_phase_segment(layout, dots, pending, t_phase, static))
            pending = np.zeros(d)
        handle = layout.b_gate_between(dots[block[0]], dots[block[1]])
        ctrl = ControlValues(delta={handle: delta_max})
        for i in block:
            if static[i]:
                ctrl.shift[layout.s_gate_of(dots[i])] = -static[i]
        segs.append(Segment(t_rot, ctrl, "rotation"))
    if np.any(np.abs(wrap_phase(pending)) > 1e-14):
        segs.append(_phase_segment(layout, dots, pending, t_phase, static))

    body = ControlSchedule(segs)
    full_target = _embed_single(sim, qudit, target)
    if segs:
        # Fold every phase the spectators or detunings left behind into one last segment.
        u0 = sim.propagate(body)
        resid = _single_qudit_phase_error(sim, u0, qudit, target)
        if np.any(np.abs(resid) > 1e-13):
            body = ControlSchedule(segs + [_phase_segment(layout, dots, resid, t_phase, static)])
    u = sim.propagate(body)
    return GateReport(
        gate="single_qudit",
        participants=(qudit,),
        schedule=body,
        fidelity=gate_fidelity(u, full_target, sim.p),
        target=full_target,
        t_coh=t_coh,
        notes=[f"{len(rotations)} two-level rotations"],
    )


def _phase_segment(layout, dots, phases, t_phase, static=None) -> Segment:
    """S-gate segment imprinting ``phases`` on ``dots`` on top of ``static`` energies."""
    static = np.zeros(len(dots)) if static is None else static
    shift = {}
    for i, ph in enumerate(phases):
        e = -float(wrap_phase(ph)) * HBAR / t_phase - static[i]
        if abs(e) > 1e-14:
            shift[layout.s_gate_of(dots[i])] = e
    return Segment(t_phase, ControlValues(shift=shift), "phase")


def _embed_single(sim: RegisterSim, qudit: int, u: np.ndarray) -> np.ndarray:
    n = sim.layout.n_qudits
    mats = [u if q == qudit else np.eye(sim.layout.levels) for q in range(n)]
    out = np.ones((1, 1), dtype=complex)
    for m in mats:
        out = np.kron(out, m)
    return out


def _single_qudit_phase_error(sim: RegisterSim, u: np.ndarray, qudit: int, target: np.ndarray) -> np.ndarray:
    """Per-level phase to add so the block seen with spectators on ``|1>`` matches."""
    d = sim.layout.levels
    ref = [1] * sim.layout.n_qudits
    idx = []
    for lv in range(1, d + 1):
        r = list(ref)
        r[qudit] = lv
        idx.append(sim.comp[sim.comp_index(r)])
    block = u[np.ix_(idx, idx)]
    # Find diagonal D minimising ||D block - target||: per-row phase of <target_row, block_row>.
    prods = np.sum(target.conj() * block, axis=1)
    return -np.angle(prods) + np.angle(prods[0])


# ---------------------------------------------------------------------------
# parallel scheduling
# ---------------------------------------------------------------------------

def _schedule_sites(layout: RegisterLayout, schedule: ControlSchedule) -> set[int]:
    sites = set()
    for seg in schedule.segments:
        for h in seg.controls.delta:
            sites.update(layout.b_gates[h])
        for h in seg.controls.shift:
            sites.add(layout.s_gates[h])
    return sites


def schedule_parallel(layout: RegisterLayout, reports: Sequence[GateReport]) -> ControlSchedule:
    """Run gates on disjoint qudit sets at the same time.

    Schedules are sliced at the union of their segment boundaries; the
    shorter ones idle (zero controls) at the end.
    """
    reports = [r for r in reports if r is not None]
    seen: set[int] = set()
    used_aux: set[int] = set()
    aux_ids = set(layout.aux_sites())
    for r in reports:
        if seen & set(r.participants):
            raise CompileError(f"qudit sets overlap on {sorted(seen & set(r.participants))}")
        seen |= set(r.participants)
        aux = _schedule_sites(layout, r.schedule) & aux_ids
        if used_aux & aux:
            raise CompileError("gates would share an auxiliary dot")
        used_aux |= aux
        for a in layout.aux_sites():
            owners = set(layout.sites[a].owners)
            if a in aux and owners - set(r.participants) & seen - set(r.participants):
                raise CompileError(f"auxiliary {a} is shared with another gate's qudits")
    if not reports:
        return ControlSchedule()
    if len(reports) == 1:
        return ControlSchedule(list(reports[0].schedule.segments))

    cuts = {0.0}
    for r in reports:
        t = 0.0
        for seg in r.schedule.segments:
            t += seg.duration
            cuts.add(t)
    cuts = sorted(cuts)
    merged = []
    for t0, t1 in zip(cuts, cuts[1:]):
        if t1 - t0 <= 0.0:
            continue
        mid = 0.5 * (t0 + t1)
        ctrl = ControlValues()
        for r in reports:
            seg = _segment_at(r.schedule, mid)
            if seg is not None:
                ctrl.delta.update(seg.controls.delta)
                ctrl.shift.update(seg.controls.shift)
        merged.append(Segment(t1 - t0, ctrl, "parallel"))
    return ControlSchedule(merged)


def _segment_at(schedule: ControlSchedule, t: float) -> Segment | None:
    start = 0.0
    for seg in schedule.segments:
        if start <= t < start + seg.duration:
            return seg
        start += seg.duration
    return None


def compose_targets(sim: RegisterSim, reports: Sequence[GateReport]) -> np.ndarray:
    out = np.eye(len(sim.comp), dtype=complex)
    for r in reports:
        out = r.target @ out
    return out


def pad_schedule(schedule: ControlSchedule, duration: float) -> ControlSchedule:
    """``schedule`` followed by an idle segment up to ``duration``."""
    extra = duration - schedule.duration
    if extra < -1e-12:
        raise CompileError("schedule is longer than the requested duration")
    segs = list(schedule.segments)
    if extra > 0:
        segs.append(Segment(extra, ControlValues(), "idle"))
    return ControlSchedule(segs)


def parallel_composition(sim: RegisterSim, reports: Sequence[GateReport], duration: float) -> np.ndarray:
    """Product of the individual gates, each padded to ``duration``.

    Every padded propagator also carries the free evolution of the qudits it
    does not touch, so one idle propagator is divided out between factors:
    ``U_1 W^-1 U_2 W^-1 ... U_n``. Without cross-set coupling this equals the
    simultaneous evolution exactly.
    """
    idle_inv = sim.propagate(ControlSchedule([Segment(duration, ControlValues(), "idle")])).conj().T
    out = None
    for r in reports:
        u = sim.propagate(pad_schedule(r.schedule, duration))
        out = u if out is None else out @ idle_inv @ u
    return out
