"""Piecewise-constant propagation and gate metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constants import HBAR
from .model import (
    DEFAULT_DELTA_MAX,
    ConfigurationBasis,
    ControlValues,
    HamiltonianBuilder,
    ModelError,
)


class EvolveError(ValueError):
    pass


@dataclass
class Segment:
    duration: float  # ps
    controls: ControlValues = field(default_factory=ControlValues)
    label: str = ""

    def to_dict(self) -> dict:
        out = {"duration_ps": self.duration, **self.controls.to_dict()}
        if self.label:
            out["label"] = self.label
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Segment":
        extra = set(data) - {"duration_ps", "delta", "shift", "label"}
        if extra:
            raise EvolveError(f"unknown segment keys {sorted(extra)}")
        if "duration_ps" not in data:
            raise EvolveError("segment missing 'duration_ps'")
        return cls(
            duration=float(data["duration_ps"]),
            controls=ControlValues.from_dict({k: data[k] for k in ("delta", "shift") if k in data}),
            label=str(data.get("label", "")),
        )


@dataclass
class ControlSchedule:
    segments: list[Segment] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def __add__(self, other: "ControlSchedule") -> "ControlSchedule":
        return ControlSchedule(list(self.segments) + list(other.segments))

    def to_dict(self) -> dict:
        return {"units": {"time": "ps", "energy": "meV"}, "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, data: dict) -> "ControlSchedule":
        if not isinstance(data, dict) or "segments" not in data:
            raise EvolveError("schedule document needs a 'segments' list")
        extra = set(data) - {"segments", "units"}
        if extra:
            raise EvolveError(f"unknown schedule keys {sorted(extra)}")
        segs = []
        for i, s in enumerate(data["segments"]):
            try:
                segs.append(Segment.from_dict(s))
            except (EvolveError, ModelError, TypeError, ValueError) as exc:
                raise EvolveError(f"segments[{i}]: {exc}") from exc
        return cls(segs)

    def validate(self, layout, delta_max: float = DEFAULT_DELTA_MAX) -> None:
        for i, seg in enumerate(self.segments):
            if not np.isfinite(seg.duration) or seg.duration < 0:
                raise EvolveError(f"segment {i}: duration must be finite and >= 0")
            try:
                seg.controls.validate(layout, delta_max)
            except ModelError as exc:
                raise EvolveError(f"segment {i}: {exc}") from exc


def segment_propagator(h: np.ndarray, t: float) -> np.ndarray:
    """``exp(-i H t / hbar)`` via the Hermitian eigendecomposition of ``H``."""
    if t == 0.0:
        return np.eye(h.shape[0], dtype=complex)
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * t / HBAR)) @ v.conj().T


def propagate(
    basis: ConfigurationBasis,
    schedule: ControlSchedule,
    delta_max: float = DEFAULT_DELTA_MAX,
    builder: HamiltonianBuilder | None = None,
    hamiltonian_scale: float = 1.0,
) -> np.ndarray:
    """Total propagator, segments applied in order (first segment rightmost).

    ``hamiltonian_scale = -1`` evolves under ``-H``; it exists for
    time-reversal checks.
    """
    schedule.validate(basis.layout, delta_max)
    builder = builder or HamiltonianBuilder(basis)
    u = np.eye(builder.dim, dtype=complex)
    for seg in schedule.segments:
        if seg.duration == 0.0:
            continue
        h = builder.matrix(seg.controls, scale=hamiltonian_scale)
        if not np.all(np.isfinite(h)):
            raise EvolveError("non-finite Hamiltonian")
        if not np.any(h - np.diag(np.diag(h))):
            u = np.exp(-1j * np.diag(h).real * seg.duration / HBAR)[:, None] * u
        else:
            u = segment_propagator(h, seg.duration) @ u
    return u


def evolve_state(psi0: np.ndarray, u: np.ndarray) -> np.ndarray:
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (u.shape[1],):
        raise EvolveError(f"state of shape {psi0.shape} does not match propagator {u.shape}")
    return u @ psi0


def projector(indices: Sequence[int], dim: int) -> np.ndarray:
    p = np.zeros((dim, dim))
    p[list(indices), list(indices)] = 1.0
    return p


def _subspace_basis(p: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise EvolveError("projector must be square")
    if np.max(np.abs(p @ p - p)) > tol or np.max(np.abs(p - p.conj().T)) > tol:
        raise EvolveError("projector is not a Hermitian idempotent")
    diag = np.diag(p)
    if np.max(np.abs(p - np.diag(diag))) <= tol:
        idx = np.nonzero(np.abs(diag - 1.0) <= tol)[0]
        w = np.zeros((p.shape[0], idx.size), dtype=complex)
        w[idx, np.arange(idx.size)] = 1.0
        return w
    vals, vecs = np.linalg.eigh(p)
    return vecs[:, vals > 0.5]


@dataclass(frozen=True)
class FidelityReport:
    process_fidelity: float
    average_fidelity: float
    leakage: float
    global_phase: float

    def to_dict(self) -> dict:
        return {
            "process_fidelity": self.process_fidelity,
            "avg_fidelity": self.average_fidelity,
            "leakage": self.leakage,
            "global_phase_rad": self.global_phase,
        }


def restrict(u: np.ndarray, p: np.ndarray) -> np.ndarray:
    w = _subspace_basis(p)
    return w.conj().T @ u @ w


def gate_fidelity(u: np.ndarray, target: np.ndarray, p: np.ndarray) -> FidelityReport:
    m = restrict(u, p)
    target = np.asarray(target, dtype=complex)
    d = m.shape[0]
    if target.shape != (d, d):
        raise EvolveError(f"target shape {target.shape} does not match subspace dimension {d}")
    overlap = np.trace(target.conj().T @ m)
    process = float(abs(overlap) ** 2 / d**2)
    kept = float(np.real(np.trace(m.conj().T @ m)) / d)
    avg = (d * process + kept) / (d + 1)
    return FidelityReport(process, avg, max(0.0, 1.0 - kept), float(np.angle(overlap)))


def leakage_profile(psi: np.ndarray, p: np.ndarray) -> float:
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (p.shape[0],):
        raise EvolveError("state and projector dimensions differ")
    inside = float(np.real(psi.conj() @ p @ psi))
    return min(1.0, max(0.0, 1.0 - inside))


def diagonal_phases(
    basis: ConfigurationBasis,
    schedule: ControlSchedule,
    builder: HamiltonianBuilder | None = None,
) -> np.ndarray:
    """Independent oracle for tunnelling-free schedules: ``-sum_k E_k t_k / hbar``.

    Phases are not wrapped. Raises if any segment carries tunnelling.
    """
    builder = builder or HamiltonianBuilder(basis)
    phase = np.zeros(len(basis))
    for seg in schedule.segments:
        if any(v for v in seg.controls.delta.values()):
            raise EvolveError("diagonal oracle needs all tunnelling amplitudes to be zero")
        energy = basis.coulomb.copy()
        for h, e in seg.controls.shift.items():
            energy += e * builder.occ[h]
        phase -= energy * seg.duration / HBAR
    return phase


def wrap_phase(x):
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def complex_csv(values: np.ndarray, labels: Sequence[str] | None = None) -> str:
    """Vector (``index,config,re,im``) or matrix (``row,col,re,im``) of complex entries."""
    values = np.asarray(values)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if values.ndim == 1:
        writer.writerow(["index", "config", "re", "im"])
        for i, v in enumerate(values):
            label = labels[i] if labels is not None else ""
            writer.writerow([i, label, f"{v.real:.17g}", f"{v.imag:.17g}"])
    else:
        writer.writerow(["row", "col", "re", "im"])
        for (r, c), v in np.ndenumerate(values):
            writer.writerow([r, c, f"{v.real:.17g}", f"{v.imag:.17g}"])
    return buf.getvalue()
