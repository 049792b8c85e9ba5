"""Charge-configuration basis and the tight-binding Hamiltonian over it.

One electron per qudit. A configuration records which site each electron
occupies; an electron may sit on one of its own qudit's dots or on an
auxiliary its qudit owns, and no site may hold two electrons.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .constants import COULOMB_K
from .layout import RegisterLayout, Scheme

DEFAULT_BASIS_CAP = 65536
DEFAULT_DELTA_MAX = 1.0  # meV


class ModelError(ValueError):
    pass


Configuration = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ConfigurationBasis:
    layout: RegisterLayout
    configs: tuple[Configuration, ...]
    index: dict[Configuration, int]
    coulomb: np.ndarray  # static Coulomb energy per configuration, meV
    allowed: tuple[tuple[int, ...], ...]  # per-qudit allowed sites, local order

    def __len__(self) -> int:
        return len(self.configs)

    def computational_indices(self) -> np.ndarray:
        """Indices of configurations with every electron on a qudit dot.

        The order matches the tensor-product order ``|d_0 d_1 ... d_{N-1}>``
        with qudit 0 most significant.
        """
        aux = {s.id for s in self.layout.sites if s.is_aux}
        return np.array(
            [i for i, c in enumerate(self.configs) if not aux.intersection(c)], dtype=int
        )

    def level_of(self, config: Configuration, q: int) -> int:
        """Level of qudit ``q`` in ``config``; 0 when the electron is on an auxiliary."""
        return self.layout.sites[config[q]].level

    def config_for_levels(self, levels: Sequence[int]) -> Configuration:
        return tuple(self.layout.dot(q, d) for q, d in enumerate(levels))


def _allowed_sites(layout: RegisterLayout) -> tuple[tuple[int, ...], ...]:
    return tuple(
        tuple(layout.qudit_dots(q)) + tuple(layout.aux_of(q)) for q in range(layout.n_qudits)
    )


def enumerate_basis(layout: RegisterLayout, cap: int = DEFAULT_BASIS_CAP) -> ConfigurationBasis:
    allowed = _allowed_sites(layout)
    size_bound = int(np.prod([len(a) for a in allowed], dtype=object))
    if size_bound > cap and layout.scheme is not Scheme.SHARED_AUX:
        raise ModelError(f"basis size {size_bound} exceeds cap {cap}")
    configs = []
    for combo in itertools.product(*allowed):
        if len(set(combo)) == len(combo):
            configs.append(combo)
            if len(configs) > cap:
                raise ModelError(f"basis size exceeds cap {cap}")
    configs = tuple(configs)
    index = {c: i for i, c in enumerate(configs)}
    pair = pair_coupling(layout)
    coulomb = np.array([_config_energy(c, pair) for c in configs])
    return ConfigurationBasis(layout, configs, index, coulomb, allowed)


def pair_coupling(layout: RegisterLayout) -> np.ndarray:
    """``s_ij * k / (eps_ij * r_ij)`` for every site pair, zero on the diagonal."""
    pos = layout.positions()
    r = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    np.fill_diagonal(r, np.inf)
    out = layout.screening * COULOMB_K / (layout.pair_permittivity() * r)
    np.fill_diagonal(out, 0.0)
    return out


def _config_energy(config: Configuration, pair: np.ndarray) -> float:
    total = 0.0
    for a, b in itertools.combinations(config, 2):
        total += pair[a, b]
    return float(total)


def coulomb_energy(config: Configuration, layout: RegisterLayout) -> float:
    """Screened pairwise Coulomb energy (meV) of the electrons in ``config``."""
    if len(set(config)) != len(config):
        raise ModelError("two electrons on one site")
    return _config_energy(tuple(config), pair_coupling(layout))


@dataclass
class ControlValues:
    """Tunnelling amplitudes per B-gate and on-site shifts per S-gate, in meV."""

    delta: dict[str, float] = field(default_factory=dict)
    shift: dict[str, float] = field(default_factory=dict)

    def validate(self, layout: RegisterLayout, delta_max: float = DEFAULT_DELTA_MAX) -> None:
        for h, v in self.delta.items():
            if h not in layout.b_gates:
                raise ModelError(f"unknown B-gate handle {h!r}")
            if not np.isfinite(v):
                raise ModelError(f"non-finite tunnelling on {h!r}")
            if v < 0 or v > delta_max * (1 + 1e-12):
                raise ModelError(f"tunnelling {v} on {h!r} outside [0, {delta_max}] meV")
        for h, v in self.shift.items():
            if h not in layout.s_gates:
                raise ModelError(f"unknown S-gate handle {h!r}")
            if not np.isfinite(v):
                raise ModelError(f"non-finite shift on {h!r}")

    def to_dict(self) -> dict:
        return {"delta": dict(self.delta), "shift": dict(self.shift)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ControlValues":
        extra = set(data) - {"delta", "shift"}
        if extra:
            raise ModelError(f"unknown control keys {sorted(extra)}")
        return cls(
            delta={str(k): float(v) for k, v in data.get("delta", {}).items()},
            shift={str(k): float(v) for k, v in data.get("shift", {}).items()},
        )


class HamiltonianBuilder:
    """Precomputed term structure for fast repeated assembly.

    ``hop[h]`` holds the (i, j) basis index pairs linked by B-gate ``h``;
    ``occ[h]`` is the 0/1 occupation vector of S-gate ``h``'s site.
    """

    def __init__(self, basis: ConfigurationBasis):
        self.basis = basis
        layout = basis.layout
        self.layout = layout
        n = len(basis)
        self.dim = n
        site_owner_q = {}
        for q, sites in enumerate(basis.allowed):
            for s in sites:
                site_owner_q.setdefault(s, set()).add(q)
        self.hop: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for h, (a, b) in layout.b_gates.items():
            rows, cols = [], []
            for i, c in enumerate(basis.configs):
                for q, site in enumerate(c):
                    if site == a and b in basis.allowed[q]:
                        new = c[:q] + (b,) + c[q + 1:]
                        j = basis.index.get(new)
                        if j is not None:
                            rows.append(i)
                            cols.append(j)
            self.hop[h] = (np.array(rows, dtype=int), np.array(cols, dtype=int))
        self.occ: dict[str, np.ndarray] = {}
        for h, site in layout.s_gates.items():
            self.occ[h] = np.array([site in c for c in basis.configs], dtype=float)

    def diagonal(self, controls: ControlValues, coulomb_scale: float = 1.0) -> np.ndarray:
        diag = coulomb_scale * self.basis.coulomb.copy()
        for h, e in controls.shift.items():
            if e:
                diag += e * self.occ[h]
        return diag

    def matrix(self, controls: ControlValues, scale: float = 1.0) -> np.ndarray:
        h_mat = np.diag(self.diagonal(controls)).astype(complex)
        for h, d in controls.delta.items():
            if d:
                rows, cols = self.hop[h]
                h_mat[rows, cols] -= d
                h_mat[cols, rows] -= d
        if scale != 1.0:
            h_mat *= scale
        return h_mat


@dataclass(frozen=True, eq=False)
class HamiltonianModel:
    matrix: np.ndarray
    basis: ConfigurationBasis
    controls: ControlValues

    def to_csv(self, tol: float = 0.0) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["row", "col", "re", "im"])
        rows, cols = np.nonzero(np.abs(self.matrix) > tol)
        for r, c in zip(rows, cols):
            v = self.matrix[r, c]
            writer.writerow([r, c, f"{v.real:.17g}", f"{v.imag:.17g}"])
        return buf.getvalue()


def build_hamiltonian(
    layout: RegisterLayout,
    basis: ConfigurationBasis,
    controls: ControlValues,
    delta_max: float = DEFAULT_DELTA_MAX,
    builder: HamiltonianBuilder | None = None,
) -> HamiltonianModel:
    if basis.layout is not layout:
        raise ModelError("basis was enumerated for a different layout")
    controls.validate(layout, delta_max)
    builder = builder or HamiltonianBuilder(basis)
    return HamiltonianModel(builder.matrix(controls), basis, controls)


def differential_phase_rate(
    layout: RegisterLayout,
    participants: Sequence[int],
    aux_sites: Mapping[int, int] | None = None,
    reference_level: int = 1,
    background: Mapping[int, int] | None = None,
) -> float:
    """k-body conditional energy (meV) for moving ``participants`` onto auxiliaries.

    Inclusion-exclusion over subsets ``S`` of the participants:
    ``sum_S (-1)^(k-|S|) V(S on aux, rest on the reference level)``.
    Non-participants sit at the levels in ``background`` (default ``|1>``)
    and contribute nothing to the k-body term for k >= 2.
    """
    participants = list(participants)
    if len(participants) < 2:
        return 0.0
    aux_sites = dict(aux_sites or {})
    for q in participants:
        if q not in aux_sites:
            owned = layout.aux_of(q)
            if not owned:
                raise ModelError(f"qudit {q} has no auxiliary")
            aux_sites[q] = owned[0]
    if len(set(aux_sites[q] for q in participants)) != len(participants):
        raise ModelError("participants would share an auxiliary site")
    background = dict(background or {})
    pair = pair_coupling(layout)
    base = [layout.dot(q, background.get(q, 1)) for q in range(layout.n_qudits)]
    for q in participants:
        base[q] = layout.dot(q, reference_level)
    k = len(participants)
    total = 0.0
    for r in range(k + 1):
        for subset in itertools.combinations(participants, r):
            cfg = list(base)
            for q in subset:
                cfg[q] = aux_sites[q]
            total += (-1) ** (k - r) * _config_energy(tuple(cfg), pair)
    return total


def parked_phase_rate(
    layout: RegisterLayout,
    participants: Sequence[int],
    moved_level: int = 1,
    reference_level: int = 2,
) -> float:
    """Same inclusion-exclusion, with electrons left on qudit dots.

    This is the conditional energy the ``|1>`` dots generate without any
    auxiliary transfer, relative to ``reference_level``: the "off" state of
    the switch.
    """
    pair = pair_coupling(layout)
    base = [layout.dot(q, 1) for q in range(layout.n_qudits)]
    for q in participants:
        base[q] = layout.dot(q, reference_level)
    k = len(participants)
    total = 0.0
    for r in range(k + 1):
        for subset in itertools.combinations(participants, r):
            cfg = list(base)
            for q in subset:
                cfg[q] = layout.dot(q, moved_level)
            total += (-1) ** (k - r) * _config_energy(tuple(cfg), pair)
    return total
