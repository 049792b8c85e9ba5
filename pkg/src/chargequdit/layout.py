"""Register geometries and Hilbert-space dimension bookkeeping.

Three arrangements are supported:

``always_on``
    Qudit columns alternate above and below a centre line with no auxiliary
    dots; neighbouring ``|1>`` dots interact permanently.
``aux_per_qudit``
    Every qudit owns one auxiliary dot on the centre row, directly beneath
    (or above) its ``|1>`` dot.
``shared_aux``
    Auxiliary dots sit between groups of qudits; auxiliary ``g`` is owned by
    qudits ``2g .. 2g+3`` (fewer at the right edge).

Positions are in nm. Qudit and level indices are 0-based for qudits and
1-based for levels, so ``|1>`` is always the dot adjacent to the auxiliary row.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class Scheme(str, Enum):
    ALWAYS_ON = "always_on"
    AUX_PER_QUDIT = "aux_per_qudit"
    SHARED_AUX = "shared_aux"


# Ordered by auxiliary overhead, which is also the order used in summaries.
SCHEMES = (Scheme.ALWAYS_ON, Scheme.SHARED_AUX, Scheme.AUX_PER_QUDIT)

_SITES_PER_QUDIT = {
    Scheme.ALWAYS_ON: 0.0,
    Scheme.SHARED_AUX: 0.5,
    Scheme.AUX_PER_QUDIT: 1.0,
}


class LayoutError(ValueError):
    """Invalid register parameters."""


@dataclass(frozen=True)
class GeometryParams:
    """Spacings (nm), screening and permittivity knobs for a register."""

    intra_spacing: float = 20.0
    qudit_aux_spacing: float = 20.0
    aux_spacing: float = 20.0
    stagger: float = 30.0
    trench_screening: float = 1.0
    aux_screening: float = 1.0
    eps_substrate: float = 11.7
    eps_aux: float = 11.7

    def validate(self) -> None:
        for name in ("intra_spacing", "qudit_aux_spacing", "aux_spacing", "stagger"):
            if not getattr(self, name) > 0:
                raise LayoutError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("trench_screening", "aux_screening"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise LayoutError(f"{name} must lie in [0, 1]")
        for name in ("eps_substrate", "eps_aux"):
            if not getattr(self, name) > 0:
                raise LayoutError(f"{name} must be > 0")


@dataclass(frozen=True)
class DotSite:
    id: int
    position: tuple[float, float, float]
    kind: str  # "qudit" or "aux"
    level: int  # 1..D for qudit dots, 0 for auxiliaries
    owners: tuple[int, ...]

    @property
    def is_aux(self) -> bool:
        return self.kind == "aux"


@dataclass(frozen=True, eq=False)
class RegisterLayout:
    scheme: Scheme
    n_qudits: int
    levels: int
    sites: tuple[DotSite, ...]
    b_gates: dict[str, tuple[int, int]]
    s_gates: dict[str, int]
    screening: np.ndarray
    permittivity: dict[str, float]
    geometry: GeometryParams = field(default_factory=GeometryParams)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sites], dtype=float)

    def qudit_dots(self, q: int) -> list[int]:
        """Site ids of qudit ``q``'s dots, ordered by level."""
        dots = [s for s in self.sites if not s.is_aux and s.owners == (q,)]
        return [s.id for s in sorted(dots, key=lambda s: s.level)]

    def aux_of(self, q: int) -> list[int]:
        return [s.id for s in self.sites if s.is_aux and q in s.owners]

    def aux_sites(self) -> list[int]:
        return [s.id for s in self.sites if s.is_aux]

    def dot(self, q: int, level: int) -> int:
        return self.qudit_dots(q)[level - 1]

    def pair_permittivity(self) -> np.ndarray:
        aux = np.array([s.is_aux for s in self.sites])
        both = aux[:, None] & aux[None, :]
        return np.where(both, self.permittivity["auxiliary"], self.permittivity["substrate"])

    def b_gate_between(self, a: int, b: int) -> str | None:
        for handle, pair in self.b_gates.items():
            if set(pair) == {a, b}:
                return handle
        return None

    def s_gate_of(self, site: int) -> str:
        for handle, sid in self.s_gates.items():
            if sid == site:
                return handle
        raise KeyError(site)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "n_qudits": self.n_qudits,
            "levels": self.levels,
            "geometry": {k: getattr(self.geometry, k) for k in GeometryParams.__dataclass_fields__},
            "permittivity": dict(self.permittivity),
            "sites": [
                {
                    "id": s.id,
                    "position": list(s.position),
                    "kind": s.kind,
                    "level": s.level,
                    "owners": list(s.owners),
                }
                for s in self.sites
            ],
            "b_gates": {h: list(p) for h, p in self.b_gates.items()},
            "s_gates": dict(self.s_gates),
            "screening": self.screening.tolist(),
        }

    def site_table_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "kind", "level", "owners", "x_nm", "y_nm", "z_nm"])
        for s in self.sites:
            writer.writerow(
                [s.id, s.kind, s.level, " ".join(map(str, s.owners))]
                + [repr(float(c)) for c in s.position]
            )
        return buf.getvalue()


def layout_from_dict(data: dict) -> RegisterLayout:
    sites = tuple(
        DotSite(
            id=int(s["id"]),
            position=tuple(float(c) for c in s["position"]),
            kind=s["kind"],
            level=int(s["level"]),
            owners=tuple(int(o) for o in s["owners"]),
        )
        for s in data["sites"]
    )
    layout = RegisterLayout(
        scheme=Scheme(data["scheme"]),
        n_qudits=int(data["n_qudits"]),
        levels=int(data["levels"]),
        sites=sites,
        b_gates={h: (int(p[0]), int(p[1])) for h, p in data["b_gates"].items()},
        s_gates={h: int(v) for h, v in data["s_gates"].items()},
        screening=np.array(data["screening"], dtype=float),
        permittivity={k: float(v) for k, v in data["permittivity"].items()},
        geometry=GeometryParams(**data.get("geometry", {})),
    )
    check_layout(layout)
    return layout


def expected_site_count(scheme: Scheme, n: int, d: int) -> int:
    scheme = Scheme(scheme)
    if scheme is Scheme.ALWAYS_ON:
        return n * d
    if scheme is Scheme.AUX_PER_QUDIT:
        return n * (d + 1)
    return n * d + math.ceil(n / 2)


def shared_aux_owners(g: int, n: int) -> tuple[int, ...]:
    return tuple(q for q in range(2 * g, 2 * g + 4) if q < n)


def build_register(
    scheme: Scheme | str,
    n_qudits: int,
    levels: int,
    geometry: GeometryParams | None = None,
) -> RegisterLayout:
    """Lay out ``n_qudits`` qudits of ``levels`` dots each.

    Qudit ``q`` sits in a vertical column at ``x = q * aux_spacing`` and
    alternates above (even ``q``) and below (odd ``q``) the centre row.
    """
    scheme = Scheme(scheme)
    geometry = geometry or GeometryParams()
    if n_qudits < 1:
        raise LayoutError(f"need at least one qudit, got N={n_qudits}")
    if levels < 2:
        raise LayoutError(f"need D >= 2 levels, got D={levels}")
    if scheme is Scheme.SHARED_AUX and n_qudits < 2:
        raise LayoutError("shared_aux needs N >= 2: an auxiliary must be shared")
    geometry.validate()

    pitch = geometry.aux_spacing
    if scheme is Scheme.ALWAYS_ON:
        offset = geometry.stagger / 2.0
    else:
        offset = geometry.qudit_aux_spacing

    sites: list[DotSite] = []
    for q in range(n_qudits):
        sign = 1.0 if q % 2 == 0 else -1.0
        for d in range(1, levels + 1):
            y = sign * (offset + (d - 1) * geometry.intra_spacing)
            sites.append(DotSite(len(sites), (q * pitch, y, 0.0), "qudit", d, (q,)))

    if scheme is Scheme.AUX_PER_QUDIT:
        for q in range(n_qudits):
            sites.append(DotSite(len(sites), (q * pitch, 0.0, 0.0), "aux", 0, (q,)))
    elif scheme is Scheme.SHARED_AUX:
        for g in range(math.ceil(n_qudits / 2)):
            x = (2 * g + 1.5) * pitch
            sites.append(DotSite(len(sites), (x, 0.0, 0.0), "aux", 0, shared_aux_owners(g, n_qudits)))

    b_gates: dict[str, tuple[int, int]] = {}
    s_gates: dict[str, int] = {}
    aux_names = {}
    for i, s in enumerate(x for x in sites if x.is_aux):
        aux_names[s.id] = f"a{i}"
    for q in range(n_qudits):
        dots = [s.id for s in sites if not s.is_aux and s.owners == (q,)]
        for d in range(1, levels):
            b_gates[f"B.q{q}.{d}-{d + 1}"] = (dots[d - 1], dots[d])
        for s in sites:
            if s.is_aux and q in s.owners:
                b_gates[f"B.q{q}.1-{aux_names[s.id]}"] = (dots[0], s.id)
    for s in sites:
        if s.is_aux:
            s_gates[f"S.{aux_names[s.id]}"] = s.id
        else:
            s_gates[f"S.q{s.owners[0]}.{s.level}"] = s.id

    layout = RegisterLayout(
        scheme=scheme,
        n_qudits=n_qudits,
        levels=levels,
        sites=tuple(sites),
        b_gates=b_gates,
        s_gates=s_gates,
        screening=default_screening(sites, geometry),
        permittivity={"substrate": geometry.eps_substrate, "auxiliary": geometry.eps_aux},
        geometry=geometry,
    )
    check_layout(layout)
    return layout


def default_screening(sites, geometry: GeometryParams) -> np.ndarray:
    aux = np.array([s.is_aux for s in sites])
    both = aux[:, None] & aux[None, :]
    s = np.where(both, geometry.aux_screening, geometry.trench_screening).astype(float)
    np.fill_diagonal(s, 0.0)
    return s


def check_layout(layout: RegisterLayout) -> None:
    """Raise ``LayoutError`` if any structural invariant is violated."""
    n, d = layout.n_qudits, layout.levels
    if layout.n_sites != expected_site_count(layout.scheme, n, d):
        raise LayoutError("site count does not match scheme")
    pos = layout.positions()
    diff = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    np.fill_diagonal(diff, np.inf)
    if np.min(diff) <= 0.0:
        raise LayoutError("two sites share a position")
    for s in layout.sites:
        if s.is_aux:
            limit = 1 if layout.scheme is Scheme.AUX_PER_QUDIT else 4
            if not 1 <= len(s.owners) <= limit:
                raise LayoutError(f"auxiliary {s.id} has {len(s.owners)} owners")
        elif len(s.owners) != 1:
            raise LayoutError(f"qudit dot {s.id} must have exactly one owner")
    for q in range(n):
        dots = layout.qudit_dots(q)
        for a, b in zip(dots, dots[1:]):
            if layout.b_gate_between(a, b) is None:
                raise LayoutError(f"missing B-gate between sites {a} and {b}")
        for aux in layout.aux_of(q):
            if layout.b_gate_between(dots[0], aux) is None:
                raise LayoutError(f"missing B-gate from qudit {q} to auxiliary {aux}")
    scr = layout.screening
    if scr.shape != (layout.n_sites, layout.n_sites) or not np.allclose(scr, scr.T):
        raise LayoutError("screening matrix must be square and symmetric")
    off = scr[~np.eye(layout.n_sites, dtype=bool)]
    if off.size and (off.min() < 0.0 or off.max() > 1.0):
        raise LayoutError("screening factors must lie in [0, 1]")


def with_screening(layout: RegisterLayout, value: float, pairs=None) -> RegisterLayout:
    """Copy of ``layout`` with screening set to ``value`` on ``pairs`` (or all pairs)."""
    scr = layout.screening.copy()
    if pairs is None:
        scr[:] = value
    else:
        for a, b in pairs:
            scr[a, b] = scr[b, a] = value
    np.fill_diagonal(scr, 0.0)
    out = replace(layout, screening=scr)
    check_layout(out)
    return out


def with_permittivity(layout: RegisterLayout, eps: float) -> RegisterLayout:
    """Copy of ``layout`` with the same relative permittivity in every region."""
    if not eps > 0:
        raise LayoutError("permittivity must be positive")
    return replace(layout, permittivity={"substrate": float(eps), "auxiliary": float(eps)})


def translate_qudit(layout: RegisterLayout, q: int, shift) -> RegisterLayout:
    """Move qudit ``q``'s dots (and auxiliaries it owns alone) by ``shift`` nm."""
    shift = np.asarray(shift, dtype=float)
    sites = []
    for s in layout.sites:
        if s.owners == (q,):
            s = replace(s, position=tuple(float(c) for c in np.asarray(s.position) + shift))
        sites.append(s)
    out = replace(layout, sites=tuple(sites))
    check_layout(out)
    return out


def inter_qudit_pairs(layout: RegisterLayout, group_a, group_b) -> list[tuple[int, int]]:
    """All site pairs with one site belonging to group ``a`` and one to group ``b``.

    A shared auxiliary belongs to a group if any of its owners is in the group.
    """
    ga, gb = set(group_a), set(group_b)
    a_sites = [s.id for s in layout.sites if ga & set(s.owners)]
    b_sites = [s.id for s in layout.sites if gb & set(s.owners)]
    return [(a, b) for a in a_sites for b in b_sites if a != b]


# ---------------------------------------------------------------------------
# Hilbert-space dimension
# ---------------------------------------------------------------------------

def _log10_int(d: int) -> float:
    # Sum over prime factors so that e.g. log10(4) == 2 * log10(2) bit-for-bit.
    total = 0.0
    p = 2
    while p * p <= d:
        while d % p == 0:
            total += math.log10(p)
            d //= p
        p += 1
    if d > 1:
        total += math.log10(d)
    return total


def _check_kd(k: int, d: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if d < 2:
        raise ValueError(f"D must be >= 2, got {d}")


def hilbert_log_dim(k: int, d: int, scheme: Scheme | str) -> float:
    """log10 of ``D ** (K / c)`` with ``c`` sites per qudit for ``scheme``."""
    _check_kd(k, d)
    c = d + _SITES_PER_QUDIT[Scheme(scheme)]
    return (k / c) * _log10_int(d)


def max_whole_qudits(k: int, d: int, scheme: Scheme | str) -> int:
    scheme = Scheme(scheme)
    if scheme is Scheme.ALWAYS_ON:
        return k // d
    if scheme is Scheme.AUX_PER_QUDIT:
        return k // (d + 1)
    m = (2 * k) // (2 * d + 1) + 1
    while m > 0 and m * d + math.ceil(m / 2) > k:
        m -= 1
    return m


def hilbert_dim_integer(k: int, d: int, scheme: Scheme | str) -> int:
    """Exact dimension of the largest register of whole qudits fitting in ``K`` sites."""
    _check_kd(k, d)
    return d ** max_whole_qudits(k, d, scheme)


def optimal_qudit_size(k: int, scheme: Scheme | str, d_range) -> int:
    """Maximising ``D`` of :func:`hilbert_log_dim`; exact ties go to the smaller ``D``."""
    ds = sorted(int(d) for d in d_range)
    if not ds or ds[0] < 2:
        raise ValueError("D range must be non-empty with every D >= 2")
    best_d, best = ds[0], hilbert_log_dim(k, ds[0], scheme)
    for d in ds[1:]:
        value = hilbert_log_dim(k, d, scheme)
        if value > best:
            best_d, best = d, value
    return best_d


@dataclass(frozen=True)
class DimensionReport:
    k: int
    scheme: Scheme
    table: dict[int, float]
    argmax: int
    ties: tuple[int, ...] = ()


def dimension_scan(k: int, d_range, schemes=SCHEMES) -> list[DimensionReport]:
    ds = sorted(int(d) for d in d_range)
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    reports = []
    for scheme in schemes:
        table = {d: hilbert_log_dim(k, d, scheme) for d in ds}
        best = optimal_qudit_size(k, scheme, ds)
        ties = tuple(d for d in ds if d != best and table[d] == table[best])
        reports.append(DimensionReport(k, Scheme(scheme), table, best, ties))
    return reports


def dimension_csv(reports: list[DimensionReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scheme", "D", "K", "log10_dim"])
    for r in reports:
        for d, value in r.table.items():
            writer.writerow([r.scheme.value, d, r.k, f"{value:.17g}"])
    return buf.getvalue()


def argmax_summary(reports: list[DimensionReport]) -> str:
    return " ".join(f"{r.scheme.value}:{r.argmax}" for r in reports)
