import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chargequdit.constants import COULOMB_K, HBAR
from chargequdit.evolve import (
    ControlSchedule,
    EvolveError,
    Segment,
    complex_csv,
    evolve_state,
    gate_fidelity,
    leakage_profile,
    projector,
    propagate,
    wrap_phase,
)
from chargequdit.layout import build_register
from chargequdit.model import ControlValues, HamiltonianBuilder, enumerate_basis


def random_schedule(layout, rng, n_seg, delta_max=1.0, t_max=5.0):
    segs = []
    for _ in range(n_seg):
        segs.append(Segment(
            float(rng.uniform(0.01, t_max)),
            ControlValues(
                delta={h: float(rng.uniform(0, delta_max)) for h in layout.b_gates if rng.random() < 0.7},
                shift={h: float(rng.uniform(-5, 5)) for h in layout.s_gates if rng.random() < 0.5},
            ),
        ))
    return ControlSchedule(segs)


def qutrit(delta=0.1):
    lay = build_register("always_on", 1, 3)
    return lay, enumerate_basis(lay)


def rabi_schedule(t, delta=0.1):
    return ControlSchedule([Segment(t, ControlValues(delta={"B.q0.1-2": delta}))])


def max_dev_from_identity(u):
    return np.max(np.abs(u.conj().T @ u - np.eye(len(u))))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["always_on", "aux_per_qudit", "shared_aux"]), st.integers(1, 8), st.integers(0, 2**31))
def test_unitary_and_composition(scheme, n_seg, seed):
    lay = build_register(scheme, 2, 3)
    basis = enumerate_basis(lay)
    rng = np.random.default_rng(seed)
    s1, s2 = random_schedule(lay, rng, n_seg), random_schedule(lay, rng, 2)
    u1, u2 = propagate(basis, s1), propagate(basis, s2)
    assert max_dev_from_identity(u1) < 1e-9
    assert np.max(np.abs(propagate(basis, s1 + s2) - u2 @ u1)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31))
def test_time_reversal(n_seg, seed):
    lay = build_register("aux_per_qudit", 2, 3)
    basis = enumerate_basis(lay)
    sched = random_schedule(lay, np.random.default_rng(seed), n_seg)
    forward = propagate(basis, sched)
    backward = propagate(basis, ControlSchedule(sched.segments[::-1]), hamiltonian_scale=-1.0)
    assert np.max(np.abs(backward @ forward - np.eye(len(basis)))) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 2**31))
def test_uniform_shift_is_global_phase(c, seed):
    lay = build_register("shared_aux", 2, 3)
    basis = enumerate_basis(lay)
    sched = random_schedule(lay, np.random.default_rng(seed), 3)
    shifted = ControlSchedule([
        Segment(s.duration, ControlValues(
            delta=dict(s.controls.delta),
            shift={h: s.controls.shift.get(h, 0.0) + c for h in lay.s_gates},
        ))
        for s in sched.segments
    ])
    base = ControlSchedule([
        Segment(s.duration, ControlValues(
            delta=dict(s.controls.delta),
            shift={h: s.controls.shift.get(h, 0.0) for h in lay.s_gates},
        ))
        for s in sched.segments
    ])
    n = lay.n_qudits
    expected = np.exp(-1j * n * c * sched.duration / HBAR) * propagate(basis, base)
    assert np.max(np.abs(propagate(basis, shifted) - expected)) < 1e-9


def test_diagonal_phases_match_energy_sum():
    lay = build_register("aux_per_qudit", 2, 3)
    basis = enumerate_basis(lay)
    rng = np.random.default_rng(11)
    sched = ControlSchedule([
        Segment(float(rng.uniform(0.1, 3)), ControlValues(shift={h: float(rng.uniform(-3, 3)) for h in lay.s_gates}))
        for _ in range(4)
    ])
    u = propagate(basis, sched)
    assert np.max(np.abs(u - np.diag(np.diag(u)))) == 0.0
    pos = lay.positions()
    for i, cfg in enumerate(basis.configs):
        v = sum(
            lay.screening[a, b] * COULOMB_K / (lay.permittivity["auxiliary" if lay.sites[a].is_aux and lay.sites[b].is_aux else "substrate"] * np.linalg.norm(pos[a] - pos[b]))
            for a, b in itertools.combinations(cfg, 2)
        )
        phase = 0.0
        for seg in sched.segments:
            onsite = sum(seg.controls.shift[lay.s_gate_of(s)] for s in cfg)
            phase -= (onsite + v) * seg.duration / HBAR
        assert abs(wrap_phase(np.angle(u[i, i]) - phase)) < 1e-9


def test_scalar_phase_example():
    phase = -4.102 * 1.0 / HBAR
    assert float(wrap_phase(phase)) == pytest.approx(float(wrap_phase(-6.232)), abs=5e-4)
    lay = build_register("always_on", 1, 2)
    basis = enumerate_basis(lay)
    u = propagate(basis, ControlSchedule([Segment(1.0, ControlValues(shift={"S.q0.1": 4.102}))]))
    assert np.angle(u[0, 0]) == pytest.approx(float(wrap_phase(phase)), abs=1e-12)


def test_zero_duration_is_identity():
    lay, basis = qutrit()
    u = propagate(basis, rabi_schedule(1e-14))
    assert np.max(np.abs(u - np.eye(3))) < 1e-10


def test_rabi_full_transfer():
    lay, basis = qutrit()
    t = np.pi * HBAR / (2 * 0.1)
    assert t == pytest.approx(10.34, abs=5e-3)
    u = propagate(basis, rabi_schedule(t))
    assert abs(u[1, 0]) ** 2 > 1 - 1e-6
    psi = evolve_state(np.array([1, 0, 0], dtype=complex), u)
    assert abs(abs(psi[1]) - 1) < 1e-9


def test_rabi_midpoint_leakage_half():
    lay = build_register("aux_per_qudit", 1, 3)
    basis = enumerate_basis(lay)
    aux = lay.aux_of(0)[0]
    handle = lay.b_gate_between(lay.dot(0, 1), aux)
    t = np.pi * HBAR / (4 * 0.1)
    u = propagate(basis, ControlSchedule([Segment(t, ControlValues(delta={handle: 0.1}))]))
    comp = basis.computational_indices()
    psi = u[:, basis.index[(lay.dot(0, 1),)]]
    assert leakage_profile(psi, projector(comp, len(basis))) == pytest.approx(0.5, abs=1e-6)


def test_leakage_profile_limits():
    lay = build_register("aux_per_qudit", 1, 3)
    basis = enumerate_basis(lay)
    p = projector(basis.computational_indices(), len(basis))
    e = np.eye(len(basis))
    assert leakage_profile(e[basis.index[(lay.dot(0, 2),)]], p) == 0.0
    assert leakage_profile(e[basis.index[(lay.aux_of(0)[0],)]], p) == 1.0
    with pytest.raises(EvolveError):
        leakage_profile(np.ones(2), p)


def test_fidelity_exact_and_phase_stripped():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(9, 9)) + 1j * rng.normal(size=(9, 9)))
    u = np.eye(12, dtype=complex)
    u[:9, :9] = q * np.exp(0.7j)
    rep = gate_fidelity(u, q, projector(range(9), 12))
    assert rep.process_fidelity == pytest.approx(1.0, abs=1e-12)
    assert rep.average_fidelity == pytest.approx(1.0, abs=1e-12)
    assert rep.leakage == pytest.approx(0.0, abs=1e-12)
    assert rep.global_phase == pytest.approx(0.7, abs=1e-12)


def test_one_column_leaked_gives_one_ninth():
    u = np.eye(10, dtype=complex)
    u[:, [0, 9]] = u[:, [9, 0]]
    rep = gate_fidelity(u, np.eye(9), projector(range(9), 10))
    assert rep.leakage == pytest.approx(1 / 9, abs=1e-12)
    # trace arithmetic: Tr = 8, kept = 8/9
    assert rep.process_fidelity == pytest.approx(64 / 81, abs=1e-12)
    assert rep.average_fidelity == pytest.approx((9 * 64 / 81 + 8 / 9) / 10, abs=1e-12)


def test_fidelity_rejects_bad_inputs():
    p = np.array([[1.0, 0.0], [0.0, 0.5]])
    with pytest.raises(EvolveError):
        gate_fidelity(np.eye(2), np.eye(1), p)
    with pytest.raises(EvolveError):
        gate_fidelity(np.eye(2), np.eye(2), projector([0], 2))


def test_non_diagonal_projector_supported():
    v = np.array([1, 1]) / np.sqrt(2)
    p = np.outer(v, v)
    rep = gate_fidelity(np.eye(2), np.eye(1), p)
    assert rep.average_fidelity == pytest.approx(1.0)


def test_non_finite_controls_rejected():
    lay, basis = qutrit()
    with pytest.raises(EvolveError):
        propagate(basis, ControlSchedule([Segment(1.0, ControlValues(shift={"S.q0.1": np.inf}))]))
    with pytest.raises(EvolveError):
        propagate(basis, ControlSchedule([Segment(np.nan)]))


def test_schedule_json_round_trip():
    lay = build_register("aux_per_qudit", 2, 3)
    sched = random_schedule(lay, np.random.default_rng(5), 3)
    again = ControlSchedule.from_dict(sched.to_dict())
    assert again.to_dict() == sched.to_dict()
    assert again.duration == pytest.approx(sched.duration)
    with pytest.raises(EvolveError):
        ControlSchedule.from_dict({"segments": [{"duration_ps": 1, "bogus": 1}]})


def test_state_dimension_mismatch():
    with pytest.raises(EvolveError):
        evolve_state(np.ones(3), np.eye(4))


def test_complex_csv_round_trip():
    vals = np.array([1 + 2j, -0.5j, 1 / 3])
    lines = complex_csv(vals, ["a", "b", "c"]).strip().splitlines()
    assert lines[0] == "index,config,re,im"
    back = np.array([complex(float(r), float(i)) for _, _, r, i in (l.split(",") for l in lines[1:])])
    assert np.array_equal(back, vals)


def test_builder_scale_negates_everything():
    lay = build_register("shared_aux", 3, 2)
    b = HamiltonianBuilder(enumerate_basis(lay))
    ctrl = ControlValues(delta={h: 0.3 for h in lay.b_gates}, shift={h: 1.0 for h in lay.s_gates})
    assert np.array_equal(b.matrix(ctrl, scale=-1.0), -b.matrix(ctrl))
