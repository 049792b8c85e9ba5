import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chargequdit.layout import (
    SCHEMES,
    GeometryParams,
    LayoutError,
    Scheme,
    argmax_summary,
    build_register,
    check_layout,
    dimension_csv,
    dimension_scan,
    expected_site_count,
    hilbert_dim_integer,
    hilbert_log_dim,
    layout_from_dict,
    optimal_qudit_size,
    translate_qudit,
    with_screening,
)

OVERHEAD = {Scheme.ALWAYS_ON: 0.0, Scheme.AUX_PER_QUDIT: 1.0, Scheme.SHARED_AUX: 0.5}


def closed_form(k, d, scheme):
    return k / (d + OVERHEAD[Scheme(scheme)]) * math.log10(d)


def test_always_on_two_qutrits_counts():
    lay = build_register("always_on", 2, 3)
    assert lay.n_sites == 6
    assert len(lay.b_gates) == 4
    assert len(lay.s_gates) == 6
    assert lay.aux_sites() == []


def test_aux_per_qudit_links_level_one_to_own_aux():
    lay = build_register("aux_per_qudit", 2, 3)
    assert lay.n_sites == 8
    for q in range(2):
        (aux,) = lay.aux_of(q)
        assert lay.b_gate_between(lay.dot(q, 1), aux) is not None
        assert lay.sites[aux].owners == (q,)


def test_shared_aux_four_qutrits():
    lay = build_register("shared_aux", 4, 3)
    assert lay.n_sites == 14
    aux = lay.aux_sites()
    assert len(aux) == 2
    assert set(lay.sites[aux[0]].owners) == {0, 1, 2, 3}
    assert all(len(lay.sites[a].owners) <= 4 for a in aux)


def test_shared_aux_rejects_single_qudit():
    with pytest.raises(LayoutError):
        build_register("shared_aux", 1, 3)


@pytest.mark.parametrize("n,d", [(0, 3), (2, 1)])
def test_rejects_bad_sizes(n, d):
    with pytest.raises(LayoutError):
        build_register("aux_per_qudit", n, d)


def test_rejects_non_positive_spacing():
    with pytest.raises(LayoutError):
        build_register("always_on", 2, 3, GeometryParams(intra_spacing=0.0))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(SCHEMES), st.integers(1, 20), st.integers(2, 6))
def test_site_counts_match_closed_form(scheme, n, d):
    if scheme is Scheme.SHARED_AUX and n < 2:
        return
    lay = build_register(scheme, n, d)
    oracle = {Scheme.ALWAYS_ON: n * d, Scheme.AUX_PER_QUDIT: n * (d + 1), Scheme.SHARED_AUX: n * d + -(-n // 2)}
    assert lay.n_sites == oracle[scheme] == expected_site_count(scheme, n, d)
    pos = lay.positions()
    assert len({tuple(p) for p in pos}) == len(pos)
    check_layout(lay)


def test_layout_json_round_trip():
    lay = build_register("shared_aux", 5, 3)
    again = layout_from_dict(json.loads(json.dumps(lay.to_dict())))
    assert again.to_dict() == lay.to_dict()


def test_screening_override_is_symmetric_and_validated():
    lay = build_register("aux_per_qudit", 2, 2)
    lay2 = with_screening(lay, 0.25, [(0, 3)])
    assert lay2.screening[0, 3] == lay2.screening[3, 0] == 0.25
    with pytest.raises(LayoutError):
        with_screening(lay, 1.5)


def test_translate_moves_only_owned_sites():
    lay = build_register("aux_per_qudit", 3, 3)
    moved = translate_qudit(lay, 2, (10.0, 0.0, 0.0))
    diff = moved.positions() - lay.positions()
    owned = [s.id for s in lay.sites if s.owners == (2,)]
    assert np.allclose(diff[owned], [10.0, 0.0, 0.0])
    assert np.allclose(np.delete(diff, owned, axis=0), 0.0)


# --- dimension ---------------------------------------------------------------

def test_log_dim_examples():
    assert hilbert_log_dim(100, 3, "always_on") == pytest.approx(100 / 3 * math.log10(3), rel=1e-14)
    assert hilbert_log_dim(100, 3, "always_on") == pytest.approx(15.904, abs=5e-4)
    assert hilbert_log_dim(100, 3, "aux_per_qudit") == pytest.approx(11.928, abs=5e-4)


def test_two_and_four_tie_exactly():
    for k in (1, 7, 100, 12345):
        assert hilbert_log_dim(k, 2, "always_on") == hilbert_log_dim(k, 4, "always_on")


def test_integer_dimension_examples():
    assert hilbert_dim_integer(100, 3, "aux_per_qudit") == 847288609443 == 3**25
    assert hilbert_dim_integer(3, 3, "always_on") == 3
    assert hilbert_dim_integer(100, 3, "shared_aux") == 3**28


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(2, 12), st.sampled_from(SCHEMES))
def test_integer_never_exceeds_continuous(k, d, scheme):
    m_int = hilbert_dim_integer(k, d, scheme)
    assert math.log10(m_int) <= hilbert_log_dim(k, d, scheme) + 1e-12
    if scheme is Scheme.SHARED_AUX:
        m = max(m for m in range(k + 1) if m * d + -(-m // 2) <= k)
        assert m_int == d**m


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1000), st.integers(2, 12))
def test_overhead_ordering(k, d):
    a, s, p = (hilbert_log_dim(k, d, x) for x in ("always_on", "shared_aux", "aux_per_qudit"))
    assert a >= s >= p


@pytest.mark.parametrize("k", [2, 12, 50, 100, 1000])
def test_optimum_stable_in_k(k):
    assert optimal_qudit_size(k, "always_on", range(2, 13)) == 3
    assert optimal_qudit_size(k, "shared_aux", range(2, 13)) == 3
    assert optimal_qudit_size(k, "aux_per_qudit", range(2, 13)) == 4


def test_tie_goes_to_smaller_d():
    assert optimal_qudit_size(100, "always_on", [2, 4]) == 2


def test_scan_rows_and_summary():
    reports = dimension_scan(100, range(2, 11))
    text = dimension_csv(reports)
    lines = text.strip().splitlines()
    assert lines[0] == "scheme,D,K,log10_dim"
    assert len(lines) == 28
    for row in lines[1:]:
        scheme, d, k, value = row.split(",")
        assert float(value) == pytest.approx(closed_form(int(k), int(d), scheme), rel=1e-12)
    assert argmax_summary(reports) == "always_on:3 shared_aux:3 aux_per_qudit:4"


def test_scan_rejects_zero_sites():
    with pytest.raises(ValueError):
        dimension_scan(0, range(2, 5))
