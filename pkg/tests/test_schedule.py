import math

import pytest
from hypothesis import assume, given, strategies as st

from homlab.schedule import (DegenerateSchedule, InvalidParams, OutOfRange, ScaleParams, build_schedule,
                             compute_m0, compute_mbar, locate_scale)


def test_desk_schedule_rows():
    t = build_schedule(ScaleParams(), 3)
    assert [r.L for r in t.rows] == [25, 125, 1250, 43750]
    assert [r.ell for r in t.rows[:3]] == [5, 10, 35]
    # a = 0.5 is outside the admissible formula, so the fallback offset applies
    assert t.mbar == 1
    assert t.delta == pytest.approx(5 * 0.5 / 32)
    r0 = t[0]
    ll = math.log(math.log(25))
    assert r0.kappa == pytest.approx(math.exp(ll * ll))
    assert r0.D_tilde == pytest.approx(25 * math.exp(2 * ll * ll))


def test_compute_mbar_small_a():
    a = 0.01
    t = 1 - math.log(1 - 12 * a - a * a) / math.log(1 + a)
    assert compute_mbar(a) == math.floor(t) + 1
    with pytest.raises(InvalidParams):
        compute_mbar(0.5)


@given(a=st.floats(0.001, 0.9))
def test_m0_brackets_100(a):
    m0 = compute_m0(a)
    assert (1 + a) ** (m0 - 2) <= 100 + 1e-9 or m0 == 2
    assert 100 < (1 + a) ** (m0 - 1)


@given(a=st.floats(0.05, 0.95), k=st.integers(1, 400), c0=st.floats(0.05, 2.0))
def test_schedule_identities(a, k, c0):
    L0 = 5 * k
    assume(L0**a >= 5.0 * (1 + 1e-9))
    try:
        t = build_schedule(ScaleParams(a=a, L0=L0, c0=c0), 3)
    except DegenerateSchedule:
        return
    for i, r in enumerate(t.rows):
        assert r.ell % 5 == 0 and r.ell >= 5
        ll = math.log(math.log(r.L))
        assert math.isclose(r.kappa, math.exp(c0 * ll * ll), rel_tol=1e-12)
        assert math.isclose(r.kappa_tilde, r.kappa**2, rel_tol=1e-12)
        assert math.isclose(r.D, r.L * r.kappa, rel_tol=1e-12)
        assert math.isclose(r.D_tilde, r.L * r.kappa_tilde, rel_tol=1e-12)
        if i + 1 < len(t):
            nxt = t[i + 1].L
            assert nxt == r.ell * r.L
            assert 0.5 * r.L ** (1 + a) <= nxt <= 2 * r.L ** (1 + a)


@pytest.mark.parametrize("a,L0", [(0.1, 25), (0.3, 5), (0.45, 10)])
def test_degenerate_parameters_raise(a, L0):
    with pytest.raises(DegenerateSchedule):
        build_schedule(ScaleParams(a=a, L0=L0), 2)


def test_float_power_rounding_counts_exact_multiples():
    # 25 ** 0.5 is exactly 5 mathematically, the floor must not drop it to 0
    assert build_schedule(ScaleParams(a=0.5, L0=25), 0)[0].ell == 5


@pytest.mark.parametrize("kw", [dict(d=2), dict(beta=0.6), dict(a=0.0), dict(a=1.0), dict(L0=12), dict(c0=0.0),
                                dict(mbar=0)])
def test_invalid_parameters(kw):
    with pytest.raises(InvalidParams):
        build_schedule(ScaleParams(**kw), 1)


def test_strict_mode_bounds_a():
    with pytest.raises(InvalidParams):
        ScaleParams(a=0.01, strict_paper_mode=True).validate()


def test_locate_scale():
    t = build_schedule(ScaleParams(), 3)
    assert locate_scale(t, 1 / 25) == 0
    assert locate_scale(t, 1 / 124) == 0
    assert locate_scale(t, 1 / 125) == 1
    assert locate_scale(t, 1 / 1249.5) == 1
    with pytest.raises(OutOfRange):
        locate_scale(t, 1 / 24)
    with pytest.raises(OutOfRange):
        locate_scale(t, 1 / 43750)


def test_coarse_row():
    t = build_schedule(ScaleParams(), 3)
    assert t.coarse(2) is t[1]
    with pytest.raises(OutOfRange):
        t.coarse(0)


def test_csv(tmp_path):
    t = build_schedule(ScaleParams(), 2)
    t.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("n,L_n") and len(lines) == 4
