import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from homlab.environ import EnvSpec, sample_environment
from homlab.renorm import (CutoffFn, FieldSample, alpha_from_displacements, apply_Rbarn, apply_Rn, chi,
                           control_holder_check, estimate_alpha, event_An_diagnostic, holder_norm, holder_seminorm,
                           localization_check, make_cloud)
from homlab.schedule import ScaleParams, build_schedule
from homlab.walk import Wiener


def test_holder_norm_two_points():
    s = FieldSample(np.array([[0.0, 0, 0], [4.0, 0, 0]]), np.array([1.0, 3.0]), L=4.0, beta=0.5)
    # sup |f| = 3, L^beta |3 - 1| / 4^beta = 2
    assert holder_seminorm(s) == pytest.approx(2.0)
    assert holder_norm(s) == pytest.approx(5.0)


@given(vals=arrays(float, 6, elements=st.floats(-10, 10)), extra=st.integers(0, 14))
def test_holder_monotone_in_pairs(vals, extra):
    pts = np.random.default_rng(0).normal(size=(6, 3))
    i, j = np.triu_indices(6, 1)
    allp = np.stack([i, j], axis=1)
    sub = FieldSample(pts, vals, 2.0, 0.5, allp[: extra + 1])
    full = FieldSample(pts, vals, 2.0, 0.5, allp)
    assert holder_seminorm(sub) <= holder_seminorm(full) + 1e-12
    assert holder_norm(full) == pytest.approx(holder_norm(FieldSample(pts, vals, 2.0, 0.5)))


@given(c=st.floats(-5, 5), vals=arrays(float, 5, elements=st.floats(-10, 10)))
def test_holder_seminorm_ignores_constants(c, vals):
    pts = np.arange(15, dtype=float).reshape(5, 3)
    s = FieldSample(pts, vals, 3.0)
    assert holder_seminorm(s.with_values(vals + c)) == pytest.approx(holder_seminorm(s), abs=1e-9)


@given(y=arrays(float, (20, 3), elements=st.floats(-5, 5)), v=st.floats(0.1, 3))
def test_cutoff_sandwich(y, v):
    c = CutoffFn((0.0, 0.0, 0.0), v)(y)
    r = np.linalg.norm(y, axis=1)
    assert np.all((0 <= c) & (c <= 1))
    assert np.all(c[r <= v] == 1.0)
    assert np.all(c[r >= 2 * v] == 0.0)
    # 1_{B_v} <= chi <= 1_{B_2v}
    assert np.all((r <= v) <= c)
    assert np.all(c <= (r < 2 * v))


def test_chi_values():
    np.testing.assert_allclose(chi(np.array([[0.5, 0, 0], [1.5, 0, 0], [3.0, 0, 0]])), [1.0, 0.5, 0.0])


def test_cloud_structure():
    pts, pairs = make_cloud(np.zeros(3), 8.0, n_grid=3, n_pairs=4, n_levels=3, seed=1)
    assert pts.shape == (27 + 24, 3)
    assert pairs.max() < len(pts)
    seps = np.linalg.norm(pts[pairs[-12:, 0]] - pts[pairs[-12:, 1]], axis=1)
    np.testing.assert_allclose(sorted(set(np.round(seps, 9))), [2.0, 4.0, 8.0])


def test_alpha_from_displacements():
    d = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    est = alpha_from_displacements(d, 1.0, nu=1.0)
    assert est.value == pytest.approx((1 + 4) / 2 / 3)
    assert est.admissible


def test_alpha_for_wiener_process():
    est = estimate_alpha(Wiener(1.5), 25.0, paths=4000, seed=2)
    assert abs(est.value - 1.5) < 4 * est.stderr


def test_alpha_trivial_environment(env0):
    t = build_schedule(ScaleParams(), 1)
    est = estimate_alpha(env0, t[0], paths=4000, seed=3)
    assert abs(est.value - 1.0) < 4 * est.stderr
    assert est.n == 0 and est.admissible


def test_alpha_brownian_control(env0, env05):
    # at eta = 0 the quenched and control paths coincide
    est = estimate_alpha(env0, 10.0, paths=500, dt=1.0, seed=4, control=True)
    assert est.value == 1.0 and est.stderr == 0.0
    plain = estimate_alpha(env05, 10.0, paths=2000, dt=1.0, seed=4)
    ctl = estimate_alpha(env05, 10.0, paths=2000, dt=1.0, seed=4, control=True)
    assert ctl.stderr < plain.stderr / 3
    assert abs(ctl.value - plain.value) < 4 * plain.stderr
    with pytest.raises(ValueError):
        estimate_alpha(env05, build_schedule(ScaleParams(), 1)[0], paths=10, control=True)


def test_operators_agree_at_eta_zero(env0):
    f = lambda x: np.cos(0.05 * x[:, 0]) + 0.01 * x[:, 1]
    x = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    a = apply_Rn(env0, f, 20.0, x, paths=64, seed=5)
    b = apply_Rbarn(1.0, f, 20.0, x, method="crn", paths=64, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    q = apply_Rbarn(1.0, f, 20.0, x)
    np.testing.assert_allclose(q.values, np.exp(-0.5 * (0.05 * 20) ** 2) * np.cos(0.05 * x[:, 0]), atol=1e-10)


@given(c1=st.floats(-3, 3), c2=st.floats(-3, 3))
def test_Rn_linear_with_common_randomness(env05, c1, c2):
    f = lambda x: np.sin(0.1 * x[:, 0])
    g = lambda x: x[:, 1] ** 2
    x = np.zeros((1, 3))
    kw = dict(paths=16, seed=11)
    lin = apply_Rn(env05, lambda y: c1 * f(y) + c2 * g(y), 3.0, x, **kw).values
    sep = c1 * apply_Rn(env05, f, 3.0, x, **kw).values + c2 * apply_Rn(env05, g, 3.0, x, **kw).values
    np.testing.assert_allclose(lin, sep, rtol=1e-9, atol=1e-9)


def test_control_check_passes_at_eta_zero(env0):
    f = lambda x: np.cos(2 * math.pi * x[:, 0] / 250.0)
    chk = control_holder_check(env0, 25.0, np.zeros(3), f, paths=16, seed=1)
    assert chk.lhs == 0.0 and chk.passed


def test_localization_and_event_report(env0, tmp_path):
    t = build_schedule(ScaleParams(), 2)
    p, bound, ok = localization_check(env0, t[0], np.zeros(3), paths=500)
    assert ok and p <= bound
    rep = event_An_diagnostic(env0, t, 1, [np.zeros(3)], paths=200)
    assert len(rep) == 3 and rep.frequency("localization") == 1.0
    rep.to_csv(tmp_path / "e.csv")
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 4


def test_perturbed_environment_alpha_is_admissible():
    env = sample_environment(EnvSpec(eta=0.2, seed=1))
    est = estimate_alpha(env, 10.0, paths=1000, seed=1)
    assert est.admissible
