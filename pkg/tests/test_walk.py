import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from homlab import rng
from homlab.domain import Ball
from homlab.walk import (ExcursionRule, ExitRule, HorizonExceeded, NotRecorded, Quenched, SimConfig, SkeletonEnter,
                         SkeletonExit, SkeletonLeave, Wiener, discrete_stop_times, simulate, simulate_quenched,
                         simulate_wiener)


def test_same_key_same_paths(env05):
    cfg = SimConfig(dt=0.1, max_time=5.0, seed=3)
    a = simulate_quenched(env05, np.zeros(3), cfg, n_paths=20)
    b = simulate_quenched(env05, np.zeros(3), cfg, n_paths=20)
    np.testing.assert_array_equal(a.final, b.final)


@given(lo=st.integers(0, 30), n=st.integers(1, 10))
def test_paths_depend_only_on_their_ids(lo, n):
    cfg = SimConfig(dt=0.01, max_time=0.5)
    full = simulate(Wiener(1.0), np.zeros(3), cfg, [ExitRule(Ball(0.5), bridge=True)], path_ids=np.arange(41))
    part = simulate(Wiener(1.0), np.zeros(3), cfg, [ExitRule(Ball(0.5), bridge=True)],
                    path_ids=np.arange(lo, lo + n))
    np.testing.assert_array_equal(part.final, full.final[lo:lo + n])
    np.testing.assert_array_equal(part.hit_time["exit"], full.hit_time["exit"][lo:lo + n])


def test_trivial_quenched_equals_wiener(env0):
    cfg = SimConfig(dt=0.05, max_time=2.0)
    key = rng.derive_key(9, rng.TAG_PATH)
    a = simulate(Quenched(env0), np.zeros(3), cfg, n_paths=30, key=key)
    b = simulate(Wiener(1.0), np.zeros(3), cfg, n_paths=30, key=key)
    np.testing.assert_array_equal(a.final, b.final)


def test_wiener_variance():
    cfg = SimConfig(dt=0.25, max_time=4.0)
    b = simulate_wiener(2.0, np.zeros(3), cfg, n_paths=20_000)
    v = b.final.var(axis=0)
    np.testing.assert_allclose(v, 8.0, rtol=0.05)


def test_exit_time_of_ball_with_bridge():
    # E tau = (R^2 - |x|^2) / (alpha d) for the variance-alpha motion
    cfg = SimConfig(dt=1e-3, max_time=5.0)
    b = simulate_wiener(1.0, np.zeros(3), cfg, [ExitRule(Ball(1.0), bridge=True)], n_paths=8000)
    tau = b.hit_time["exit"]
    se = tau.std() / math.sqrt(len(tau))
    assert abs(tau.mean() - 1 / 3) < 4 * se + 2e-3


def test_bridge_reduces_overshoot_bias():
    cfg = SimConfig(dt=1e-2, max_time=5.0)
    key = rng.derive_key(2, rng.TAG_PATH)
    plain = simulate_wiener(1.0, np.zeros(3), cfg, [ExitRule(Ball(1.0))], n_paths=4000, key=key)
    brid = simulate_wiener(1.0, np.zeros(3), cfg, [ExitRule(Ball(1.0), bridge=True)], n_paths=4000, key=key)
    # bridge exits can only come earlier on the same increments
    assert np.all(brid.hit_time["exit"] <= plain.hit_time["exit"])
    assert abs(brid.hit_time["exit"].mean() - 1 / 3) < abs(plain.hit_time["exit"].mean() - 1 / 3)


def test_integrals_and_sums():
    cfg = SimConfig(dt=0.01, max_time=3.0)
    one = lambda x: np.ones(len(x))
    b = simulate_wiener(1.0, np.zeros(3), cfg, [ExitRule(Ball(1.0))], n_paths=200,
                        integrals={"t": (one, "exit")}, sums={"s": (one, "exit", 0.1)})
    tau = b.hit_time["exit"]
    np.testing.assert_allclose(b.integrals["t"], tau, atol=1e-9)
    # left Riemann sum on the 0.1 grid: 0.1 * #{k : k 0.1 < tau}
    np.testing.assert_allclose(b.integrals["s"], 0.1 * np.ceil(tau / 0.1 - 1e-9), atol=1e-9)


def test_excursion_rule_and_xstar():
    cfg = SimConfig(dt=0.01, max_time=10.0)
    b = simulate_wiener(1.0, np.zeros(3), cfg, [ExcursionRule(1.0)], n_paths=100)
    assert np.all(b.fired("excursion"))
    assert np.all(b.xstar >= 1.0)
    assert np.all(np.linalg.norm(b.final, axis=1) >= 1.0)


def test_horizon_flags():
    cfg = SimConfig(dt=0.1, max_time=0.2)
    b = simulate_wiener(1.0, np.zeros(3), cfg, [ExitRule(Ball(10.0))], n_paths=5)
    assert b.horizon.all() and b.horizon_fraction() == 1.0
    with pytest.raises(HorizonExceeded):
        b.raise_on_horizon()


def test_skeleton_ordering():
    dom = Ball(20.0)
    G, rad = 1.0, 3.0
    cfg = SimConfig(dt=0.05, max_time=4000.0)
    rules = [ExitRule(dom, terminal=False), SkeletonEnter(dom, G, rad), SkeletonExit(dom, G),
             SkeletonLeave(dom, G, rad, terminal=True)]
    b = simulate_wiener(1.0, np.zeros(3), cfg, rules, n_paths=300)
    t1, t2, tau, tt = (b.hit_time[k] for k in ("tau1", "tau2", "exit", "tau_tilde"))
    assert np.all(t1 <= t2)
    assert np.all(tau <= tt)
    assert np.all(tt <= t2)


def test_recorded_skeleton_times_match_online():
    dom = Ball(5.0)
    G, rad = 0.5, 1.0
    cfg = SimConfig(dt=0.05, max_time=60.0, record_stride=10)
    rules = [SkeletonEnter(dom, G, rad), SkeletonExit(dom, G), SkeletonLeave(dom, G, rad, terminal=True)]
    b = simulate_wiener(1.0, np.zeros(3), cfg, rules, n_paths=50)
    t1, t2, tt = discrete_stop_times(b.record_times, b.records, G, rad, dom)
    np.testing.assert_array_equal(t1, b.hit_time["tau1"])
    np.testing.assert_array_equal(tt, b.hit_time["tau_tilde"])
    np.testing.assert_array_equal(t2, b.hit_time["tau2"])
    with pytest.raises(NotRecorded):
        discrete_stop_times(b.record_times[::2][1:], b.records[::2][1:], G, rad, dom)


def test_grid_time_must_be_multiple_of_dt():
    with pytest.raises(NotRecorded):
        simulate_wiener(1.0, np.zeros(3), SimConfig(dt=0.3, max_time=1.0), [SkeletonExit(Ball(1.0), 1.0)])


def test_bad_config():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0, max_time=1.0)
    with pytest.raises(ValueError):
        simulate_wiener(-1.0, np.zeros(3), SimConfig(dt=0.1, max_time=1.0))
    with pytest.raises(ValueError):
        simulate_wiener(1.0, np.zeros(3), SimConfig(dt=0.1, max_time=1.0), [ExitRule(Ball(1.0))],
                        integrals={"x": (lambda x: x[:, 0], "nope")})


def test_csv(tmp_path):
    b = simulate_wiener(1.0, np.zeros(3), SimConfig(dt=0.01, max_time=5.0), [ExitRule(Ball(1.0))], n_paths=4)
    b.to_csv(tmp_path / "p.csv")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 5
