import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homlab.domain import Annulus, Ball
from homlab.harness import (FitUnstable, HorizonDominated, estimate_u_eps, fit_rate, get_function, query_grid,
                            rate_experiment, tail_experiment)
from homlab.harness.cli import build_parser, main, resolve_config
from homlab.harness.config import ExperimentConfig, load_config, make_domain
from homlab.harness.experiments import _start_near_boundary, barrier_experiment, discrete_representation_audit
from homlab.harness.output import Result, Table, verify_outputs, write_csv, write_result
from homlab.harness.runner import RUNNERS
from homlab.schedule import OutOfRange, ScaleParams, build_schedule


# ---------------------------------------------------------------- registry and config


def test_registry_lookup():
    f = get_function({"name": "coord", "i": 1, "R": 3.0})
    x = np.array([[0.0, 30.0, 0.0]])
    assert f(x)[0] == pytest.approx(3.0 * math.tanh(10.0))
    assert f.sup == 3.0 and f.lip == 1.0 and f.modulus(100.0) == 6.0
    assert get_function("minus_one").solver_data() == -1.0
    with pytest.raises(KeyError):
        get_function("nope")


@given(r=st.floats(0.01, 2.0), s=st.floats(0.0, 2.0))
def test_bump_lipschitz_constant(r, s):
    f = get_function({"name": "bump", "r": r})
    h = 1e-6 * r
    x = np.array([[s * r, 0, 0], [s * r + h, 0, 0]])
    v = f(x)
    assert abs(v[1] - v[0]) <= f.lip * h * (1 + 1e-4) + 1e-15


def test_config_roundtrip(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('experiment = "tails"\nseed = 5\npaths = 10\n[env]\neta = 0.1\n[domain]\nkind = "annulus"\n'
                 'r1 = 1.0\nr2 = 2.0\n[options]\nk_max = 2\n')
    cfg = load_config(p)
    assert cfg.env_spec().eta == 0.1 and cfg.env_spec().seed == 5
    assert isinstance(cfg.make_domain(), Annulus)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="nope").validate()
    with pytest.raises(ValueError):
        ExperimentConfig(epsilons=[1 / 50, 1 / 25]).validate()
    with pytest.raises(OutOfRange):
        ExperimentConfig(epsilons=[1 / 10]).validate()
    with pytest.raises(ValueError):
        make_domain({"kind": "cube"})


def test_cli_flags_override_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 1\npaths = 10\n")
    args = build_parser().parse_args(["alpha", "--config", str(p), "--seed", "9", "--paths", "3", "--out",
                                      str(tmp_path), "--threads", "2", "--set", "rows=[0]"])
    cfg = resolve_config(args)
    assert (cfg.experiment, cfg.seed, cfg.paths, cfg.threads) == ("alpha", 9, 3, 2)
    assert cfg.options == {"rows": [0]}
    with pytest.raises(SystemExit):
        build_parser().parse_args(["alpha", "--seed", "-1"])


def test_every_subcommand_has_a_runner():
    assert set(RUNNERS) == set(build_parser()._subparsers._group_actions[0].choices)


# ---------------------------------------------------------------- outputs


def test_csv_roundtrips_floats(tmp_path):
    x = 0.1 + 0.2
    write_csv(tmp_path / "t.csv", Table(["a", "b", "c"], [[x, 3, True]]))
    line = (tmp_path / "t.csv").read_text().splitlines()[1]
    a, b, c = line.split(",")
    assert float(a) == x and b == "3" and c == "1"


def test_manifest_and_verify(tmp_path):
    res = Result({"t": Table(["x", "y"], [[1.0, 2.0]], {"x": "x", "y": ["y"]})}, {"k": np.float64(1.5)})
    m = write_result(tmp_path, "demo", {"seed": 0}, res)
    man = json.loads(m.read_text())
    assert man["summary"] == {"k": 1.5} and set(man["outputs"]) == {"demo_t.csv"}
    assert (tmp_path / "plot_demo_t.py").exists()
    compile((tmp_path / "plot_demo_t.py").read_text(), "plot", "exec")
    assert all(verify_outputs(m).values())
    (tmp_path / "demo_t.csv").write_text("x,y\n1.0,2.5\n")
    assert not any(verify_outputs(m).values())


def test_cli_rerun_is_bit_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["schedule", "--out", str(a)]) == 0
    assert main(["alpha", "--paths", "200", "--out", str(a), "--set", "rows=[0]"]) == 0
    for exp in ("schedule", "alpha"):
        m = a / f"{exp}_manifest.json"
        assert main([exp, "--config", str(m), "--out", str(b), "--verify"]) == 0
        assert (a / f"{exp}_manifest.json").read_text() == (b / f"{exp}_manifest.json").read_text().replace(
            str(b), str(a))
    capsys.readouterr()


# ---------------------------------------------------------------- estimators


def test_query_grid_shapes():
    g = query_grid(Ball(1.0), 4)
    assert g.shape == (4, 3) and np.all(Ball(1.0).contains(g))
    a = query_grid(Annulus(1.0, 2.0), 3)
    assert np.all(Annulus(1.0, 2.0).contains(a))


@settings(max_examples=5)
@given(c=st.floats(-2.0, 0.0), seed=st.integers(0, 2**32))
def test_nonpositive_source_gives_nonnegative_u(env05, c, seed):
    # with f = 0 each path contributes -eps^2 int g >= 0
    est = estimate_u_eps(env05, Ball(1.0), 1 / 25, "zero", {"name": "const", "c": c}, np.zeros((1, 3)), 20,
                         dt_rel=1e-2, seed=seed)
    assert np.all(est.per_path >= 0)


def test_u_eps_at_eta_zero(env0):
    est = estimate_u_eps(env0, Ball(1.0), 1 / 25, "zero", "minus_one", np.zeros((1, 3)), 2000, dt_rel=2e-3)
    assert abs(est.values[0] - 1 / 3) < 4 * est.stderr[0] + 3e-3


def test_control_variate_is_exact_at_eta_zero(env0):
    est = estimate_u_eps(env0, Ball(1.0), 1 / 25, "zero", "minus_one", np.zeros((1, 3)), 50, dt_rel=1e-2,
                         control_alpha=1.0)
    assert est.values[0] == pytest.approx(1 / 3, abs=1e-12)
    assert est.stderr[0] == 0.0


def test_horizon_dominated(env0):
    with pytest.raises(HorizonDominated):
        estimate_u_eps(env0, Ball(1.0), 1 / 25, "zero", "minus_one", np.zeros((1, 3)), 50, dt_rel=1e-2,
                       max_time_rel=0.01)


def test_boundary_data_enter_through_projection(env0):
    # u = f on harmonic data: f = x_0 (clipped coordinate is nearly linear on the unit ball)
    f = {"name": "coord", "i": 0, "R": 100.0}
    x = np.array([[0.5, 0.0, 0.0]])
    est = estimate_u_eps(env0, Ball(1.0), 1 / 25, f, "zero", x, 2000, dt_rel=2e-3)
    assert abs(est.values[0] - 100 * math.tanh(0.005)) < 4 * est.stderr[0] + 5e-3


def test_fit_rate_on_power_law():
    eps = np.array([1 / 25, 1 / 50, 1 / 100, 1 / 200])
    slope, se, ci = fit_rate(eps, 3 * eps**0.7)
    assert slope == pytest.approx(0.7) and se == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(FitUnstable):
        fit_rate(eps[:2], eps[:2])


def test_tail_experiment_nested(env0):
    t = build_schedule(ScaleParams(c0=0.1), 3)
    res = tail_experiment(env0, Ball(1.0), 1 / 25, t, 3, 300, dt_rel=2e-3)
    assert res.nested() and res.exceedance[0, 0] == 1.0
    assert res.T == 1250.0**2


def test_barrier_ordering(env0):
    t = build_schedule(ScaleParams(c0=0.1), 3)
    res = barrier_experiment(env0, Ball(1.0), 1 / 125, t, 100, dt_rel=5e-3)
    both = np.isfinite(res.tau1) & np.isfinite(res.tau2)
    assert np.all(res.tau1[both] <= res.tau2[both])
    assert np.all(res.tau <= res.tau_tilde)


def test_audit_identity_stages(env0):
    t = build_schedule(ScaleParams(c0=0.1), 3)
    rep = discrete_representation_audit(env0, Ball(1.0), 1 / 125, t, "minus_one", paths=300, dt_rel=5e-3,
                                        alpha=1.0, n_chains=40, batch=4, envelope_paths=20)
    assert [r.stage[:3] for r in rep.rows][:3] == ["S0 ", "S1 ", "S2 "]
    s10 = rep.row("S10 exact, alpha_{n-mbar}")
    assert s10.value == pytest.approx(1 / 3)
    s0 = rep.row("S0 quenched integral to tau")
    assert abs(s0.value - 1 / 3) < 5 * s0.stderr + 5e-3


def test_rate_experiment_runs(env0):
    rep = rate_experiment(env0, Ball(1.0), [1 / 25, 1 / 50, 1 / 100], "zero", "minus_one", 200, dt_rel=5e-3,
                          points=np.zeros((1, 3)))
    assert rep.alpha_bar == 1.0 and len(rep.errors) == 3 and np.all(rep.relative_errors < 0.1)


@pytest.mark.parametrize("dom,dist", [(Ball(10.0), 3.0), (Annulus(10.0, 20.0), 2.0), (Annulus(10.0, 20.0), 4.0)])
def test_start_near_boundary_depth(dom, dist):
    x = _start_near_boundary(dom, dist)
    assert dom.contains(x[None, :])[0]
    assert abs(float(dom.dist_to_complement(x[None, :])[0]) - dist) < 1e-9


def test_start_near_boundary_shallow_domain():
    x = _start_near_boundary(Annulus(10.0, 20.0), 8.0)
    np.testing.assert_allclose(x, [15.0, 0.0, 0.0], atol=1e-2)
