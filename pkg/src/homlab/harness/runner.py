"""One function per CLI subcommand; each takes a config and returns a Result.

Experiment-specific knobs live in ``config.options``; anything not given
falls back to the defaults read below, and the manifest records the config
as given, so a re-run resolves the same defaults.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager

import numpy as np

from .. import rng
from ..analytic import AnnulusExit
from ..coupling import (KernelSampler, chebyshev_check, corollary_envelope, coupling_failure_rate, marginal_ks,
                        run_chains)
from ..domain import Annulus
from ..environ import Environment, sample_environment
from ..renorm import estimate_alpha, localization_check
from ..schedule import locate_scale
from ..walk import ExitRule, SimConfig, Wiener, simulate
from .config import ExperimentConfig
from .experiments import barrier_experiment, discrete_representation_audit, rate_experiment, tail_experiment
from .output import Result, Table


@contextmanager
def _mapper(threads: int):
    if threads <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=threads) as pool:
        yield pool.map


def _env(cfg: ExperimentConfig) -> Environment:
    return sample_environment(cfg.env_spec())


def _opt(cfg: ExperimentConfig, name: str, default):
    return cfg.options.get(name, default)


def _skeleton_epsilon(cfg: ExperimentConfig, table) -> float:
    """Option ``epsilon``, else the first configured eps with a coarse row, else 1/L_mbar."""
    if "epsilon" in cfg.options:
        return float(cfg.options["epsilon"])
    for e in cfg.epsilons:
        if locate_scale(table, float(e)) >= max(table.mbar, 1):
            return float(e)
    return 1.0 / table[max(table.mbar, 1)].L


# ---------------------------------------------------------------- schedule


def run_schedule(cfg: ExperimentConfig) -> Result:
    table = cfg.table()
    a, c0 = table.params.a, table.params.c0
    rows = []
    ok = True
    for i, r in enumerate(table.rows):
        ll = math.log(math.log(r.L))
        k_ok = math.isclose(r.kappa, math.exp(c0 * ll * ll), rel_tol=1e-12)
        kt_ok = math.isclose(r.kappa_tilde, r.kappa**2, rel_tol=1e-12)
        d_ok = math.isclose(r.D, r.L * r.kappa, rel_tol=1e-12) and math.isclose(r.D_tilde, r.L * r.kappa_tilde,
                                                                                rel_tol=1e-12)
        if i + 1 < len(table):
            nxt = table[i + 1].L
            l_ok = nxt == r.ell * r.L and 0.5 * r.L ** (1 + a) <= nxt <= 2 * r.L ** (1 + a)
        else:
            l_ok = True
        ok &= k_ok and kt_ok and d_ok and l_ok
        rows.append([r.n, r.L, r.ell, r.kappa, r.kappa_tilde, r.D, r.D_tilde, l_ok and k_ok and kt_ok and d_ok])
    header = ["n", "L_n", "ell_n", "kappa_n", "kappa_tilde_n", "D_n", "D_tilde_n", "identities_ok"]
    summary = {"delta": table.delta, "m0": table.m0, "M0": table.M0, "mbar": table.mbar, "identities_ok": ok}
    return Result({"rows": Table(header, rows, {"x": "n", "y": ["L_n", "D_n", "D_tilde_n"], "logy": True})}, summary)


# ---------------------------------------------------------------- env-check


def run_env_check(cfg: ExperimentConfig) -> Result:
    """Coefficient checks on a grid: sigma sigma^T = A, |b| < eta, ellipticity, window consistency."""
    env = _env(cfg)
    n = int(_opt(cfg, "grid", 7))
    half = float(_opt(cfg, "box", 10.0))
    d = env.d
    axes = [np.linspace(-half, half, n)] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    A, sigma, b = env.coefficients(pts)
    fact = np.abs(np.einsum("nij,nkj->nik", sigma, sigma) - A).max(axis=(1, 2))
    sym = np.abs(A - A.transpose(0, 2, 1)).max(axis=(1, 2))
    eig = np.linalg.eigvalsh(0.5 * (A + A.transpose(0, 2, 1)))
    bn = np.linalg.norm(b, axis=1)
    # the windowed copy must reproduce the direct evaluation
    win = env.windowed(pts.min(axis=0), pts.max(axis=0))
    Aw, _, bw = win.coefficients(pts)
    wdiff = float(max(np.abs(Aw - A).max(), np.abs(bw - b).max()))
    nu = env.spec.nu
    rows = [[*p, bb, e[0], e[-1], f] for p, bb, e, f in zip(pts, bn, eig, fact)]
    header = [f"x{i}" for i in range(d)] + ["b_norm", "eig_min", "eig_max", "factor_err"]
    eta = env.eta
    summary = {
        "max_factor_err": float(fact.max()),
        "max_asymmetry": float(sym.max()),
        "max_b": float(bn.max()),
        "min_eig": float(eig.min()),
        "max_eig": float(eig.max()),
        "window_diff": wdiff,
        "lipschitz_bound": env.lipschitz_bound(pts.min(axis=0), pts.max(axis=0)),
        "factor_ok": bool(fact.max() <= 1e-10),
        "drift_ok": bool(bn.max() <= eta if eta == 0 else bn.max() < eta),
        "ellipticity_ok": bool(eig.min() >= 1 / nu - 1e-12 and eig.max() <= nu + 1e-12),
        "window_ok": bool(wdiff <= 1e-12),
    }
    return Result({"grid": Table(header, rows)}, summary)


# ---------------------------------------------------------------- alpha


def run_alpha(cfg: ExperimentConfig) -> Result:
    env = _env(cfg)
    table = cfg.table()
    ns = [int(n) for n in _opt(cfg, "rows", [0, 1])]
    w_alpha = _opt(cfg, "wiener_alpha", 1.5)
    rows = []
    for n in ns:
        est = estimate_alpha(env, table[n], paths=cfg.paths, seed=cfg.seed)
        rows.append(["quenched", n, table[n].L, est.value, est.stderr, est.stopped_fraction, est.admissible])
    if w_alpha is not None:
        est = estimate_alpha(Wiener(float(w_alpha), env.d), table[ns[0]], paths=cfg.paths, seed=cfg.seed)
        rows.append([f"wiener({float(w_alpha)!r})", ns[0], table[ns[0]].L, est.value, est.stderr,
                     est.stopped_fraction, ""])
    header = ["process", "n", "L_n", "alpha_hat", "stderr", "stopped_fraction", "admissible"]
    summary = {r[0] + f"_n{r[1]}": {"alpha": r[3], "stderr": r[4]} for r in rows}
    return Result({"estimates": Table(header, rows)}, summary)


# ---------------------------------------------------------------- annulus-check


def run_annulus_check(cfg: ExperimentConfig) -> Result:
    """Closed-form mean exit time of the annulus against Brownian Monte Carlo."""
    r1 = float(_opt(cfg, "r1", 1.0))
    r2 = float(_opt(cfg, "r2", 2.0))
    alpha = float(_opt(cfg, "alpha", 1.0))
    d = int(cfg.env_spec().d)
    dt = float(_opt(cfg, "dt", 1e-4))
    radii = [float(r) for r in _opt(cfg, "radii", [1.5])]
    u = AnnulusExit(r1, r2, alpha, d)
    dom = Annulus(r1, r2, d)
    rows = []
    for i, r in enumerate(radii):
        x0 = np.zeros(d)
        x0[0] = r
        cfg_s = SimConfig(dt=dt, max_time=20.0 * float(u(u.peak_radius)) + 1.0)
        b = simulate(Wiener(alpha, d), x0, cfg_s, [ExitRule(dom, bridge=True)], n_paths=cfg.paths,
                     key=rng.derive_key(cfg.seed, rng.TAG_PATH, i))
        tau = b.hit_time["exit"]
        fin = np.isfinite(tau)
        m = float(tau[fin].mean())
        se = float(tau[fin].std(ddof=1) / math.sqrt(fin.sum()))
        exact = float(u(r))
        rows.append([r, exact, m, se, abs(m - exact) / exact, int((~fin).sum())])
    prof = [[float(r), float(u(r))] for r in np.linspace(r1, r2, 41)]
    summary = {
        "c1": u.c1, "c2": u.c2,
        "boundary_inner": float(u(r1)), "boundary_outer": float(u(r2)),
        "max_rel_err": max(r[4] for r in rows),
    }
    return Result({
        "mc": Table(["r", "exact", "mc_mean", "mc_stderr", "rel_err", "horizon"], rows),
        "profile": Table(["r", "u"], prof, {"x": "r", "y": ["u"]}),
    }, summary)


# ---------------------------------------------------------------- tails


def run_tails(cfg: ExperimentConfig) -> Result:
    env = _env(cfg)
    dom = cfg.make_domain()
    eps = float(_opt(cfg, "epsilon", cfg.epsilons[0]))
    starts = _opt(cfg, "starts", None)
    res = tail_experiment(env, dom, eps, cfg.table(), int(_opt(cfg, "k_max", 3)), cfg.paths, starts,
                          cfg.dt_rel, cfg.dt_max, cfg.seed)
    rows = [[i, int(k), res.exceedance[i, j], res.stderr[i, j]]
            for i in range(len(res.starts)) for j, k in enumerate(res.k)]
    summary = {"n": res.n, "T": res.T, "nested": res.nested(), "decay_rate": res.decay_rate,
               "exceedance_k1": res.exceedance[:, 1].tolist() if len(res.k) > 1 else []}
    return Result({"exceedance": Table(["start", "k", "exceedance", "stderr"], rows,
                                       {"x": "k", "y": ["exceedance"], "logy": True})}, summary)


# ---------------------------------------------------------------- barrier


def run_barrier(cfg: ExperimentConfig) -> Result:
    env = _env(cfg)
    dom = cfg.make_domain()
    table = cfg.table()
    eps = _skeleton_epsilon(cfg, table)
    res = barrier_experiment(env, dom, eps, table, cfg.paths, _opt(cfg, "x", None), cfg.dt_rel, cfg.dt_max,
                             cfg.seed, float(_opt(cfg, "alpha", 1.0)))
    mult = [float(m) for m in _opt(cfg, "multiples", [0.25, 0.5, 1.0, 2.0, 4.0])]
    exc = res.exceedance_at([m * res.threshold for m in mult])
    curve = [[m, m * res.threshold, e] for m, e in zip(mult, exc)]
    paths = [[i, res.tau1[i], res.tau[i], res.tau2[i], res.tau_tilde[i]] for i in range(len(res.tau))]
    with np.errstate(invalid="ignore"):
        tilde_ok = bool(np.all(res.tau <= res.tau_tilde))
        both = np.isfinite(res.tau1) & np.isfinite(res.tau2)
        order_ok = bool(np.all(res.tau1[both] <= res.tau2[both]))
    summary = {
        "n": res.n, "grid_time": res.grid_time, "radius": res.radius, "threshold": res.threshold,
        "exceedance": res.exceedance, "exceedance_se": res.exceedance_se,
        "brownian_exceedance": res.brownian_exceedance, "brownian_se": res.brownian_se,
        "ordered_fraction": res.ordered_fraction, "tau_le_tau_tilde": tilde_ok, "tau1_le_tau2": order_ok,
    }
    return Result({
        "exceedance": Table(["multiple", "threshold", "exceedance"], curve,
                            {"x": "multiple", "y": ["exceedance"], "logx": True}),
        "paths": Table(["path", "tau1", "tau", "tau2", "tau_tilde"], paths),
    }, summary)


# ---------------------------------------------------------------- couple


def run_couple(cfg: ExperimentConfig) -> Result:
    env = _env(cfg)
    table = cfg.table()
    n = int(_opt(cfg, "n", 1))
    K = int(_opt(cfg, "K", 10))
    batch = int(_opt(cfg, "batch", 64))
    n_chains = int(_opt(cfg, "n_chains", 200))
    alpha = float(_opt(cfg, "alpha", 1.0))
    x = np.asarray(_opt(cfg, "x", [0.0] * env.d), dtype=float)
    L = float(table.coarse(n).L)
    ks_q = KernelSampler.quenched(env, L)
    ks_g = KernelSampler.gaussian(alpha, L, env.d)
    chains = run_chains(ks_q, ks_g, x, K, batch, n_chains, cfg.seed, table.params.beta)
    gammas = [float(m) * L for m in _opt(cfg, "gamma_multiples", [0.25, 0.5, 1.0, 2.0])]
    rows = []
    cheb_ok = True
    for gm in gammas:
        fr = coupling_failure_rate(chains, gm)
        lhs, rhs, ok = chebyshev_check(chains, gm)
        cheb_ok &= ok
        rows.append([gm, gm / L, fr.rate, fr.stderr, lhs, rhs, ok])
    tests, ks_ok = marginal_ks(chains, ks_q, ks_g, cfg.seed)
    at_L = coupling_failure_rate(chains, L)
    dist = chains.distances()
    summary = {
        "n": n, "L": L, "K": K, "batch": batch, "chains": n_chains,
        "failure_rate_at_L": at_L.rate, "failure_se_at_L": at_L.stderr,
        "chebyshev_ok": cheb_ok, "ks_ok": ks_ok, "min_ks_pvalue": min(t.pvalue for t in tests),
        "max_distance": float(dist.max()), "mean_cost": float(chains.cost.mean()),
        "envelope": corollary_envelope(table, n),
    }
    return Result({
        "failure": Table(["gamma", "gamma_over_L", "failure_rate", "stderr", "cheb_lhs", "cheb_rhs", "cheb_ok"],
                         rows, {"x": "gamma_over_L", "y": ["failure_rate"]}),
        "ks": Table(["coordinate", "axis", "statistic", "pvalue"],
                    [[t.coordinate, t.axis, t.statistic, t.pvalue] for t in tests]),
        "distance": Table(["step", "mean_distance", "max_distance"],
                          [[k, float(dist[:, k].mean()), float(dist[:, k].max())] for k in range(K + 1)],
                          {"x": "step", "y": ["mean_distance", "max_distance"]}),
    }, summary)


# ---------------------------------------------------------------- rate


def run_rate(cfg: ExperimentConfig) -> Result:
    env = _env(cfg)
    dom = cfg.make_domain()
    table = cfg.table()
    a_row = _opt(cfg, "alpha_row", None)
    a_scale = table[int(a_row)] if a_row is not None else table[locate_scale(table, cfg.epsilons[-1])]
    with _mapper(int(cfg.threads)) as mapper:
        rep = rate_experiment(env, dom, cfg.epsilons, cfg.f, cfg.g, cfg.paths, cfg.dt_rel, cfg.dt_max, cfg.seed,
                              cfg.points, _opt(cfg, "alpha_bar", None), a_scale,
                              int(_opt(cfg, "alpha_paths", 10_000)), bool(_opt(cfg, "control_variate", False)),
                              mapper=mapper)
    rows = [[e, err, se, rel] for e, err, se, rel in zip(rep.epsilons, rep.errors, rep.error_se,
                                                          rep.relative_errors)]
    d = dom.d
    pts = []
    for e, est in zip(rep.epsilons, rep.estimates):
        for p, v, s, ex in zip(est.points, est.values, est.stderr, rep.exact):
            pts.append([e, *p, v, s, ex])
    summary = {
        "slope": rep.slope, "slope_se": rep.slope_se, "slope_ci": list(rep.slope_ci),
        "alpha_bar": rep.alpha_bar, "alpha_se": rep.alpha_se,
        "errors": rep.errors.tolist(), "error_se": rep.error_se.tolist(),
        "relative_errors": rep.relative_errors.tolist(),
        "monotone": bool(np.all(np.diff(rep.errors) <= 0)),
    }
    return Result({
        "errors": Table(["epsilon", "sup_error", "stderr", "relative_error"], rows,
                        {"x": "epsilon", "y": ["sup_error"], "logx": True, "logy": True}),
        "points": Table(["epsilon", *[f"x{i}" for i in range(d)], "u_eps", "stderr", "u_bar"], pts),
    }, summary)


# ---------------------------------------------------------------- audit


def run_audit(cfg: ExperimentConfig) -> Result:
    env = _env(cfg)
    dom = cfg.make_domain()
    table = cfg.table()
    eps = _skeleton_epsilon(cfg, table)
    rep = discrete_representation_audit(
        env, dom, eps, table, cfg.g, cfg.paths, _opt(cfg, "x", None), cfg.dt_rel, cfg.dt_max,
        _opt(cfg, "alpha", None), _opt(cfg, "alpha_bar", None), int(_opt(cfg, "n_chains", 200)),
        int(_opt(cfg, "batch", 16)), cfg.seed, envelope_paths=int(_opt(cfg, "envelope_paths", 200)),
    )
    rows = [[r.stage, r.value, r.stderr, r.diff, r.diff_se, r.kind] for r in rep.rows]
    summary = {"n": rep.n, "grid_time": rep.grid_time, "radius": rep.radius,
               "riemann_gap": rep.riemann_gap, "riemann_envelope": rep.riemann_envelope}
    return Result({"stages": Table(["stage", "value", "stderr", "diff", "diff_se", "kind"], rows)}, summary)


RUNNERS = {
    "schedule": run_schedule,
    "env-check": run_env_check,
    "alpha": run_alpha,
    "annulus-check": run_annulus_check,
    "tails": run_tails,
    "barrier": run_barrier,
    "couple": run_couple,
    "rate": run_rate,
    "audit": run_audit,
}


def run(cfg: ExperimentConfig) -> Result:
    cfg.validate()
    return RUNNERS[cfg.experiment](cfg)


def localization(cfg: ExperimentConfig, n: int, center=None):
    """Localization control at row n from ``center`` (the origin by default)."""
    env = _env(cfg)
    c = np.zeros(env.d) if center is None else np.asarray(center, dtype=float)
    return localization_check(env, cfg.table()[n], c, paths=cfg.paths, seed=cfg.seed)
