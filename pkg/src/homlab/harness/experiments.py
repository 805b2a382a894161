"""Exit-functional estimators and the experiments built on them.

Everything runs in microscopic coordinates: the domain is U / eps, paths
start at x / eps, and a macroscopic time step ``dt_rel`` becomes
``dt_rel / eps^2`` (capped by ``dt_max`` so the step still resolves the
environment).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import linregress

from .. import rng
from ..analytic import max_mean_exit, solve_homogenized
from ..coupling import KernelSampler, match
from ..domain import Domain
from ..environ import Environment, local_window
from ..renorm import estimate_alpha
from ..schedule import OutOfRange, ScaleTable, locate_scale
from ..walk import (ExitRule, Quenched, SimConfig, SkeletonEnter, SkeletonExit, SkeletonLeave, Wiener,
                    simulate)
from .registry import NamedFunction, get_function


class HorizonDominated(RuntimeError):
    """More than 5% of the paths failed to exit before the horizon."""


HORIZON_FAIL = 0.05
HORIZON_FLAG = 0.001


def micro_dt(epsilon: float, dt_rel: float, dt_max: float | None) -> float:
    dt = dt_rel / epsilon**2
    return min(dt, dt_max) if dt_max is not None else dt


def _eps_key(seed: int, epsilon: float, tag: int = rng.TAG_PATH):
    # independent streams per epsilon
    return rng.derive_key(seed, tag, int(round(1.0 / epsilon)))


# ---------------------------------------------------------------- u^eps


@dataclass
class UEstimate:
    points: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    paths: int
    horizon_count: int
    horizon_fraction: float
    flagged: bool
    per_path: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))

    def to_rows(self):
        for p, v, s in zip(self.points, self.values, self.stderr):
            yield [*[repr(float(c)) for c in p], repr(float(v)), repr(float(s))]


def exit_functional(process, domain: Domain, epsilon: float, f: NamedFunction, g: NamedFunction, x,
                    paths: int, dt_rel: float = 1e-3, dt_max: float | None = None,
                    max_time_rel: float | None = None, key=None, bridge: bool = True) -> UEstimate:
    """Per-path f(eps X_tau) - eps^2 int_0^tau g(eps X_s) ds for a given process."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    nx, d = x.shape
    dom = domain.dilate(1.0 / epsilon)
    if max_time_rel is None:
        max_time_rel = 5.0 * domain.bounding_radius**2 + 1.0
    dt = micro_dt(epsilon, dt_rel, dt_max)
    cfg = SimConfig(dt=dt, max_time=max_time_rel / epsilon**2)
    if isinstance(process, Quenched):
        process = Quenched(local_window(process.env, 0.0, dom.bounding_radius + 2.0))
    ids = np.arange(nx * paths, dtype=np.uint64)
    x0 = np.repeat(x / epsilon, paths, axis=0)
    integrals = {}
    if not g.is_constant or g.params.get("c", 0.0) != 0.0:
        integrals["g"] = (lambda y: g(epsilon * y), "exit")
    batch = simulate(process, x0, cfg, [ExitRule(dom, bridge=bridge)], key=key, path_ids=ids,
                     integrals=integrals)
    if f.is_constant:
        fv = np.full(len(ids), float(f.params.get("c", 0.0)))
    else:
        y = epsilon * batch.final
        # exits flagged by the bridge test end inside; overshoots end outside
        y = np.where(batch.horizon[:, None], y, domain.project(y))
        fv = f(y)
    gi = batch.integrals.get("g", np.zeros(len(ids)))
    vals = (fv - epsilon**2 * gi).reshape(nx, paths)
    hc = int(batch.horizon.sum())
    frac = hc / len(ids)
    if frac > HORIZON_FAIL:
        raise HorizonDominated(f"{hc} of {len(ids)} paths did not exit before the horizon")
    se = vals.std(axis=1, ddof=1) / math.sqrt(paths) if paths > 1 else np.full(nx, np.inf)
    return UEstimate(x, vals.mean(axis=1), se, paths, hc, frac, frac > HORIZON_FLAG, vals)


def estimate_u_eps(env: Environment, domain: Domain, epsilon: float, f, g, x, paths: int,
                   dt_rel: float = 1e-3, dt_max: float | None = None, max_time_rel: float | None = None,
                   seed: int = 0, bridge: bool = True, control_alpha: float | None = None) -> UEstimate:
    """Monte Carlo u^eps(x) = E_{x/eps}[f(eps X_tau) - eps^2 int_0^tau g(eps X_s) ds].

    With ``control_alpha`` set, the estimate uses the variance-alpha Brownian
    motion driven by the same Gaussian increments as a control variate whose
    mean is the exact homogenized solution:
    u = mean(quenched - Brownian) + u_bar(alpha).
    """
    f = get_function(f)
    g = get_function(g)
    key = _eps_key(seed, epsilon)
    est = exit_functional(Quenched(env), domain, epsilon, f, g, x, paths, dt_rel, dt_max, max_time_rel, key, bridge)
    if control_alpha is None:
        return est
    ctl = exit_functional(Wiener(control_alpha, env.d), domain, epsilon, f, g, x, paths, dt_rel, dt_max,
                          max_time_rel, key, bridge)
    exact = solve_homogenized(domain, control_alpha, g.solver_data(), f.solver_data())
    diff = est.per_path - ctl.per_path
    se = diff.std(axis=1, ddof=1) / math.sqrt(paths)
    vals = diff.mean(axis=1) + np.asarray(exact(est.points))
    hc = max(est.horizon_count, ctl.horizon_count)
    return UEstimate(est.points, vals, se, paths, hc, hc / diff.size, est.flagged or ctl.flagged, diff)


# ---------------------------------------------------------------- tails


@dataclass
class TailResult:
    n: int
    T: float  # L_{n+2}^2
    k: np.ndarray
    exceedance: np.ndarray  # (n_starts, k_max + 1)
    stderr: np.ndarray
    starts: np.ndarray
    decay_rate: float  # fitted slope of log P against k (nan when not fittable)

    def nested(self) -> bool:
        return bool(np.all(np.diff(self.exceedance, axis=1) <= 0))


def tail_experiment(env: Environment, domain: Domain, epsilon: float, table: ScaleTable, k_max: int = 3,
                    paths: int = 10_000, starts=None, dt_rel: float = 1e-3, dt_max: float | None = None,
                    seed: int = 0, bridge: bool = True) -> TailResult:
    """P(tau^eps > k L_{n+2}^2), k = 0..k_max, from each start point (macroscopic)."""
    n = locate_scale(table, epsilon)
    if n + 2 >= len(table):
        raise OutOfRange(f"the table needs row n + 2 = {n + 2}")
    T = float(table[n + 2].L) ** 2
    starts = np.zeros((1, domain.d)) if starts is None else np.atleast_2d(np.asarray(starts, dtype=float))
    dom = domain.dilate(1.0 / epsilon)
    dt = micro_dt(epsilon, dt_rel, dt_max)
    # run to k_max T, but no further than needed when every path has exited
    cfg = SimConfig(dt=dt, max_time=max(k_max, 1) * T)
    ids = np.arange(len(starts) * paths, dtype=np.uint64)
    x0 = np.repeat(starts / epsilon, paths, axis=0)
    batch = simulate(Quenched(env), x0, cfg, [ExitRule(dom, bridge=bridge)], key=_eps_key(seed, epsilon), path_ids=ids)
    tau = np.where(batch.horizon, np.inf, batch.hit_time["exit"]).reshape(len(starts), paths)
    ks = np.arange(k_max + 1)
    exc = np.stack([(tau > k * T).mean(axis=1) if k > 0 else np.ones(len(starts)) for k in ks], axis=1)
    se = np.sqrt(exc * (1 - exc) / paths)
    worst = exc.max(axis=0)
    ok = (worst > 0) & (ks > 0)
    rate = float(linregress(ks[ok], np.log(worst[ok])).slope) if ok.sum() >= 2 else math.nan
    return TailResult(n, T, ks, exc, se, starts, rate)


# ---------------------------------------------------------------- boundary barrier


@dataclass
class BarrierResult:
    n: int
    grid_time: float  # L_{n - mbar}^2
    radius: float  # D_tilde_{n - mbar}
    threshold: float  # L_{n-1}^2
    tau: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray
    tau_tilde: np.ndarray
    exceedance: float
    exceedance_se: float
    brownian_exceedance: float
    brownian_se: float
    ordered_fraction: float  # tau1 <= tau <= tau2

    def exceedance_at(self, thresholds) -> np.ndarray:
        gap = self.tau - self.tau1
        return np.array([float(np.mean(gap >= t)) for t in np.atleast_1d(thresholds)])


def barrier_experiment(env: Environment, domain: Domain, epsilon: float, table: ScaleTable, paths: int = 2000,
                       x=None, dt_rel: float = 1e-3, dt_max: float | None = None, seed: int = 0,
                       alpha: float = 1.0, bridge: bool = True, horizon_rel: float | None = None) -> BarrierResult:
    """Records tau1, tau2, tau and tau_tilde per path and the barrier exceedances.

    Simulation stops at tau2 (which bounds the others) or at the horizon
    min(L_{n+2}^2, horizon_rel / eps^2).
    """
    n = locate_scale(table, epsilon)
    if n < 1:
        raise OutOfRange("the barrier experiment needs n >= 1")
    coarse = table.coarse(n)
    G = float(coarse.L) ** 2
    rad = coarse.D_tilde
    thr = float(table[n - 1].L) ** 2
    x = np.zeros(domain.d) if x is None else np.asarray(x, dtype=float)
    dom = domain.dilate(1.0 / epsilon)
    dt = micro_dt(epsilon, dt_rel, dt_max)
    # make the grid time an integer number of steps
    dt = G / math.ceil(G / dt)
    T_h = float(table[n + 2].L) ** 2 if n + 2 < len(table) else math.inf
    if horizon_rel is None:
        horizon_rel = 10.0 * domain.bounding_radius**2 + 1.0
    T_h = min(T_h, horizon_rel / epsilon**2)
    T_h = G * math.ceil(T_h / G)
    cfg = SimConfig(dt=dt, max_time=T_h)
    rules = [
        ExitRule(dom, terminal=False, bridge=bridge),
        SkeletonEnter(dom, G, rad),
        SkeletonLeave(dom, G, rad, terminal=True),
        SkeletonExit(dom, G),
    ]
    batch = simulate(Quenched(env), x / epsilon, cfg, rules, n_paths=paths, key=_eps_key(seed, epsilon))
    tau, t1, t2, tt = (batch.hit_time[k] for k in ("exit", "tau1", "tau2", "tau_tilde"))
    gap = tau - t1
    both = np.isfinite(tau) & np.isfinite(t1)
    p = float(np.mean(gap[both] >= thr)) if both.any() else math.nan
    p_se = math.sqrt(p * (1 - p) / max(both.sum(), 1)) if both.any() else math.nan
    # Brownian analogue: start 2 D_tilde from the complement (or at the deepest point available)
    start = _start_near_boundary(dom, 2.0 * rad)
    wb = simulate(Wiener(alpha, domain.d), start, SimConfig(dt=dt, max_time=T_h), [ExitRule(dom, bridge=bridge)],
                  n_paths=paths, key=_eps_key(seed, epsilon, rng.TAG_COUPLE))
    wt = np.where(wb.horizon, np.inf, wb.hit_time["exit"])
    q = float(np.mean(wt >= thr))
    ordered = np.isfinite(t1) & np.isfinite(tau) & np.isfinite(t2) & (t1 <= tau) & (tau <= t2)
    return BarrierResult(n, G, rad, thr, tau, t1, t2, tt, p, p_se, q, math.sqrt(q * (1 - q) / paths),
                         float(ordered.mean()))


def _start_near_boundary(dom: Domain, dist: float) -> np.ndarray:
    """A point on the ray from the center along the first axis with the requested distance to the complement.

    The search starts at the deepest point of the ray (the center for a ball,
    mid-shell for an annulus) and moves outwards.
    """
    c = np.asarray(getattr(dom, "center", np.zeros(dom.d)), dtype=float)
    e = np.zeros(dom.d)
    e[0] = 1.0
    R = dom.bounding_radius + float(np.linalg.norm(c))
    ts = np.linspace(0.0, R, 2049)
    depth = np.where(dom.contains(c + ts[:, None] * e), dom.dist_to_complement(c + ts[:, None] * e), -np.inf)
    k = int(np.argmax(depth))
    if not np.isfinite(depth[k]):
        raise ValueError("the ray from the center misses the domain")
    if depth[k] <= dist:
        return c + ts[k] * e
    # bisection along the ray for dist_to_complement == dist
    lo, hi = float(ts[k]), R
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if float(dom.dist_to_complement((c + mid * e)[None, :])[0]) > dist:
            lo = mid
        else:
            hi = mid
    return c + lo * e


# ---------------------------------------------------------------- audit of the discrete representation


@dataclass
class AuditRow:
    stage: str
    value: float
    stderr: float
    diff: float  # value minus the previous stage
    diff_se: float
    kind: str  # "identity": equal in law; "approximation": error vanishing as eps -> 0


@dataclass
class AuditReport:
    rows: list[AuditRow]
    n: int
    grid_time: float
    radius: float
    riemann_gap: float = math.nan
    riemann_envelope: float = math.nan

    def row(self, stage: str) -> AuditRow:
        return next(r for r in self.rows if r.stage == stage)


def _mean_se(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    if len(v) < 2:
        return float(v.mean()) if len(v) else math.nan, math.inf
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def discrete_representation_audit(env: Environment, domain: Domain, epsilon: float, table: ScaleTable, g,
                                  paths: int = 2000, x=None, dt_rel: float = 1e-3, dt_max: float | None = None,
                                  alpha: float | None = None, alpha_bar: float | None = None,
                                  n_chains: int = 200, batch: int = 16, seed: int = 0,
                                  horizon_rel: float | None = None, envelope_paths: int = 200,
                                  bridge: bool = True) -> AuditReport:
    """Each stage of the discrete representation of u^eps (zero boundary data).

    Stages, all of the form E[-eps^2 (integral or Riemann sum of g)]:
      S0 quenched, integral to tau
      S1 quenched, integral to tau on {tau <= L_{n+2}^2}
      S2 quenched, integral to tau1 on {tau1 <= L_{n+2}^2}
      S3 quenched, Riemann sum on the L_{n-mbar}^2 grid to tau1
      S4 coupled chain, X coordinate, sum to T1
      S5 coupled chain, X_bar coordinate, sum to T1
      S6 coupled chain, X_bar coordinate, sum to T_bar2
      S7 Brownian (alpha_{n-mbar}), Riemann sum to tau2
      S8 Brownian, integral to tau2
      S9 Brownian, integral to tau (no cutoff)
      S10 exact solution with alpha_{n-mbar}
      S11 exact solution with alpha_bar
    """
    g = get_function(g)
    n = locate_scale(table, epsilon)
    coarse = table.coarse(n)
    G = float(coarse.L) ** 2
    rad = coarse.D_tilde
    d = domain.d
    x = np.zeros(d) if x is None else np.asarray(x, dtype=float)
    dom = domain.dilate(1.0 / epsilon)
    x0 = x / epsilon
    e2 = epsilon**2
    if alpha is None:
        alpha = estimate_alpha(env, coarse, paths=min(paths, 4000), seed=seed).value
    alpha_bar = alpha if alpha_bar is None else alpha_bar
    T_cut = float(table[n + 2].L) ** 2 if n + 2 < len(table) else math.inf
    if horizon_rel is None:
        horizon_rel = 10.0 * domain.bounding_radius**2 + 1.0
    T_h = G * math.ceil(min(T_cut, horizon_rel / e2) / G)
    dt = micro_dt(epsilon, dt_rel, dt_max)
    dt = G / math.ceil(G / dt)
    K_max = int(round(T_h / G))
    gm = lambda y: g(epsilon * y)

    def run(process, key):
        # stop once both the exit and tau2 have happened
        rules = [ExitRule(dom, bridge=bridge), SkeletonEnter(dom, G, rad), SkeletonLeave(dom, G, rad, terminal=True)]
        return simulate(process, x0, SimConfig(dt=dt, max_time=T_h), rules, n_paths=paths, key=key, stop="all",
                        integrals={"to_tau": (gm, "exit"), "to_tau1": (gm, "tau1"), "to_tau2": (gm, "tau2")},
                        sums={"sum_tau1": (gm, "tau1", G), "sum_tau2": (gm, "tau2", G)})

    q = run(Quenched(env), _eps_key(seed, epsilon))
    w = run(Wiener(alpha, d), _eps_key(seed, epsilon, rng.TAG_SHIFT))
    tq, t1 = q.hit_time["exit"], q.hit_time["tau1"]
    stages = []
    stages.append(("S0 quenched integral to tau", -e2 * q.integrals["to_tau"], "identity"))
    stages.append(("S1 truncated at L_{n+2}^2", -e2 * q.integrals["to_tau"] * (tq <= T_cut), "approximation"))
    stages.append(("S2 integral to tau1", -e2 * q.integrals["to_tau1"] * (t1 <= T_cut), "approximation"))
    stages.append(("S3 Riemann sum to tau1", -e2 * q.integrals["sum_tau1"] * (t1 <= T_cut), "approximation"))

    # coupled chain at step G from x0
    ks_q = KernelSampler.quenched(env, coarse.L, max(1, int(round(G / dt))))
    ks_g = KernelSampler.gaussian(alpha, coarse.L, d, max(1, int(round(G / dt))))
    s4, s5, s6 = _chain_sums(ks_q, ks_g, dom, x0, rad, G, K_max, batch, n_chains, seed, gm, table.params.beta)
    stages.append(("S4 chain X to T1", -e2 * s4, "identity"))
    stages.append(("S5 chain X_bar to T1", -e2 * s5, "approximation"))
    stages.append(("S6 chain X_bar to T_bar2", -e2 * s6, "approximation"))

    t2w, tw = w.hit_time["tau2"], w.hit_time["exit"]
    stages.append(("S7 Brownian Riemann sum to tau2", -e2 * w.integrals["sum_tau2"] * (t2w <= T_cut), "identity"))
    stages.append(("S8 Brownian integral to tau2", -e2 * w.integrals["to_tau2"] * (t2w <= T_cut), "approximation"))
    stages.append(("S9 Brownian integral to tau", -e2 * w.integrals["to_tau"], "approximation"))
    sol_n = solve_homogenized(domain, alpha, g.solver_data(), 0.0)
    sol_b = solve_homogenized(domain, alpha_bar, g.solver_data(), 0.0)
    stages.append(("S10 exact, alpha_{n-mbar}", np.array([float(sol_n(x[None, :])[0])]), "identity"))
    stages.append(("S11 exact, alpha_bar", np.array([float(sol_b(x[None, :])[0])]), "approximation"))

    rows = []
    prev = None
    for name, vals, kind in stages:
        m, se = _mean_se(vals)
        if prev is None:
            dv, dse = 0.0, 0.0
        else:
            dv = m - prev[0]
            dse = math.hypot(se if math.isfinite(se) else 0.0, prev[1] if math.isfinite(prev[1]) else 0.0)
        rows.append(AuditRow(name, m, se if len(vals) > 1 else 0.0, dv, dse, kind))
        prev = (m, se if len(vals) > 1 else 0.0)
    rep = AuditReport(rows, n, G, rad)
    rep.riemann_gap, rep.riemann_envelope = _riemann_envelope(alpha, d, dom, x0, G, dt, T_h, rad, gm, g, epsilon,
                                                              envelope_paths, seed)
    return rep


def _chain_sums(ks_q, ks_g, dom, x0, rad, G, K_max, batch, n_chains, seed, gm, beta):
    """Riemann sums along coupled chains, stepped until T1 and T_bar2 have both fired."""
    d = len(x0)
    X = np.repeat(x0[None, :], n_chains, axis=0)
    Xb = X.copy()
    s4 = np.zeros(n_chains)
    s5 = np.zeros(n_chains)
    s6 = np.zeros(n_chains)
    T1 = np.full(n_chains, -1)
    T2 = np.full(n_chains, -1)
    key = rng.derive_key(seed, rng.TAG_COUPLE)
    skey = rng.derive_key(seed, rng.TAG_SELECT)
    for k in range(K_max + 1):
        hit1 = (T1 < 0) & (dom.dist_to_complement(X) <= rad)
        T1[hit1] = k
        hit2 = (T2 < 0) & (dom.dist_to_domain(Xb) >= rad)
        T2[hit2] = k
        live1 = T1 < 0
        live2 = T2 < 0
        s4[live1] += G * gm(X[live1]) if live1.any() else 0.0
        s5[live1] += G * gm(Xb[live1]) if live1.any() else 0.0
        s6[live2] += G * gm(Xb[live2]) if live2.any() else 0.0
        act = np.nonzero(live1 | live2)[0]
        if len(act) == 0 or k == K_max:
            break
        ids = (np.uint64(k * n_chains * batch)
               + (act[:, None] * batch + np.arange(batch)[None, :]).astype(np.uint64).ravel())
        sums = ks_q.normal_sums(ids, key) if (ks_q.constant and ks_g.constant) else None
        a = ks_q.draw(np.repeat(X[act], batch, axis=0), ids, key, sums).reshape(len(act), batch, d)
        b = ks_g.draw(np.repeat(Xb[act], batch, axis=0), ids, key, sums).reshape(len(act), batch, d)
        u = rng.uniforms(skey, act.astype(np.uint64), counter=k)
        pick = np.minimum((u * batch).astype(np.int64), batch - 1)
        for j, c in enumerate(act):
            perm, _ = match(a[j], b[j], ks_q.L, beta)
            X[c] = a[j, pick[j]]
            Xb[c] = b[j, perm[pick[j]]]
    # chains that never fired within the horizon are truncated (the cutoff indicator)
    s4[T1 < 0] = 0.0
    s5[T1 < 0] = 0.0
    s6[T2 < 0] = 0.0
    return s4, s5, s6


def _riemann_envelope(alpha, d, dom, x0, G, dt, T_h, rad, gm, g: NamedFunction, epsilon, paths, seed):
    """Mean |Riemann sum - integral| to tau2 on Brownian paths, and its Lipschitz envelope.

    The envelope is eps^3 |Dg| G sum_k sup_{s in block k} |X_s - X_{kG}| per path,
    with the block oscillations measured from every step.
    """
    steps_G = int(round(G / dt))
    cfg = SimConfig(dt=dt, max_time=T_h, record_stride=1)
    b = simulate(Wiener(alpha, d), x0, cfg, [SkeletonLeave(dom, G, rad, terminal=True)], n_paths=paths,
                 key=rng.derive_key(seed, rng.TAG_CLOUD, 1),
                 integrals={"int": (gm, "tau2")}, sums={"sum": (gm, "tau2", G)})
    rec = b.records  # (n_rec, N, d), NaN after the stop
    t2 = b.hit_time["tau2"]
    fired = np.isfinite(t2)
    gap = epsilon**2 * np.abs(b.integrals["sum"] - b.integrals["int"])
    env_ = np.zeros(paths)
    n_blocks = (rec.shape[0] - 1) // steps_G
    for k in range(n_blocks):
        blk = rec[k * steps_G:(k + 1) * steps_G + 1]
        dev = np.linalg.norm(blk - blk[0][None, :, :], axis=2)
        osc = np.nanmax(np.where(np.isnan(dev), -np.inf, dev), axis=0)
        alive = (k + 1) * G <= np.where(fired, t2, np.inf)
        env_ += np.where(alive & np.isfinite(osc), osc, 0.0)
    envelope = epsilon**3 * g.lip * G * env_
    return float(gap[fired].mean()) if fired.any() else math.nan, float(envelope[fired].mean()) if fired.any() else math.nan


# ---------------------------------------------------------------- rate


class FitUnstable(RuntimeError):
    pass


@dataclass
class RateReport:
    epsilons: np.ndarray
    errors: np.ndarray  # sup over the query grid of |u_eps - u_bar|
    error_se: np.ndarray  # stderr at the maximizing point
    relative_errors: np.ndarray  # errors / sup |u_bar|
    slope: float
    slope_se: float
    slope_ci: tuple[float, float]
    alpha_bar: float
    alpha_se: float
    points: np.ndarray
    estimates: list = field(default_factory=list, repr=False)
    exact: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def ci_contains(self, value: float) -> bool:
        return self.slope_ci[0] <= value <= self.slope_ci[1]


def fit_rate(epsilons, errors, level: float = 0.95) -> tuple[float, float, tuple[float, float]]:
    """Least-squares slope of log(error) against log(eps) with a t-based interval."""
    from scipy.stats import t as student_t

    eps = np.asarray(epsilons, dtype=float)
    err = np.asarray(errors, dtype=float)
    ok = np.isfinite(err) & (err > 0)
    if ok.sum() < 3:
        raise FitUnstable(f"need at least 3 usable epsilons, got {int(ok.sum())}")
    res = linregress(np.log(eps[ok]), np.log(err[ok]))
    dof = int(ok.sum()) - 2
    h = float(student_t.ppf(0.5 + level / 2, dof)) * res.stderr
    return float(res.slope), float(res.stderr), (float(res.slope - h), float(res.slope + h))


def query_grid(domain: Domain, n: int = 5, shrink: float = 0.9) -> np.ndarray:
    """Points on the first axis from the center out to ``shrink`` times the inner radius, plus off-axis points."""
    c = np.asarray(getattr(domain, "center", np.zeros(domain.d)), dtype=float)
    r = float(domain.dist_to_complement(c[None, :])[0]) if domain.contains(c[None, :])[0] else None
    if r is None:
        # annulus-like: walk out along the first axis to the middle of the shell
        r_in = getattr(domain, "r1", 0.0)
        r_out = getattr(domain, "r2", domain.bounding_radius)
        rs = np.linspace(r_in + 0.1 * (r_out - r_in), r_out - 0.1 * (r_out - r_in), n)
    else:
        rs = np.linspace(0.0, shrink * r, n)
    pts = np.zeros((n, domain.d)) + c
    pts[:, 0] += rs
    return pts


def _estimate_job(args) -> UEstimate:
    *head, control = args
    return estimate_u_eps(*head, control_alpha=control)


def rate_experiment(env: Environment, domain: Domain, epsilons, f, g, paths: int, dt_rel: float = 1e-3,
                    dt_max: float | None = None, seed: int = 0, points=None, alpha_bar: float | None = None,
                    alpha_scale=None, alpha_paths: int = 10_000, control_variate: bool = False,
                    bridge: bool = True, max_time_rel: float | None = None, h: float | None = None,
                    mapper=map) -> RateReport:
    """sup_x |u_eps(x) - u_bar(x)| over a query grid for each eps, and the log-log slope.

    ``mapper`` evaluates the per-eps estimates (``map`` or a pool's map);
    each eps has its own random streams, so the result does not depend on it.
    """
    eps = np.asarray(epsilons, dtype=float)
    if len(eps) < 3:
        raise FitUnstable("need at least 3 epsilons")
    if np.any(np.diff(eps) >= 0):
        raise ValueError("epsilons must be strictly decreasing")
    f = get_function(f)
    g = get_function(g)
    pts = query_grid(domain) if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    a_se = 0.0
    if alpha_bar is None:
        if env.is_trivial:
            alpha_bar = 1.0
        else:
            if control_variate:
                # unstopped paths on the finest eps step, against the same-noise Brownian motion
                L = float(getattr(alpha_scale, "L", alpha_scale))
                dt_a = min(L * L / 256, micro_dt(float(eps[-1]), dt_rel, dt_max))
                a = estimate_alpha(local_window(env, 0.0, 4 * L), L, paths=alpha_paths, dt=dt_a, seed=seed,
                                   n=getattr(alpha_scale, "n", None), control=True)
            else:
                a = estimate_alpha(env, alpha_scale, paths=alpha_paths, seed=seed)
            alpha_bar, a_se = a.value, a.stderr
    sol = solve_homogenized(domain, alpha_bar, g.solver_data(), f.solver_data(), h=h)
    exact = np.asarray(sol(pts), dtype=float)
    scale = max(float(np.max(np.abs(exact))), 1e-300)
    errs, ses = [], []
    jobs = [(env, domain, float(e), f, g, pts, paths, dt_rel, dt_max, max_time_rel, seed, bridge,
             alpha_bar if control_variate else None) for e in eps]
    ests = list(mapper(_estimate_job, jobs))
    for est in ests:
        dev = np.abs(est.values - exact)
        i = int(np.argmax(dev))
        errs.append(float(dev[i]))
        ses.append(float(est.stderr[i]))
    errs = np.array(errs)
    slope, sse, ci = fit_rate(eps, errs)
    return RateReport(eps, errs, np.array(ses), errs / scale, slope, sse, ci, float(alpha_bar), a_se, pts, ests, exact)


def homogenized_exit_scale(domain: Domain, alpha: float = 1.0) -> float:
    return max_mean_exit(domain, alpha)
