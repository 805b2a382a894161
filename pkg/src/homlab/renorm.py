"""Renormalization observables: rescaled Hoelder norms, cutoffs, the operators
R_n and R_bar_n, the effective diffusivity alpha_n, and event diagnostics.

Scales are passed either as a :class:`~homlab.schedule.ScaleRow` or as a bare
length ``L``.  Monte Carlo parameters default to an Euler-Maruyama step of
``L^2 / 256``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng
from .analytic import HeatKernel
from .environ import Environment
from .schedule import ScaleRow, ScaleTable
from .walk import ExcursionRule, Quenched, SimConfig, Wiener, simulate

DT_FRAC = 1.0 / 256


def _L(scale) -> float:
    return float(scale.L) if isinstance(scale, ScaleRow) else float(scale)


# ---------------------------------------------------------------- Hoelder norms


@dataclass
class FieldSample:
    """Values of a scalar function on a point cloud plus the pairs to difference."""

    points: np.ndarray
    values: np.ndarray
    L: float
    beta: float = 0.5
    pairs: np.ndarray | None = None  # (P, 2) indices; None means all pairs
    n: int | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(self.points) < 2 or len(self.values) != len(self.points):
            raise ValueError("a field sample needs at least 2 points with one value each")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        if self.pairs is not None:
            self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def with_values(self, values) -> "FieldSample":
        return FieldSample(self.points, values, self.L, self.beta, self.pairs, self.n)

    def pair_index(self) -> tuple[np.ndarray, np.ndarray]:
        if self.pairs is not None:
            return self.pairs[:, 0], self.pairs[:, 1]
        i, j = np.triu_indices(len(self.points), k=1)
        return i, j


def holder_seminorm(sample: FieldSample) -> float:
    i, j = sample.pair_index()
    dist = np.linalg.norm(sample.points[i] - sample.points[j], axis=1)
    ok = dist > 0
    if not ok.any():
        return 0.0
    q = np.abs(sample.values[i[ok]] - sample.values[j[ok]]) / dist[ok] ** sample.beta
    return float(sample.L**sample.beta * q.max())


def holder_norm(sample: FieldSample) -> float:
    """Sampled |f|_n = sup|f| + L^beta sup |f(x) - f(y)| / |x - y|^beta.

    Both suprema run over the sample only, so the result is a lower bound
    of the norm over the whole space.
    """
    return float(np.max(np.abs(sample.values))) + holder_seminorm(sample)


def make_cloud(center, radius: float, d: int = 3, n_grid: int = 5, n_pairs: int = 64,
               n_levels: int = 4, seed: int = 0):
    """Grid points in the cube around ``center`` plus random pairs at dyadic separations.

    Returns ``(points, pairs)``.  Grid pairs are nearest neighbours along the
    axes; random pairs have separations ``radius * 2^-k`` for k < n_levels.
    """
    center = np.asarray(center, dtype=float)
    ax = np.linspace(-radius, radius, n_grid) / math.sqrt(d)
    g = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d) + center
    shape = (n_grid,) * d
    ids = np.arange(len(g)).reshape(shape)
    pairs = []
    for axis in range(d):
        a = np.take(ids, np.arange(n_grid - 1), axis=axis).ravel()
        b = np.take(ids, np.arange(1, n_grid), axis=axis).ravel()
        pairs.append(np.stack([a, b], axis=1))
    m = n_pairs * n_levels
    key = rng.derive_key(seed, rng.TAG_CLOUD)
    u = rng.uniforms(key, np.arange(m * (2 * d + 1), dtype=np.uint64)).reshape(m, 2 * d + 1)
    z = np.sqrt(-2 * np.log(1 - u[:, :d])) * np.cos(2 * np.pi * u[:, d:2 * d])
    direction = z / np.linalg.norm(z, axis=1, keepdims=True)
    # base points uniform in the ball of radius radius / 2
    zb = np.roll(z, 1, axis=1)
    base = zb / np.linalg.norm(zb, axis=1, keepdims=True) * (0.5 * radius * u[:, 2 * d:] ** (1.0 / d))
    sep = radius * 2.0 ** -np.repeat(np.arange(n_levels), n_pairs)
    p = center + base
    q = p + sep[:, None] * direction
    k0 = len(g)
    rp = np.arange(m)
    pairs.append(np.stack([k0 + 2 * rp, k0 + 2 * rp + 1], axis=1))
    pts = np.concatenate([g, np.stack([p, q], axis=1).reshape(-1, d)])
    return pts, np.concatenate(pairs)


# ---------------------------------------------------------------- cutoffs


def chi(y) -> np.ndarray:
    """1 ^ (2 - |y|)_+ applied to points y of shape (..., d)."""
    r = np.linalg.norm(np.asarray(y, dtype=float), axis=-1)
    return np.minimum(1.0, np.maximum(2.0 - r, 0.0))


@dataclass(frozen=True)
class CutoffFn:
    """chi((y - center) / v); equal to 1 on B_v(center) and 0 off B_2v(center)."""

    center: tuple[float, ...]
    v: float

    @classmethod
    def at_scale(cls, center, L: float, d: int = 3) -> "CutoffFn":
        return cls(tuple(float(c) for c in center), 30.0 * math.sqrt(d) * L)

    def __call__(self, y):
        return chi((np.asarray(y, dtype=float) - np.asarray(self.center)) / self.v)


# ---------------------------------------------------------------- the operators


@dataclass
class OperatorValues:
    values: np.ndarray
    stderr: np.ndarray
    paths: int


def _endpoints(process, x, L: float, paths: int, dt: float | None, seed: int, key=None):
    """Endpoints X_{L^2} of ``paths`` paths from each query point, shape (n_x, paths, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    T = L * L
    dt = T * DT_FRAC if dt is None else dt
    nx = len(x)
    ids = np.arange(nx * paths, dtype=np.uint64)
    x0 = np.repeat(x, paths, axis=0)
    cfg = SimConfig(dt=dt, max_time=T, seed=seed)
    batch = simulate(process, x0, cfg, (), key=key, path_ids=ids)
    return batch.final.reshape(nx, paths, -1)


def _summarize(vals: np.ndarray, paths: int) -> OperatorValues:
    se = vals.std(axis=1, ddof=1) / math.sqrt(paths) if paths > 1 else np.full(len(vals), np.inf)
    return OperatorValues(vals.mean(axis=1), se, paths)


def apply_Rn(env: Environment, f: Callable, scale, x, paths: int = 256, dt: float | None = None,
             seed: int = 0) -> OperatorValues:
    """R_n f(x) = E_x f(X_{L^2}) for the quenched diffusion, by Monte Carlo."""
    L = _L(scale)
    ends = _endpoints(Quenched(env), x, L, paths, dt, seed)
    vals = np.asarray(f(ends.reshape(-1, ends.shape[-1])), dtype=float).reshape(ends.shape[:2])
    return _summarize(vals, paths)


def apply_Rbarn(alpha: float, f: Callable, scale, x, method: str = "quadrature", paths: int = 256,
                dt: float | None = None, seed: int = 0, order: int = 16) -> OperatorValues:
    """R_bar_n f(x) = E f(x + sqrt(alpha) L Z), Z standard normal.

    ``method="quadrature"`` uses tensor Gauss-Hermite quadrature (stderr 0);
    it is accurate for f smooth on the scale sqrt(alpha) L and converges
    slowly for kinked f, where ``method="crn"`` is the better choice.
    ``method="crn"`` sums the same Gaussian increments that :func:`apply_Rn`
    with the same ``seed`` and ``dt`` uses, so the two estimates share their
    randomness.
    """
    L = _L(scale)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if method == "quadrature":
        vals = HeatKernel(alpha, L * L, x.shape[1]).smooth(f, x, order=order)
        return OperatorValues(vals, np.zeros(len(x)), 0)
    if method != "crn":
        raise ValueError(f"unknown method {method!r}")
    ends = _endpoints(Wiener(alpha, x.shape[1]), x, L, paths, dt, seed)
    vals = np.asarray(f(ends.reshape(-1, ends.shape[-1])), dtype=float).reshape(ends.shape[:2])
    return _summarize(vals, paths)


@dataclass
class ControlCheck:
    lhs: float
    rhs: float
    allowance: float
    passed: bool
    f_norm: float


def control_holder_check(env: Environment, scale, x, f: Callable, alpha: float = 1.0, beta: float = 0.5,
                         delta: float | None = None, paths: int = 128, dt: float | None = None,
                         seed: int = 0, cloud=None, z_allow: float = 3.0) -> ControlCheck:
    """Compare |chi_{n,x} (R_n - R_bar_n) f|_n with L^-delta |f|_n on a point cloud.

    The cloud defaults to :func:`make_cloud` on B_{60 sqrt(d) L}(x).  Both
    operators use common random numbers.  The allowance is the sampled norm
    of ``z_allow`` standard errors of the difference.
    """
    L = _L(scale)
    d = env.d
    delta = 5.0 * beta / 32.0 if delta is None else delta
    x = np.asarray(x, dtype=float)
    if cloud is None:
        cloud = make_cloud(x, 60.0 * math.sqrt(d) * L, d=d, n_grid=3, n_pairs=8, n_levels=4, seed=seed)
    pts, pairs = cloud
    fs = FieldSample(pts, f(pts), L, beta, pairs)
    f_norm = holder_norm(fs)
    rhs = L ** (-delta) * f_norm
    ends_q = _endpoints(Quenched(env), pts, L, paths, dt, seed)
    ends_g = _endpoints(Wiener(alpha, d), pts, L, paths, dt, seed)
    fq = np.asarray(f(ends_q.reshape(-1, d)), dtype=float).reshape(ends_q.shape[:2])
    fg = np.asarray(f(ends_g.reshape(-1, d)), dtype=float).reshape(ends_g.shape[:2])
    diff = fq - fg
    s = diff.mean(axis=1)
    se = diff.std(axis=1, ddof=1) / math.sqrt(paths) if paths > 1 else np.zeros(len(pts))
    cut = CutoffFn.at_scale(x, L, d)(pts)
    lhs = holder_norm(fs.with_values(cut * s))
    err = fs.with_values(cut * z_allow * se)
    # the allowance bounds the norm of any perturbation within z_allow stderr per point
    i, j = err.pair_index()
    dist = np.linalg.norm(pts[i] - pts[j], axis=1)
    ok = dist > 0
    spread = (err.values[i[ok]] + err.values[j[ok]]) / dist[ok] ** beta
    allowance = float(err.values.max() + (L**beta * spread.max() if ok.any() else 0.0))
    return ControlCheck(lhs, rhs, allowance, bool(lhs <= rhs + allowance), f_norm)


# ---------------------------------------------------------------- effective diffusivity


@dataclass
class AlphaEstimate:
    n: int | None
    value: float
    stderr: float
    paths: int
    L: float
    stopped_fraction: float = 0.0  # paths halted by the excursion stop before L^2
    nu: float | None = None

    @property
    def admissible(self) -> bool | None:
        """Whether the estimate lies in [1/(2 nu), 2 nu]; a flag, never an assertion."""
        if self.nu is None:
            return None
        return 1.0 / (2 * self.nu) <= self.value <= 2 * self.nu


def alpha_from_displacements(disp, L: float, n: int | None = None, stopped=None, nu=None) -> AlphaEstimate:
    """alpha_hat = mean |X - x0|^2 / (d L^2) from displacement vectors of shape (N, d)."""
    disp = np.asarray(disp, dtype=float)
    N, d = disp.shape
    v = np.sum(disp * disp, axis=1) / (d * L * L)
    se = float(v.std(ddof=1) / math.sqrt(N)) if N > 1 else math.inf
    frac = float(np.mean(stopped)) if stopped is not None else 0.0
    return AlphaEstimate(n, float(v.mean()), se, N, L, frac, nu)


def estimate_alpha(process, scale, paths: int = 10_000, x0=None, radius: float | None = None,
                   dt: float | None = None, seed: int = 0, n: int | None = None,
                   control: bool = False) -> AlphaEstimate:
    """Estimate alpha_n from X_{L^2 ^ T_n}, T_n the first time the excursion reaches ``radius``.

    ``process`` is an :class:`Environment` (quenched diffusion) or any walk
    process such as :class:`~homlab.walk.Wiener`.  ``radius`` defaults to
    D_tilde_n when ``scale`` is a schedule row, and to no stop otherwise.

    With ``control`` the unstopped displacement is compared path by path with
    a standard Brownian motion driven by the same Gaussian increments, whose
    mean square displacement d L^2 is known exactly:
    alpha_hat = 1 + mean(|X|^2 - |W|^2) / (d L^2).  Requires ``radius=None``
    explicitly when ``scale`` is a schedule row.
    """
    if isinstance(process, Environment):
        nu = process.spec.nu
        process = Quenched(process)
    else:
        nu = None
    L = _L(scale)
    if isinstance(scale, ScaleRow):
        n = scale.n if n is None else n
        radius = scale.D_tilde if radius is None else radius
    d = process.d
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    T = L * L
    cfg = SimConfig(dt=T * DT_FRAC if dt is None else dt, max_time=T, seed=seed)
    rules = [ExcursionRule(radius)] if radius is not None else []
    # independent increments at each scale index
    key = rng.derive_key(seed, rng.TAG_PATH, 0 if n is None else n + 1)
    batch = simulate(process, x0, cfg, rules, n_paths=paths, key=key)
    stopped = batch.fired("excursion") if rules else None
    if not control:
        return alpha_from_displacements(batch.final - x0, L, n, stopped, nu)
    if rules:
        raise ValueError("the Brownian control needs unstopped paths (radius=None)")
    ref = simulate(Wiener(1.0, d), x0, cfg, [], n_paths=paths, key=key)
    dx, dw = batch.final - x0, ref.final - x0
    v = (np.sum(dx * dx, axis=1) - np.sum(dw * dw, axis=1)) / (d * T)
    se = float(v.std(ddof=1) / math.sqrt(paths)) if paths > 1 else math.inf
    return AlphaEstimate(n, 1.0 + float(v.mean()), se, paths, L, 0.0, nu)


# ---------------------------------------------------------------- event diagnostic


@dataclass
class DiagnosticRow:
    center: tuple[float, ...]
    m: int
    control: str
    lhs: float
    rhs: float
    passed: bool


@dataclass
class EventReport:
    rows: list[DiagnosticRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def frequency(self, control: str | None = None) -> float:
        sel = [r.passed for r in self.rows if control is None or r.control == control]
        return float(np.mean(sel)) if sel else math.nan

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["center", "m", "control", "lhs", "rhs", "pass"])
            for r in self.rows:
                w.writerow([" ".join(repr(c) for c in r.center), r.m, r.control, repr(r.lhs), repr(r.rhs), int(r.passed)])


def localization_check(env: Environment, row: ScaleRow, center, paths: int = 2000, dt: float | None = None,
                       seed: int = 0, z: float = 1.96):
    """P(X*_{L^2} >= D) against exp(-1) with a one-sided CLT margin.

    Returns ``(p_hat, bound, passed)``; passes when p_hat - z * se <= bound.
    """
    T = float(row.L) ** 2
    cfg = SimConfig(dt=T * DT_FRAC if dt is None else dt, max_time=T, seed=seed)
    batch = simulate(Quenched(env), np.asarray(center, dtype=float), cfg, [ExcursionRule(row.D)], n_paths=paths)
    p = float(np.mean(batch.fired("excursion")))
    se = math.sqrt(max(p * (1 - p), 1.0 / paths) / paths)
    bound = math.exp(-1.0)
    return p, bound, bool(p - z * se <= bound)


def event_An_diagnostic(env: Environment, table: ScaleTable, n: int, centers: Sequence, m_range=None,
                        controls: Sequence[str] = ("localization",), paths: int = 1000, alpha: float = 1.0,
                        f: Callable | None = None, seed: int = 0, max_centers: int = 50) -> EventReport:
    """Per-center, per-scale pass/fail of the localization and Hoelder controls.

    ``m_range`` defaults to n - mbar .. n + 2 (clipped to the table).
    """
    centers = [np.asarray(c, dtype=float) for c in centers][:max_centers]
    if m_range is None:
        m_range = range(max(n - table.mbar, 0), min(n + 2, len(table) - 1) + 1)
    report = EventReport()
    for ci, c in enumerate(centers):
        for m in m_range:
            row = table[m]
            s = seed + 7919 * ci + m
            if "localization" in controls:
                p, bound, ok = localization_check(env, row, c, paths=paths, seed=s)
                report.rows.append(DiagnosticRow(tuple(c), m, "localization", p, bound, ok))
            if "holder" in controls:
                g = f if f is not None else _default_test_function(row.L)
                chk = control_holder_check(env, row, c, g, alpha=alpha, beta=table.params.beta,
                                           delta=table.delta, paths=max(paths // 10, 16), seed=s)
                report.rows.append(DiagnosticRow(tuple(c), m, "holder", chk.lhs, chk.rhs + chk.allowance, chk.passed))
    return report


def _default_test_function(L: float):
    w = 2.0 * math.pi / (10.0 * L)
    return lambda x: np.cos(w * np.asarray(x)[..., 0])
