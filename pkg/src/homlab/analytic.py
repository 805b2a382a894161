"""Closed-form Brownian quantities and the constant-coefficient (homogenized) solver.

Conventions: Brownian motion of variance ``alpha`` has generator
``(alpha / 2) Laplacian``.  The homogenized problem is

    (alpha_bar / 2) Laplacian u = g   in U,     u = f   on the boundary,

whose probabilistic solution is ``u(x) = E[f(W_tau) - int_0^tau g(W_s) ds]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import quad

from .domain import Annulus, Ball, Domain, InvalidDelta


class InvalidRadii(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- annulus exit times


@dataclass(frozen=True)
class AnnulusExit:
    """Mean exit time u(r) = c1 + c2 r^(2-d) - r^2 / (d alpha) from A_{r1, r2}.

    Solves ``1 + (alpha/2) Laplacian u = 0`` with ``u(r1) = u(r2) = 0``.
    """

    r1: float
    r2: float
    alpha: float = 1.0
    d: int = 3

    def __post_init__(self):
        if not 0 < self.r1 < self.r2:
            raise InvalidRadii(f"need 0 < r1 < r2, got ({self.r1}, {self.r2})")
        if self.d < 3:
            raise InvalidRadii("the radial formula needs d >= 3")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def _pref(self) -> float:
        return 1.0 / (self.d * self.alpha)

    @property
    def c1(self) -> float:
        p = 2 - self.d
        r1, r2 = self.r1, self.r2
        return self._pref * (r1**2 * r2**p - r2**2 * r1**p) / (r2**p - r1**p)

    @property
    def c2(self) -> float:
        p = 2 - self.d
        r1, r2 = self.r1, self.r2
        return self._pref * (r2**2 - r1**2) / (r2**p - r1**p)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return self.c1 + self.c2 * r ** (2 - self.d) - self._pref * r**2

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        return self.c2 * (2 - self.d) * r ** (1 - self.d) - 2 * self._pref * r

    def second_derivative(self, r):
        r = np.asarray(r, dtype=float)
        return self.c2 * (2 - self.d) * (1 - self.d) * r ** (-self.d) - 2 * self._pref

    @property
    def linear_constant(self) -> float:
        """C with u(r) <= C (r - r1) on [r1, r2].

        Taylor expansion at r1: the first-order coefficient of the r^(2-d)
        term; the remaining terms are non-positive because c2 < 0.
        """
        return self.c2 * (2 - self.d) * self.r1 ** (1 - self.d)

    @property
    def peak_radius(self) -> float:
        # u'(r) = 0  <=>  c2 (2-d) r^(-d) = 2 / (d alpha)
        return (self.c2 * (2 - self.d) / (2 * self._pref)) ** (1.0 / self.d)


def annulus_mean_exit(r1: float, r2: float, alpha: float, d: int, r: float) -> float:
    if not r1 <= r <= r2:
        raise InvalidRadii(f"start radius {r} outside [{r1}, {r2}]")
    return float(AnnulusExit(r1, r2, alpha, d)(r))


@dataclass(frozen=True)
class BoundaryBound:
    bound: float
    delta: float
    r1: float
    r2: float
    r_eval: float
    slope: float  # the Taylor constant of the comparison annulus
    epsilon: float = 1.0


def boundary_exit_linear_bound(domain: Domain, delta: float, alpha: float, epsilon: float = 1.0) -> BoundaryBound:
    """Comparison bound for sup E[tau] over points within ``delta`` of the boundary.

    ``delta`` is measured in the units of ``domain`` (U).  With ``epsilon``
    < 1 the bound refers to the dilated domain U/epsilon and ``delta`` is in
    dilated units: E[tau^eps] <= eps^-2 * bound(U, eps * delta).

    Construction: inflate U by delta; U_delta has an exterior ball of radius
    r1 = r0 - delta at each boundary point and is contained in the annulus
    A_{r1, r2} about the ball's center with r2 = 2 (R_U + delta) + r1.  A
    point within delta of the boundary of U lies within 2 delta of the
    boundary of U_delta, so the annulus mean exit time at radius
    r1 + 2 delta dominates by comparison.
    """
    du = delta * epsilon
    if not 0 < du < domain.r0 / 2:
        raise InvalidDelta(f"need 0 < delta < r0/2 in domain units, got {du}")
    r1 = domain.r0 - du
    r2 = 2 * (domain.bounding_radius + du) + r1
    ann = AnnulusExit(r1, r2, alpha, domain.d)
    r_eval = min(r1 + 2 * du, ann.peak_radius)
    val = float(ann(r_eval))
    return BoundaryBound(
        bound=val / epsilon**2, delta=delta, r1=r1, r2=r2, r_eval=r_eval,
        slope=ann.linear_constant, epsilon=epsilon,
    )


# ---------------------------------------------------------------- heat kernel


@dataclass(frozen=True)
class HeatKernel:
    """Gaussian transition density of variance alpha at time t."""

    alpha: float
    t: float
    d: int = 3

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        s2 = self.alpha * self.t
        r2 = np.sum((x - y) ** 2, axis=-1)
        return (2 * math.pi * s2) ** (-self.d / 2) * np.exp(-r2 / (2 * s2))

    def radial_mass(self, radius: float) -> float:
        """Mass inside the ball of given radius, by one-dimensional quadrature."""
        s2 = self.alpha * self.t
        surf = 2 * math.pi ** (self.d / 2) / math.gamma(self.d / 2)
        f = lambda r: surf * r ** (self.d - 1) * (2 * math.pi * s2) ** (-self.d / 2) * math.exp(-r * r / (2 * s2))
        return quad(f, 0.0, radius, epsabs=1e-13, epsrel=1e-12, limit=200)[0]

    def smooth(self, f: Callable, x, order: int = 12) -> np.ndarray:
        """Gaussian expectation E f(x + sqrt(alpha t) Z) by tensor Gauss-Hermite quadrature."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        nodes, weights = np.polynomial.hermite_e.hermegauss(order)
        weights = weights / math.sqrt(2 * math.pi)
        grids = np.meshgrid(*([nodes] * self.d), indexing="ij")
        offs = np.stack([g.ravel() for g in grids], axis=1) * math.sqrt(self.alpha * self.t)
        w = np.prod(np.stack(np.meshgrid(*([weights] * self.d), indexing="ij")), axis=0).ravel()
        out = np.empty(len(x))
        for i, p in enumerate(x):
            out[i] = np.dot(w, f(p + offs))
        return out


# ---------------------------------------------------------------- homogenized solver


@dataclass(frozen=True)
class Radial:
    """A radial function about a center, given by its profile h(r)."""

    profile: Callable[[float], float]
    center: tuple[float, ...] | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        c = np.zeros(x.shape[-1]) if self.center is None else np.asarray(self.center)
        r = np.linalg.norm(x - c, axis=-1)
        return np.vectorize(self.profile, otypes=[float])(r)


class RadialSolution:
    """Exact radial solution on a ball or annulus, evaluated by quadrature."""

    def __init__(self, domain, alpha_bar: float, g_profile, f_inner: float, f_outer: float):
        self.domain = domain
        self.alpha_bar = alpha_bar
        self.g = g_profile
        self.d = domain.d
        self.center = np.asarray(domain.center)
        self.f_outer = f_outer
        if isinstance(domain, Ball):
            self.r_lo, self.r_hi = 0.0, domain.radius
            self.c1, self.c2 = f_outer - self._particular(self.r_hi), 0.0
        else:
            self.r_lo, self.r_hi = domain.r1, domain.r2
            p = 2 - self.d
            # u = P(r) + c1 + c2 r^p with P(r_lo) = 0
            a = np.array([[1.0, self.r_lo**p], [1.0, self.r_hi**p]])
            rhs = np.array([f_inner, f_outer - self._particular(self.r_hi)])
            self.c1, self.c2 = np.linalg.solve(a, rhs)

    def _particular(self, r: float) -> float:
        """P(r) = (2/alpha) int_{r_lo}^r s^(d-1) g(s) (s^(2-d) - r^(2-d)) / (d-2) ds."""
        if r <= self.r_lo:
            return 0.0
        d = self.d
        k = lambda s: s ** (d - 1) * self.g(s) * (s ** (2 - d) - r ** (2 - d)) / (d - 2)
        val = quad(k, self.r_lo, r, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        return 2.0 / self.alpha_bar * val

    def radial(self, r: float) -> float:
        p = 2 - self.d
        extra = self.c2 * r**p if self.c2 != 0.0 else 0.0
        return self._particular(r) + self.c1 + extra

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.linalg.norm(x - self.center, axis=1)
        return np.array([self.radial(float(v)) for v in r])

    def to_csv(self, path, n: int = 101) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "value"])
            for r in np.linspace(self.r_lo, self.r_hi, n):
                w.writerow([repr(float(r)), repr(self.radial(float(r)))])


class GridSolution:
    """Finite-difference solution on the interior nodes of a Cartesian grid."""

    def __init__(self, domain, h, nodes, values, residual):
        self.domain = domain
        self.h = h
        self.nodes = nodes
        self.values = values
        self.residual = residual

    def __call__(self, x):
        """Value at the nearest grid node (x should be a grid node)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dist = np.linalg.norm(self.nodes[None, :, :] - x[:, None, :], axis=2)
        return self.values[np.argmin(dist, axis=1)]

    def to_csv(self, path) -> None:
        d = self.nodes.shape[1]
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*[f"x{i}" for i in range(d)], "value"])
            for p, v in zip(self.nodes, self.values):
                w.writerow([*[repr(float(c)) for c in p], repr(float(v))])


def solve_radial(domain, alpha_bar: float, g_profile, f_outer: float, f_inner: float = 0.0) -> RadialSolution:
    if alpha_bar <= 0:
        raise ValueError("alpha_bar must be positive")
    if not isinstance(domain, (Ball, Annulus)):
        raise TypeError("radial solves need a ball or an annulus")
    return RadialSolution(domain, alpha_bar, g_profile, f_inner, f_outer)


def solve_grid(domain: Domain, alpha_bar: float, g: Callable, f: Callable, h: float, tol: float = 1e-8) -> GridSolution:
    """Second-order finite differences with Shortley-Weller cut-cell stencils.

    Where a grid neighbour falls outside U the stencil uses the boundary
    crossing along the grid line at distance theta*h and imposes f there.
    """
    d = domain.d
    R = domain.bounding_radius
    n = int(math.ceil(R / h)) + 1
    ax = np.arange(-n, n + 1) * h
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    inside = domain.contains(grid)
    nodes = grid[inside]
    m = len(nodes)
    if m == 0:
        raise SolverFailure("grid too coarse: no interior nodes")
    shape = (2 * n + 1,) * d
    number = -np.ones(grid.shape[0], dtype=np.int64)
    number[inside] = np.arange(m)
    number = number.reshape(shape)
    ijk = np.argwhere(inside.reshape(shape))

    rows, cols, vals = [], [], []
    rhs = np.asarray(g(nodes), dtype=float) * (2.0 / alpha_bar)
    diag = np.zeros(m)
    for axis in range(d):
        e = np.zeros(d, dtype=np.int64)
        e[axis] = 1
        arms = []
        for sign in (-1, 1):
            nb = ijk + sign * e
            valid = np.all((nb >= 0) & (nb < 2 * n + 1), axis=1)
            idx = np.full(m, -1, dtype=np.int64)
            idx[valid] = number[tuple(nb[valid].T)]
            theta = np.ones(m)
            bval = np.zeros(m)
            for i in np.nonzero(idx < 0)[0]:
                y = nodes[i] + sign * h * e
                t = max(domain.boundary_crossing(nodes[i], y), 1e-6)
                theta[i] = t
                bval[i] = float(np.asarray(f((nodes[i] + sign * t * h * e)[None, :]))[0])
            arms.append((idx, theta, bval))
        (il, tl, bl), (ir, tr, br) = arms
        hl, hr = tl * h, tr * h
        cl = 2.0 / (hl * (hl + hr))
        cr = 2.0 / (hr * (hl + hr))
        diag -= cl + cr
        for idx, c, bv in ((il, cl, bl), (ir, cr, br)):
            inn = idx >= 0
            rows.append(np.nonzero(inn)[0])
            cols.append(idx[inn])
            vals.append(c[inn])
            rhs[~inn] -= c[~inn] * bv[~inn]
    rows.append(np.arange(m))
    cols.append(np.arange(m))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
    u = spla.spsolve(A.tocsc(), rhs)
    res = float(np.max(np.abs(A @ u - rhs)) / max(np.max(np.abs(rhs)), 1e-300))
    if not np.all(np.isfinite(u)) or res > tol:
        raise SolverFailure(f"linear solve residual {res:.3e} above {tol}")
    return GridSolution(domain, h, nodes, u, res)


def solve_homogenized(domain, alpha_bar: float, g, f, h: float | None = None):
    """Solve (alpha_bar/2) Laplacian u = g, u = f on the boundary.

    Radial data (instances of :class:`Radial`, or constants) on a ball or
    annulus centered at the data's center use the exact radial solver;
    everything else goes to the grid solver with spacing ``h``.
    """
    def as_radial(v):
        if isinstance(v, (int, float)):
            return (lambda r, c=float(v): c), None
        if isinstance(v, Radial):
            return v.profile, v.center
        return None, None

    gp, gc = as_radial(g)
    fp, fc = as_radial(f)
    same_center = all(
        c is None or np.allclose(c, getattr(domain, "center", c)) for c in (gc, fc)
    )
    if isinstance(domain, (Ball, Annulus)) and gp is not None and fp is not None and same_center:
        if isinstance(domain, Ball):
            return solve_radial(domain, alpha_bar, gp, fp(domain.radius))
        return solve_radial(domain, alpha_bar, gp, fp(domain.r2), fp(domain.r1))
    if h is None:
        raise ValueError("non-radial data needs a grid spacing h")
    gf = g if callable(g) and not isinstance(g, (int, float)) else (lambda x, c=float(g): np.full(len(x), c))
    ff = f if callable(f) and not isinstance(f, (int, float)) else (lambda x, c=float(f): np.full(len(x), c))
    return solve_grid(domain, alpha_bar, gf, ff, h)


def max_mean_exit(domain, alpha: float, h: float | None = None) -> float:
    """sup_x E[tau_U] for Brownian motion of variance alpha."""
    sol = solve_homogenized(domain, alpha, -1.0, 0.0, h=h)
    if isinstance(sol, RadialSolution):
        if isinstance(domain, Ball):
            return sol.radial(0.0)
        rs = np.linspace(domain.r1, domain.r2, 2001)
        return float(max(sol.radial(float(r)) for r in rs))
    return float(np.max(sol.values))


def alpha_perturbation_gap(domain, alpha_bar: float, alpha_n: float, g_sup: float, h: float | None = None) -> float:
    """Envelope for sup |u_bar - u_bar_n| when alpha_bar is replaced by alpha_n.

    The difference solves (alpha_bar/2) Laplacian w = g (alpha_n - alpha_bar)/alpha_n
    with zero data, so |w| <= |g|_inf |alpha_n - alpha_bar| / alpha_n * sup E[tau];
    with alpha_n >= alpha_bar / 2 this is at most the returned
    2 |g|_inf |alpha_n - alpha_bar| / alpha_bar * sup E[tau].
    """
    if alpha_n == alpha_bar:
        return 0.0
    return 2.0 * g_sup * abs(alpha_n - alpha_bar) / alpha_bar * max_mean_exit(domain, alpha_bar, h)
