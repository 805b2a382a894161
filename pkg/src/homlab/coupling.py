"""Coupled chains of the quenched one-step kernel and the Gaussian kernel.

One chain step from the pair (x, x_bar): draw ``batch`` endpoints from each
kernel, match the two clouds by a cost-minimizing perfect matching under
(|x - y| / L)^beta, and pick one matched pair uniformly at random.  Since the
pick is independent of the samples and the matching is a bijection, the picked
X is a uniform choice among iid kernel draws and so has the kernel law
exactly; the same holds for X_bar.

Both kernels consume the same Gaussian increments (common random numbers), so
at eta = 0 the two clouds coincide and the matching cost vanishes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import ks_2samp

from . import rng
from .environ import Environment
from .schedule import ScaleTable
from .walk import Quenched, SimConfig, Wiener, simulate

EXACT_MAX = 64
SUBSTEPS = 256


class TooFewChains(ValueError):
    pass


@dataclass(frozen=True)
class KernelSampler:
    """One-step kernel over time L^2: quenched EM with ``substeps`` steps, or Gaussian."""

    kind: str
    L: float
    env: Environment | None = None
    alpha: float = 1.0
    d: int = 3
    substeps: int = SUBSTEPS

    def __post_init__(self):
        if self.kind not in ("quenched", "gaussian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "quenched":
            if self.env is None:
                raise ValueError("a quenched kernel needs an environment")
            object.__setattr__(self, "d", self.env.d)

    @classmethod
    def quenched(cls, env: Environment, L: float, substeps: int = SUBSTEPS) -> "KernelSampler":
        return cls("quenched", float(L), env=env, substeps=substeps)

    @classmethod
    def gaussian(cls, alpha: float, L: float, d: int = 3, substeps: int = SUBSTEPS) -> "KernelSampler":
        return cls("gaussian", float(L), alpha=alpha, d=d, substeps=substeps)

    @property
    def process(self):
        return Quenched(self.env) if self.kind == "quenched" else Wiener(self.alpha, self.d)

    @property
    def constant(self) -> bool:
        """Constant coefficients: the endpoint is x plus a scaled sum of the substep normals."""
        return self.kind == "gaussian" or self.env.is_trivial

    @property
    def scale(self) -> float:
        a = self.alpha if self.kind == "gaussian" else 1.0
        return math.sqrt(a * self.L * self.L / self.substeps)

    def normal_sums(self, ids, key) -> np.ndarray:
        return rng.NormalStream(key, self.d).draw_sum(np.asarray(ids, dtype=np.uint64), 0, self.substeps)

    def draw(self, x, ids, key, sums=None) -> np.ndarray:
        """One endpoint per stream id, started from the rows of x (broadcast).

        Substep k of stream i uses the normal ``(key, i, k)``; constant
        coefficient kernels add up the same normals in one pass (``sums``
        may pass them in precomputed).
        """
        ids = np.asarray(ids, dtype=np.uint64)
        x0 = np.broadcast_to(np.asarray(x, dtype=float), (len(ids), self.d))
        if self.constant:
            if sums is None:
                sums = self.normal_sums(ids, key)
            return x0 + self.scale * sums
        T = self.L * self.L
        cfg = SimConfig(dt=T / self.substeps, max_time=T)
        return simulate(self.process, x0, cfg, (), key=key, path_ids=ids).final


# ---------------------------------------------------------------- matching


def cost_matrix(a, b, L: float, beta: float) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return (np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) / L) ** beta


@nb.njit(cache=True)
def _greedy(c, order):
    n = c.shape[0]
    perm = -np.ones(n, dtype=np.int64)
    used = np.zeros(n, dtype=np.bool_)
    left = n
    for flat in order:
        i = flat // n
        j = flat % n
        if perm[i] < 0 and not used[j]:
            perm[i] = j
            used[j] = True
            left -= 1
            if left == 0:
                break
    return perm


def match(a, b, L: float = 1.0, beta: float = 1.0, exact_max: int = EXACT_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Perfect matching of cloud a to cloud b; returns ``(perm, costs)``.

    Exact assignment up to ``exact_max`` points, greedy cheapest-pair-first
    above.  In one dimension the sorted (quantile) matching is exact for any
    beta <= 1 cost and is used at every size.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    n = len(a)
    if len(b) != n:
        raise ValueError("clouds must have the same size")
    if a.shape[1] == 1:
        perm = np.empty(n, dtype=np.int64)
        perm[np.argsort(a[:, 0], kind="stable")] = np.argsort(b[:, 0], kind="stable")
    else:
        c = cost_matrix(a, b, L, beta)
        if n <= exact_max:
            _, perm = linear_sum_assignment(c)
        else:
            perm = _greedy(c, np.argsort(c, axis=None, kind="stable"))
    costs = (np.linalg.norm(a - b[perm], axis=1) / L) ** beta
    return perm, costs


# ---------------------------------------------------------------- chain steps


@dataclass
class StepResult:
    x: np.ndarray
    xbar: np.ndarray
    cost: float  # d(x, xbar) for the picked pair
    mean_cost: float  # empirical transport cost of the whole matching


def couple_step(ks_q: KernelSampler, ks_g: KernelSampler, x, xbar, batch: int, seed: int = 0,
                stream: int = 0, beta: float = 0.5, exact_max: int = EXACT_MAX) -> StepResult:
    """A single coupled step from (x, xbar); ``stream`` indexes independent steps."""
    if batch < 2:
        raise ValueError("batch must be at least 2")
    key = rng.derive_key(seed, rng.TAG_COUPLE)
    ids = np.uint64(stream) * np.uint64(batch) + np.arange(batch, dtype=np.uint64)
    a = ks_q.draw(np.asarray(x, dtype=float), ids, key)
    b = ks_g.draw(np.asarray(xbar, dtype=float), ids, key)
    perm, costs = match(a, b, ks_q.L, beta, exact_max)
    u = rng.uniforms(rng.derive_key(seed, rng.TAG_SELECT), np.array([stream], dtype=np.uint64))[0]
    i = min(int(u * batch), batch - 1)
    return StepResult(a[i], b[perm[i]], float(costs[i]), float(costs.mean()))


@dataclass
class CoupledChain:
    x0: np.ndarray
    X: np.ndarray  # (K + 1, d)
    Xbar: np.ndarray
    cost: np.ndarray  # (K,) picked-pair cost per step
    mean_cost: np.ndarray  # (K,) matching cost per step
    L: float
    beta: float

    @property
    def K(self) -> int:
        return len(self.cost)

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.X - self.Xbar, axis=1)

    def failure_step(self, gamma: float) -> int | None:
        hit = np.nonzero(self.distance[1:] >= gamma)[0]
        return int(hit[0]) + 1 if len(hit) else None


@dataclass
class ChainBatch:
    """Many independent chains from the same start, stored as arrays."""

    x0: np.ndarray
    X: np.ndarray  # (C, K + 1, d)
    Xbar: np.ndarray
    cost: np.ndarray  # (C, K)
    mean_cost: np.ndarray
    L: float
    beta: float
    horizon_fraction: float = math.nan  # K over the full horizon 2 (L_{n+2} / L)^2

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.cost.shape[1]

    def chain(self, i: int) -> CoupledChain:
        return CoupledChain(self.x0, self.X[i], self.Xbar[i], self.cost[i], self.mean_cost[i], self.L, self.beta)

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.X - self.Xbar, axis=2)

    def failed(self, gamma: float) -> np.ndarray:
        if self.K == 0:
            return np.zeros(len(self), dtype=bool)
        return np.any(self.distances()[:, 1:] >= gamma, axis=1)

    def to_csv(self, path, gamma: float) -> None:
        dist = self.distances()
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "K", "max_pair_distance", "failure_step"])
            for i in range(len(self)):
                hit = np.nonzero(dist[i, 1:] >= gamma)[0]
                w.writerow([i, self.K, repr(float(dist[i].max())), int(hit[0]) + 1 if len(hit) else ""])


def run_chains(ks_q: KernelSampler, ks_g: KernelSampler, x, K: int, batch: int, n_chains: int,
               seed: int = 0, beta: float = 0.5, exact_max: int = EXACT_MAX) -> ChainBatch:
    """``n_chains`` coupled chains of K steps from (x, x); kernels are sampled for all chains at once."""
    if batch < 2:
        raise ValueError("batch must be at least 2")
    d = ks_q.d
    x = np.asarray(x, dtype=float)
    X = np.empty((n_chains, K + 1, d))
    Xb = np.empty_like(X)
    X[:, 0] = x
    Xb[:, 0] = x
    cost = np.zeros((n_chains, K))
    mcost = np.zeros((n_chains, K))
    if n_chains * batch * max(K, 1) >= 2**32:
        raise ValueError("too many draws for the 32-bit stream ids")
    key = rng.derive_key(seed, rng.TAG_COUPLE)
    skey = rng.derive_key(seed, rng.TAG_SELECT)
    for k in range(K):
        ids = (np.uint64(k * n_chains * batch) + np.arange(n_chains * batch, dtype=np.uint64))
        sums = ks_q.normal_sums(ids, key) if (ks_q.constant and ks_g.constant) else None
        a = ks_q.draw(np.repeat(X[:, k], batch, axis=0), ids, key, sums).reshape(n_chains, batch, d)
        b = ks_g.draw(np.repeat(Xb[:, k], batch, axis=0), ids, key, sums).reshape(n_chains, batch, d)
        u = rng.uniforms(skey, np.arange(n_chains, dtype=np.uint64), counter=k)
        pick = np.minimum((u * batch).astype(np.int64), batch - 1)
        for c in range(n_chains):
            perm, costs = match(a[c], b[c], ks_q.L, beta, exact_max)
            i = pick[c]
            X[c, k + 1] = a[c, i]
            Xb[c, k + 1] = b[c, perm[i]]
            cost[c, k] = costs[i]
            mcost[c, k] = costs.mean()
    return ChainBatch(x, X, Xb, cost, mcost, ks_q.L, beta)


def run_coupled_chain(env: Environment, table: ScaleTable, n: int, x, K: int, batch: int = 64,
                      n_chains: int = 100, alpha: float = 1.0, seed: int = 0,
                      substeps: int = SUBSTEPS) -> ChainBatch:
    """Chains at the coarse scale L_{n - mbar} of the schedule."""
    L = float(table.coarse(n).L)
    ks_q = KernelSampler.quenched(env, L, substeps)
    ks_g = KernelSampler.gaussian(alpha, L, env.d, substeps)
    out = run_chains(ks_q, ks_g, x, K, batch, n_chains, seed, table.params.beta)
    if n + 2 < len(table):
        out.horizon_fraction = K / (2.0 * (table[n + 2].L / L) ** 2)
    return out


# ---------------------------------------------------------------- failure statistics


@dataclass
class FailureRate:
    rate: float
    stderr: float
    chains: int
    gamma: float


def coupling_failure_rate(chains: ChainBatch, gamma: float) -> FailureRate:
    if len(chains) < 30:
        raise TooFewChains(f"need at least 30 chains, got {len(chains)}")
    f = chains.failed(gamma)
    p = float(f.mean())
    return FailureRate(p, math.sqrt(p * (1 - p) / len(f)), len(f), gamma)


def chebyshev_check(chains: ChainBatch, gamma: float) -> tuple[float, float, bool]:
    """rate (gamma / L)^beta <= sum_k mean (|X_k - X_bar_k| / L)^beta.

    The union bound plus Markov's inequality hold for the empirical measure
    itself, so the comparison is exact on any data.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lhs = float(chains.failed(gamma).mean()) * (gamma / chains.L) ** chains.beta
    dist = chains.distances()[:, 1:]
    rhs = float(np.sum(np.mean((dist / chains.L) ** chains.beta, axis=0)))
    return lhs, rhs, bool(lhs <= rhs * (1 + 1e-12))


def corollary_envelope(table: ScaleTable, n: int, C: float = 1.0) -> float:
    """C kappa_tilde L^(16 a - delta) at the coarse scale, with C a free constant."""
    row = table.coarse(n)
    return C * row.kappa_tilde * float(row.L) ** (16 * table.params.a - table.delta)


@dataclass
class MarginalTest:
    coordinate: str  # "X" or "X_bar"
    axis: int
    statistic: float
    pvalue: float


def marginal_ks(chains: ChainBatch, ks_q: KernelSampler, ks_g: KernelSampler, seed: int = 0,
                level: float = 0.01) -> tuple[list[MarginalTest], bool]:
    """Two-sample KS tests of the first chain step against direct kernel draws.

    Each coordinate of X_1 is compared with fresh quenched-kernel endpoints
    and each coordinate of X_bar_1 with fresh Gaussian endpoints; the fresh
    draws use their own stream key.  The family passes when every p-value
    clears ``level`` divided by the number of tests.
    """
    n = len(chains)
    x = np.broadcast_to(chains.x0, (n, ks_q.d))
    key = rng.derive_key(seed, rng.TAG_CLOUD, 2)
    ids = np.arange(n, dtype=np.uint64)
    ref = {"X": ks_q.draw(x, ids, key), "X_bar": ks_g.draw(x, ids, key)}
    got = {"X": chains.X[:, 1], "X_bar": chains.Xbar[:, 1]}
    tests = []
    for name in ("X", "X_bar"):
        for i in range(ks_q.d):
            r = ks_2samp(got[name][:, i], ref[name][:, i])
            tests.append(MarginalTest(name, i, float(r.statistic), float(r.pvalue)))
    ok = all(t.pvalue >= level / len(tests) for t in tests)
    return tests, ok
