"""Random environments (A(x), b(x)) built from lattice noise and a compact radial kernel.

Construction
------------
Nodes sit on the shifted lattice ``shift + s Z^d`` with a uniform shift in
``[0, s)^d``.  Each node z carries i.i.d. standard normals: a vector
``xi_z`` (drift channels) and a matrix ``G_z`` (diffusion channels), all
drawn from a counter-based generator keyed by the seed and the node index.
With the kernel ``K(y) = (1 - |y|^2/rho^2)^3`` on ``|y| <= rho``::

    b(x) = eta / sqrt(d) * tanh(sum_z K(x - z) xi_z)                (componentwise)
    M(x) = sum_z K(x - z) (G_z + G_z^T) / sqrt(2)
    A(x) = I + eta / sqrt(d) * tanh(M(x))                            (spectrally)

so ``|b| < eta`` and ``|A - I|_F < eta``.  The symmetric Gaussian node
matrices have an orthogonally invariant law, which makes the field
isotropic under axis-preserving orthogonal maps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from . import rng

KERNEL_LIP = 96.0 / (25.0 * math.sqrt(5.0))  # sup |K'| times rho


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    d: int = 3
    eta: float = 0.0
    range_R: float = 3.5
    lattice_spacing: float = 1.0
    kernel_radius: float = 1.2
    seed: int = 0

    def validate(self) -> None:
        if self.d < 1:
            raise InvalidSpec("dimension must be positive")
        if not 0.0 <= self.eta < 0.5:
            raise InvalidSpec(f"eta must lie in [0, 1/2), got {self.eta}")
        if self.lattice_spacing <= 0 or self.kernel_radius <= 0:
            raise InvalidSpec("lattice spacing and kernel radius must be positive")
        if 2 * self.kernel_radius + self.lattice_spacing > self.range_R:
            raise InvalidSpec("need 2 rho + s <= range_R for finite-range dependence")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")

    @property
    def nu(self) -> float:
        """Ellipticity constant: (1/nu) I <= A <= nu I."""
        return 1.0 / (1.0 - self.eta)


# ---------------------------------------------------------------- kernels


@nb.njit(cache=True, inline="always")
def _pack(z, bits):
    off = np.int64(1) << np.int64(bits - 1)
    packed = np.uint64(0)
    for i in range(z.shape[0]):
        packed |= np.uint64(z[i] + off) << np.uint64(bits * i)
    return packed & np.uint64(0xFFFFFFFF), packed >> np.uint64(32)


@nb.njit(cache=True)
def _node_noise(keys, z, bits, out):
    c0, c1 = _pack(z, bits)
    nch = out.shape[0]
    for j in range(0, nch, 2):
        k = keys[j // 2]
        z0, z1 = rng.normal_pair(k[0], k[1], c0, c1)
        out[j] = z0
        if j + 1 < nch:
            out[j + 1] = z1


@nb.njit(cache=True)
def _fill_window(keys, lo, shape, bits, table):
    d = lo.shape[0]
    z = np.empty(d, dtype=np.int64)
    for idx in range(table.shape[0]):
        rem = idx
        for i in range(d - 1, -1, -1):
            z[i] = lo[i] + rem % shape[i]
            rem //= shape[i]
        _node_noise(keys, z, bits, table[idx])


@nb.njit(cache=True)
def _raw_fields(x, shift, s, rho, keys, bits, win_lo, win_shape, win_table, out_B, out_M):
    n, d = x.shape
    r = rho / s
    w = int(math.floor(2.0 * r)) + 1
    nch = d + d * d
    total = w**d
    start = np.empty(d, dtype=np.int64)
    z = np.empty(d, dtype=np.int64)
    noise = np.empty(nch)
    rho2 = rho * rho
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for p in range(n):
        for i in range(d):
            start[i] = int(math.ceil((x[p, i] - shift[i]) / s - r))
            out_B[p, i] = 0.0
            for j in range(d):
                out_M[p, i, j] = 0.0
        for m in range(total):
            rem = m
            dist2 = 0.0
            for i in range(d - 1, -1, -1):
                z[i] = start[i] + rem % w
                rem //= w
                diff = x[p, i] - shift[i] - z[i] * s
                dist2 += diff * diff
            if dist2 >= rho2:
                continue
            t = 1.0 - dist2 / rho2
            kval = t * t * t
            inside = win_table.shape[0] > 0
            lin = 0
            for i in range(d):
                off = z[i] - win_lo[i]
                if off < 0 or off >= win_shape[i]:
                    inside = False
                    break
                lin = lin * win_shape[i] + off
            if inside:
                for c in range(nch):
                    noise[c] = win_table[lin, c]
            else:
                _node_noise(keys, z, bits, noise)
            for i in range(d):
                out_B[p, i] += kval * noise[i]
            for i in range(d):
                for j in range(i, d):
                    g = kval * (noise[d + i * d + j] + noise[d + j * d + i]) * inv_sqrt2
                    out_M[p, i, j] += g
                    if j != i:
                        out_M[p, j, i] += g


@nb.njit(cache=True)
def _jacobi_eigh(a, vals, vecs):
    """Cyclic Jacobi on a small symmetric matrix; a is overwritten."""
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            vecs[i, j] = 1.0 if i == j else 0.0
    for sweep in range(50):
        off = 0.0
        scale = 0.0
        for i in range(d):
            scale += a[i, i] * a[i, i]
            for j in range(i + 1, d):
                off += a[i, j] * a[i, j]
        if off <= 1e-30 * (scale + 1e-300):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                for k in range(d):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - sn * akq
                    a[k, q] = sn * akp + c * akq
                for k in range(d):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - sn * aqk
                    a[q, k] = sn * apk + c * aqk
                for k in range(d):
                    vkp = vecs[k, p]
                    vkq = vecs[k, q]
                    vecs[k, p] = c * vkp - sn * vkq
                    vecs[k, q] = sn * vkp + c * vkq
    for i in range(d):
        vals[i] = a[i, i]


@nb.njit(cache=True)
def _spectral_coeffs(M, c, out_sigma, out_A, want_A):
    n, d, _ = M.shape
    a = np.empty((d, d))
    vals = np.empty(d)
    vecs = np.empty((d, d))
    fs = np.empty(d)
    fa = np.empty(d)
    for p in range(n):
        for i in range(d):
            for j in range(d):
                a[i, j] = M[p, i, j]
        _jacobi_eigh(a, vals, vecs)
        for k in range(d):
            t = math.tanh(vals[k])
            fs[k] = math.sqrt(1.0 + c * t)
            fa[k] = c * t
        for i in range(d):
            for j in range(i, d):
                ss = 0.0
                sa = 0.0
                for k in range(d):
                    v = vecs[i, k] * vecs[j, k]
                    ss += v * fs[k]
                    sa += v * fa[k]
                out_sigma[p, i, j] = ss
                out_sigma[p, j, i] = ss
                if want_A:
                    aij = sa + (1.0 if i == j else 0.0)
                    out_A[p, i, j] = aij
                    out_A[p, j, i] = aij


# ---------------------------------------------------------------- environment


@dataclass(frozen=True, eq=False)
class Environment:
    """An evaluable realization.  Immutable; ``windowed`` returns a cached copy."""

    spec: EnvSpec
    shift: np.ndarray
    _keys: np.ndarray = field(repr=False)
    _win_lo: np.ndarray = field(repr=False)
    _win_shape: np.ndarray = field(repr=False)
    _win_table: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def eta(self) -> float:
        return self.spec.eta

    @property
    def is_trivial(self) -> bool:
        return self.spec.eta == 0.0

    @property
    def n_channels(self) -> int:
        return self.d + self.d * self.d

    @property
    def _bits(self) -> int:
        return 64 // self.d

    def node_noise(self, z) -> np.ndarray:
        """The (xi, G) channels at lattice node z, flattened."""
        out = np.empty(self.n_channels)
        _node_noise(self._keys, np.asarray(z, dtype=np.int64), self._bits, out)
        return out

    def contributing_nodes(self, x) -> set[tuple[int, ...]]:
        """Lattice nodes whose kernel support contains x."""
        s, rho = self.spec.lattice_spacing, self.spec.kernel_radius
        y = (np.asarray(x, dtype=float) - self.shift) / s
        r = rho / s
        lo = np.ceil(y - r).astype(int)
        hi = np.floor(y + r).astype(int)
        nodes = set()
        for z in np.ndindex(*(hi - lo + 1)):
            z = lo + np.array(z)
            if np.sum((x - self.shift - z * s) ** 2) < rho * rho:
                nodes.add(tuple(int(v) for v in z))
        return nodes

    def windowed(self, lo, hi) -> "Environment":
        """Copy with node noise precomputed over the box [lo, hi] (plus kernel margin)."""
        s, rho = self.spec.lattice_spacing, self.spec.kernel_radius
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.d,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.d,))
        zlo = np.floor((lo - self.shift - rho) / s).astype(np.int64)
        zhi = np.ceil((hi - self.shift + rho) / s).astype(np.int64)
        shape = (zhi - zlo + 1).astype(np.int64)
        table = np.empty((int(np.prod(shape)), self.n_channels))
        if not self.is_trivial:
            _fill_window(self._keys, zlo, shape, self._bits, table)
        return Environment(self.spec, self.shift, self._keys, zlo, shape, table)

    def raw_fields(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        n = x.shape[0]
        B = np.empty((n, self.d))
        M = np.empty((n, self.d, self.d))
        _raw_fields(
            x, self.shift, self.spec.lattice_spacing, self.spec.kernel_radius, self._keys, self._bits,
            self._win_lo, self._win_shape, self._win_table, B, M,
        )
        return B, M

    def drift(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.is_trivial:
            return np.zeros_like(x, dtype=float)
        B, _ = self.raw_fields(x)
        return self.eta / math.sqrt(self.d) * np.tanh(B)

    def coefficients(self, x, want_A: bool = True):
        """Batched ``(A, sigma, b)`` at points x of shape (n, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        if self.is_trivial:
            eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            return (eye.copy() if want_A else None), eye, np.zeros((n, d))
        B, M = self.raw_fields(x)
        c = self.eta / math.sqrt(d)
        b = c * np.tanh(B)
        sigma = np.empty((n, d, d))
        A = np.empty((n, d, d)) if want_A else np.empty((0, d, d))
        _spectral_coeffs(M, c, sigma, A, want_A)
        return (A if want_A else None), sigma, b

    def lipschitz_bound(self, lo, hi) -> float:
        """Constant C with |A(x)-A(y)|_F + |b(x)-b(y)| <= C |x-y| for x, y in the box."""
        if self.is_trivial:
            return 0.0
        win = self.windowed(lo, hi)
        d = self.d
        xi = np.linalg.norm(win._win_table[:, :d], axis=1).max()
        G = win._win_table[:, d:].reshape(-1, d, d)
        sym = np.linalg.norm((G + G.transpose(0, 2, 1)) / math.sqrt(2.0), axis=(1, 2)).max()
        r = self.spec.kernel_radius / self.spec.lattice_spacing
        nodes = (int(math.floor(2 * r)) + 1) ** d
        grad = KERNEL_LIP / self.spec.kernel_radius * nodes
        return self.eta / math.sqrt(d) * grad * (xi + sym)

    def dump_grid_csv(self, path, lo, hi, n: int) -> None:
        axes = [np.linspace(l, h, n) for l, h in zip(np.broadcast_to(lo, (self.d,)), np.broadcast_to(hi, (self.d,)))]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        A, _, b = self.coefficients(pts)
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            head = [f"x{i}" for i in range(self.d)] + [f"b{i}" for i in range(self.d)]
            head += [f"A{i}{j}" for i in range(self.d) for j in range(self.d)]
            w.writerow(head)
            for p, bb, aa in zip(pts, b, A):
                w.writerow([repr(v) for v in (*p, *bb, *aa.ravel())])


def sample_environment(spec: EnvSpec) -> Environment:
    spec.validate()
    nch = spec.d + spec.d * spec.d
    keys = rng.key_table(rng.derive_key(spec.seed, rng.TAG_ENV), (nch + 1) // 2)
    shift = spec.lattice_spacing * rng.uniforms(rng.derive_key(spec.seed, rng.TAG_SHIFT), np.arange(spec.d))
    empty = np.zeros(spec.d, dtype=np.int64)
    return Environment(spec, shift, keys, empty, empty.copy(), np.empty((0, nch)))


def local_window(env: Environment, center, half: float, max_nodes: int = 1_000_000) -> Environment:
    """``env`` windowed on the cube center +- half, shrunk to hold at most ``max_nodes`` lattice nodes.

    Points outside the window are evaluated directly, so values never change.
    """
    if env.is_trivial:
        return env
    s, rho = env.spec.lattice_spacing, env.spec.kernel_radius
    cap = 0.5 * s * (max_nodes ** (1.0 / env.d) - 3.0) - rho
    half = min(float(half), cap)
    if half <= 0:
        return env
    c = np.broadcast_to(np.asarray(center, dtype=float), (env.d,))
    return env.windowed(c - half, c + half)


def eval_coeffs(env: Environment, x):
    """(A, sigma, b) at a single point, or batched for x of shape (n, d)."""
    x = np.asarray(x, dtype=float)
    A, sigma, b = env.coefficients(x)
    if x.ndim == 1:
        return A[0], sigma[0], b[0]
    return A, sigma, b


def trivial_environment(d: int = 3) -> Environment:
    return sample_environment(EnvSpec(d=d, eta=0.0))
