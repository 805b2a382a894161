"""Bounded domains with an exterior ball condition, their dilations and enlargements.

Points are handled in batches: every query accepts an array of shape
``(..., d)`` and returns an array of shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq


class InvalidDelta(ValueError):
    pass


def _radius(x, center):
    y = np.asarray(x, dtype=float) - np.asarray(center)
    return np.sqrt(np.einsum("...i,...i->...", y, y))


class Domain:
    """Common interface.  Subclasses define ``signed_distance``."""

    d: int
    r0: float

    def signed_distance(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def bounding_radius(self) -> float:
        raise NotImplementedError

    def contains(self, x) -> np.ndarray:
        return self.signed_distance(x) < 0.0

    def dist_to_complement(self, x) -> np.ndarray:
        return np.maximum(-self.signed_distance(x), 0.0)

    def dist_to_domain(self, x) -> np.ndarray:
        return np.maximum(self.signed_distance(x), 0.0)

    def enlarge(self, delta: float) -> "Domain":
        raise NotImplementedError

    def dilate(self, factor: float) -> "Domain":
        raise NotImplementedError

    def boundary_crossing(self, x, y) -> float:
        """Fraction t in (0, 1] with x + t (y - x) on the boundary, x inside, y outside."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        phi = lambda t: float(self.signed_distance(x + t * (y - x)))
        if phi(1.0) == 0.0:
            return 1.0
        return brentq(phi, 0.0, 1.0, xtol=1e-14, rtol=1e-14)

    def project(self, x) -> np.ndarray:
        """Nearest boundary point, from the gradient of the signed distance."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sd = self.signed_distance(x)
        g = self._sd_gradient(x)
        return x - sd[:, None] * g

    def _sd_gradient(self, x, h: float = 1e-6) -> np.ndarray:
        g = np.empty_like(x)
        for i in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[i] = h
            g[:, i] = (self.signed_distance(x + e) - self.signed_distance(x - e)) / (2 * h)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.where(n > 0, n, 1.0)


@dataclass(frozen=True)
class Ball(Domain):
    radius: float
    d: int = 3
    center: tuple[float, ...] | None = None
    r0: float | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.center is None:
            object.__setattr__(self, "center", (0.0,) * self.d)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != self.d:
            raise ValueError("center has the wrong dimension")
        if self.r0 is None:
            object.__setattr__(self, "r0", float(self.radius))

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def signed_distance(self, x):
        return _radius(x, self.center) - self.radius

    def enlarge(self, delta: float) -> "Ball":
        if not 0 < delta < self.r0:
            raise InvalidDelta(f"need 0 < delta < r0 = {self.r0}, got {delta}")
        return replace(self, radius=self.radius + delta, r0=self.r0 - delta)

    def dilate(self, factor: float) -> "Ball":
        if factor <= 0:
            raise ValueError("dilation factor must be positive")
        return Ball(self.radius * factor, self.d, tuple(c * factor for c in self.center), self.r0 * factor)

    def boundary_crossing(self, x, y) -> float:
        return _sphere_crossing(x, y, self.center, self.radius, outward=True)


@dataclass(frozen=True)
class Annulus(Domain):
    r1: float
    r2: float
    d: int = 3
    center: tuple[float, ...] | None = None
    r0: float | None = None

    def __post_init__(self):
        if not 0 < self.r1 < self.r2:
            raise ValueError("need 0 < r1 < r2")
        if self.center is None:
            object.__setattr__(self, "center", (0.0,) * self.d)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.r0 is None:
            # the hole only admits exterior balls of radius <= r1
            object.__setattr__(self, "r0", float(self.r1))

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + self.r2

    def signed_distance(self, x):
        r = _radius(x, self.center)
        return np.maximum(self.r1 - r, r - self.r2)

    def enlarge(self, delta: float) -> "Annulus":
        if not 0 < delta < self.r0:
            raise InvalidDelta(f"need 0 < delta < r0 = {self.r0}, got {delta}")
        return replace(self, r1=self.r1 - delta, r2=self.r2 + delta, r0=self.r0 - delta)

    def dilate(self, factor: float) -> "Annulus":
        if factor <= 0:
            raise ValueError("dilation factor must be positive")
        return Annulus(
            self.r1 * factor, self.r2 * factor, self.d, tuple(c * factor for c in self.center), self.r0 * factor
        )

    def boundary_crossing(self, x, y) -> float:
        r = float(_radius(y, self.center))
        if r >= self.r2:
            return _sphere_crossing(x, y, self.center, self.r2, outward=True)
        return _sphere_crossing(x, y, self.center, self.r1, outward=False)


@dataclass(frozen=True)
class SdfDomain(Domain):
    """A domain given by a signed-distance oracle (negative inside).

    ``r0`` and ``bounding_radius`` are declared by the caller; the exterior
    ball condition can only be certified by sampling, see
    :func:`certify_exterior_ball`.
    """

    sdf: Callable[[np.ndarray], np.ndarray]
    r0: float
    radius_bound: float
    d: int = 3
    offset: float = 0.0
    scale: float = 1.0
    name: str = field(default="sdf")

    @property
    def bounding_radius(self) -> float:
        return self.radius_bound

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * np.asarray(self.sdf(x / self.scale)) - self.offset

    def enlarge(self, delta: float) -> "SdfDomain":
        if not 0 < delta < self.r0:
            raise InvalidDelta(f"need 0 < delta < r0 = {self.r0}, got {delta}")
        return replace(
            self, offset=self.offset + delta, r0=self.r0 - delta, radius_bound=self.radius_bound + delta
        )

    def dilate(self, factor: float) -> "SdfDomain":
        if factor <= 0:
            raise ValueError("dilation factor must be positive")
        return replace(
            self,
            scale=self.scale * factor,
            offset=self.offset * factor,
            r0=self.r0 * factor,
            radius_bound=self.radius_bound * factor,
        )


def _sphere_crossing(x, y, center, radius, outward: bool) -> float:
    x = np.asarray(x, dtype=float) - np.asarray(center)
    y = np.asarray(y, dtype=float) - np.asarray(center)
    v = y - x
    a = v @ v
    b = 2 * (x @ v)
    c = x @ x - radius * radius
    disc = max(b * b - 4 * a * c, 0.0)
    sq = np.sqrt(disc)
    # outward: x inside the sphere (c < 0), take the positive root
    t = (-b + sq) / (2 * a) if outward else (-b - sq) / (2 * a)
    return float(min(max(t, 0.0), 1.0))


def certify_exterior_ball(dom: Domain, n_samples: int = 200, seed: int = 0, tol: float = 1e-6) -> bool:
    """Sampled check that each boundary point is touched by an outside ball of radius r0."""
    rng = np.random.default_rng(seed)
    R = dom.bounding_radius
    pts = rng.uniform(-R, R, size=(n_samples * 4, dom.d))
    pts = pts[np.abs(dom.signed_distance(pts)) < 0.5 * R][:n_samples]
    if len(pts) == 0:
        return True
    for _ in range(3):
        pts = dom.project(pts)
    normals = dom._sd_gradient(pts)
    centers = pts + dom.r0 * normals
    return bool(np.all(dom.signed_distance(centers) >= dom.r0 - tol * max(1.0, R)))
