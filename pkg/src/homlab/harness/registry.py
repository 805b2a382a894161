"""Named boundary data f and sources g with known norms.

Each entry carries its sup-norm, Lipschitz constant and modulus of
continuity, so rate envelopes are evaluable, and radial entries expose a
profile for the exact radial solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..analytic import Radial


@dataclass(frozen=True)
class NamedFunction:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    sup: float
    lip: float
    params: dict = field(default_factory=dict)
    profile: Callable[[float], float] | None = None  # radial profile about the origin

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.fn(x), dtype=float)

    def modulus(self, r: float) -> float:
        """sigma_f(r) = sup_{|x - y| <= r} |f(x) - f(y)|."""
        return min(self.lip * r, 2.0 * self.sup)

    @property
    def is_constant(self) -> bool:
        return self.lip == 0.0

    def solver_data(self):
        """Argument for :func:`~homlab.analytic.solve_homogenized`: a constant, a Radial, or the callable."""
        if self.is_constant:
            return float(self.params.get("c", 0.0))
        if self.profile is not None:
            return Radial(self.profile)
        return self.fn


def _const(c: float = 0.0) -> NamedFunction:
    c = float(c)
    return NamedFunction("const", lambda x: np.full(x.shape[:-1], c), abs(c), 0.0, {"c": c}, lambda r: c)


def _coord(i: int = 0, R: float = 2.0) -> NamedFunction:
    """R tanh(x_i / R): a smoothly clipped coordinate function."""
    i = int(i)
    R = float(R)
    return NamedFunction("coord", lambda x: R * np.tanh(x[..., i] / R), R, 1.0, {"i": i, "R": R})


def _bump(r: float = 1.0, h: float = 1.0) -> NamedFunction:
    """h (1 - |x|^2 / r^2)_+^2, radial about the origin."""
    r, h = float(r), float(h)

    def prof(s):
        t = max(1.0 - s * s / (r * r), 0.0)
        return h * t * t

    def fn(x):
        t = np.maximum(1.0 - np.sum(x * x, axis=-1) / (r * r), 0.0)
        return h * t * t

    # max of |d/ds| at s = r / sqrt(3)
    lip = h * 8.0 / (3.0 * math.sqrt(3.0) * r)
    return NamedFunction("bump", fn, abs(h), abs(lip), {"r": r, "h": h}, prof)


def _radial_cos(k: float = 1.0, h: float = 1.0) -> NamedFunction:
    k, h = float(k), float(h)
    return NamedFunction(
        "radial_cos", lambda x: h * np.cos(k * np.linalg.norm(x, axis=-1)), abs(h), abs(h * k),
        {"k": k, "h": h}, lambda s: h * math.cos(k * s),
    )


REGISTRY: dict[str, Callable[..., NamedFunction]] = {
    "const": _const,
    "zero": lambda: _const(0.0),
    "one": lambda: _const(1.0),
    "minus_one": lambda: _const(-1.0),
    "coord": _coord,
    "bump": _bump,
    "radial_cos": _radial_cos,
}


def get_function(spec) -> NamedFunction:
    """Look up ``"name"``, ``{"name": ..., **params}`` or pass a NamedFunction through."""
    if isinstance(spec, NamedFunction):
        return spec
    if isinstance(spec, str):
        name, params = spec, {}
    else:
        params = dict(spec)
        name = params.pop("name")
    if name not in REGISTRY:
        raise KeyError(f"unknown function {name!r}; known: {sorted(REGISTRY)}")
    return REGISTRY[name](**params)


def describe(fn: NamedFunction) -> dict:
    return {"name": fn.name, **fn.params}
