"""Deterministic multiscale constants: length scales, log-log factors, offsets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path


class ScheduleError(ValueError):
    pass


class InvalidParams(ScheduleError):
    pass


class DegenerateSchedule(ScheduleError):
    """The length recursion collapsed (some ell_n < 5)."""


class OutOfRange(ScheduleError):
    pass


@dataclass(frozen=True)
class ScaleParams:
    d: int = 3
    beta: float = 0.5
    a: float = 0.5
    L0: int = 25
    c0: float = 1.0
    strict_paper_mode: bool = False
    # offset used when the admissible formula is undefined (12a + a^2 >= 1)
    mbar: int | None = None

    def validate(self) -> None:
        if int(self.d) != self.d or self.d < 3:
            raise InvalidParams(f"dimension must be an integer >= 3, got {self.d}")
        if not 0.0 < self.beta <= 0.5:
            raise InvalidParams(f"beta must lie in (0, 1/2], got {self.beta}")
        if self.a <= 0.0:
            raise InvalidParams(f"a must be positive, got {self.a}")
        if self.strict_paper_mode:
            if self.a > self.beta / (1000 * self.d):
                raise InvalidParams("strict mode requires a <= beta / (1000 d)")
            if self.mbar is not None:
                raise InvalidParams("strict mode computes mbar; no override allowed")
        elif self.a >= 1.0:
            raise InvalidParams(f"a must lie in (0, 1), got {self.a}")
        if int(self.L0) != self.L0 or self.L0 < 5 or self.L0 % 5:
            raise InvalidParams(f"L0 must be a positive multiple of 5, got {self.L0}")
        if self.c0 <= 0.0:
            raise InvalidParams(f"c0 must be positive, got {self.c0}")
        if self.mbar is not None and self.mbar < 1:
            raise InvalidParams("mbar must be a positive integer")


@dataclass(frozen=True)
class ScaleRow:
    n: int
    L: int
    ell: int
    kappa: float
    kappa_tilde: float
    D: float
    D_tilde: float


@dataclass(frozen=True)
class ScaleTable:
    params: ScaleParams
    rows: tuple[ScaleRow, ...]
    delta: float
    m0: int
    M0: float
    mbar: int

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, n: int) -> ScaleRow:
        if n < 0:
            raise IndexError(f"scale index must be >= 0, got {n}")
        return self.rows[n]

    def coarse(self, n: int) -> ScaleRow:
        """Row n - mbar, the scale of the discrete skeleton."""
        k = n - self.mbar
        if k < 0:
            raise OutOfRange(f"n={n} is below mbar={self.mbar}")
        return self.rows[k]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "L_n", "ell_n", "kappa_n", "kappa_tilde_n", "D_n", "D_tilde_n"])
            for r in self.rows:
                w.writerow([r.n, r.L, r.ell, repr(r.kappa), repr(r.kappa_tilde), repr(r.D), repr(r.D_tilde)])


def compute_mbar(a: float) -> int:
    """Smallest integer strictly above 1 - log(1 - 12a - a^2) / log(1 + a)."""
    arg = 1.0 - 12.0 * a - a * a
    if a <= 0.0 or arg <= 0.0:
        raise InvalidParams(f"mbar undefined for a={a}: need 12a + a^2 < 1")
    t = 1.0 - math.log(arg) / math.log1p(a)
    return math.floor(t) + 1


def compute_m0(a: float) -> int:
    m0 = 2 + math.floor(math.log(100.0) / math.log1p(a))
    # guard the float floor against boundary rounding
    while (1 + a) ** (m0 - 2) > 100:
        m0 -= 1
    while not 100 < (1 + a) ** (m0 - 1):
        m0 += 1
    return max(m0, 2)


def _loglog(L: int) -> float:
    return math.log(math.log(L))


def _pow_a(L: int, a: float) -> float:
    try:
        return float(L) ** a
    except OverflowError:
        # math.log accepts arbitrarily large ints
        return math.exp(a * math.log(L))


def _ell(L: int, a: float) -> int:
    # tolerate rounding so that e.g. 25^0.5 counts as exactly 5
    q = _pow_a(L, a) / 5.0
    return 5 * math.floor(q * (1 + 1e-12))


def build_schedule(params: ScaleParams, n_max: int) -> ScaleTable:
    params.validate()
    if n_max < 0:
        raise InvalidParams("n_max must be >= 0")
    a, c0 = params.a, params.c0
    rows = []
    L = int(params.L0)
    for n in range(n_max + 1):
        ell = _ell(L, a)
        if ell < 5:
            raise DegenerateSchedule(
                f"ell_{n} = {ell}: L_{n}^a = {_pow_a(L, a):.4g} < 5, the recursion collapses"
            )
        ll = _loglog(L)
        kappa = math.exp(c0 * ll * ll)
        kappa_t = math.exp(2.0 * c0 * ll * ll)
        rows.append(ScaleRow(n, L, ell, kappa, kappa_t, float(L) * kappa, float(L) * kappa_t))
        L = ell * L
    m0 = compute_m0(a)
    try:
        mbar = compute_mbar(a)
    except InvalidParams:
        if params.strict_paper_mode:
            raise
        mbar = 1
    if params.mbar is not None:
        mbar = params.mbar
    return ScaleTable(
        params=params,
        rows=tuple(rows),
        delta=5.0 * params.beta / 32.0,
        m0=m0,
        M0=100.0 * params.d * (1 + a) ** (m0 + 2),
        mbar=mbar,
    )


def locate_scale(table: ScaleTable, epsilon: float) -> int:
    """The unique n with L_n <= 1/epsilon < L_{n+1}."""
    if epsilon <= 0:
        raise OutOfRange("epsilon must be positive")
    inv = 1.0 / epsilon
    near = round(inv)
    # 1/(1/k) is not always exactly k in floating point
    if abs(inv - near) <= 1e-9 * max(1.0, abs(inv)):
        inv = near
    # the last stored row only brackets the one before it
    if inv < table.rows[0].L or inv >= table.rows[-1].L:
        raise OutOfRange(
            f"1/epsilon = {inv} outside [{table.rows[0].L}, {table.rows[-1].L})"
        )
    for r in reversed(table.rows):
        if r.L <= inv:
            return r.n
    raise OutOfRange("unreachable")
