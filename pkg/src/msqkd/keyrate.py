"""Key-rate lower bounds and the exact adversary information they bound.

Rates are in bits per sifted bit.  ``exact_IAC`` builds the server's
conditional ancilla states for a concrete attack and evaluates the Holevo
quantity directly; the ``thm1_bound`` family bounds it from the ``-1``
probabilities ``<f_i|f_i>`` alone.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .channels import AttackOperator, InitialState, semi_honest_f_norms
from .quantum import binary_entropy, projector, trace_norm, von_neumann_entropy


class InconsistentObservation(ValueError):
    """Observed statistics admit no valid model parameter."""


class InconsistentInputWarning(UserWarning):
    pass


def _check_prob(x: float | None, name: str) -> float | None:
    if x is None:
        return None
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x!r}")
    return x


@dataclass(frozen=True)
class ObservedParams:
    Q: float
    Q_Z: float
    p_a: float
    p_w: float | None = None
    p_minus1_neq: float | None = None

    def __post_init__(self):
        for name in ("Q", "Q_Z", "p_a", "p_w", "p_minus1_neq"):
            object.__setattr__(self, name, _check_prob(getattr(self, name), name))


@dataclass(frozen=True)
class KeyRateReport:
    i_ab: float
    i_ac_bound: float
    rate: float
    formula_tag: str
    inputs: ObservedParams
    flags: tuple[str, ...] = ()

    @classmethod
    def build(cls, i_ab, i_ac_bound, tag, inputs, flags=()) -> "KeyRateReport":
        return cls(float(i_ab), float(i_ac_bound), float(i_ab) - float(i_ac_bound), tag, inputs, tuple(flags))


def devetak_winter(i_ab: float, i_ac: float) -> float:
    return float(i_ab) - float(i_ac)


def p_a_formula(Q: float, f_norms: Sequence[float]) -> float:
    """Probability of a '-1' announcement given both users measured."""
    f0, f1, f2, f3 = f_norms
    return 0.5 * (1 - Q) * (f0 + f1) + 0.5 * Q * (f2 + f3)


def q_z_formula(Q: float, f2: float, f3: float, p_a: float) -> float:
    """Mismatch rate of the kept rounds.  Values above 1 are clamped with a warning."""
    if p_a <= 0:
        raise ValueError("p_a must be positive")
    qz = Q * (f2 + f3) / (2 * p_a)
    if qz > 1.0:
        warnings.warn(f"Q_Z evaluates to {qz:.6g} > 1; inputs are inconsistent", InconsistentInputWarning, stacklevel=2)
        qz = 1.0
    return qz


class IACBound(NamedTuple):
    value: float   # min(tight, 1)
    tight: float   # uses all four <f_i|f_i>
    loose: float   # <f1|f1>, <f2|f2>, <f3|f3> replaced by 1
    capped: bool


def thm1_bound(Q: float, f_norms: Sequence[float], p_a: float) -> IACBound:
    """Upper bounds on I(A:C) for a symmetric attack."""
    if p_a <= 0:
        raise ValueError("p_a must be positive")
    f0, f1, f2, f3 = (max(0.0, float(x)) for x in f_norms)
    tight = (1 - Q) / p_a * math.sqrt(f0 * f1) + Q / p_a * math.sqrt(f2 * f3)
    loose = (1 - Q) / p_a * math.sqrt(f0) + Q / p_a
    return IACBound(min(tight, 1.0), tight, loose, tight > 1.0)


def conditional_states(attack: AttackOperator, Q: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Server ancilla states given A's key bit 0 / 1, and p_a."""
    f0, f1, f2, f3 = attack.f
    p_a = p_a_formula(Q, attack.f_norms)
    if p_a <= 0:
        raise ValueError("attack never announces -1 on measured rounds (p_a = 0)")
    p = 2 * p_a
    rho0 = (1 - Q) / p * projector(f0 + f1) + Q / p * projector(f2 + f3)
    rho1 = (1 - Q) / p * projector(f0 - f1) + Q / p * projector(f2 - f3)
    for rho in (rho0, rho1):
        tr = np.trace(rho).real
        if abs(tr - 1) > 1e-6:
            raise ValueError(f"conditional state has trace {tr:.9g}; the attack is not symmetric")
    return rho0, rho1, p_a


def _normalize(rho):
    return rho / np.trace(rho).real


def exact_IAC(attack: AttackOperator, Q: float) -> float:
    """Holevo information S(rho_C) - S(rho_C^0)/2 - S(rho_C^1)/2 in bits."""
    rho0, rho1, _ = conditional_states(attack, Q)
    rho0, rho1 = _normalize(rho0), _normalize(rho1)
    return (von_neumann_entropy(0.5 * (rho0 + rho1))
            - 0.5 * von_neumann_entropy(rho0) - 0.5 * von_neumann_entropy(rho1))


@dataclass(frozen=True)
class BoundChain:
    """Every link of the I(A:C) bound for one attack, in increasing order."""

    holevo: float
    half_trace_norm: float
    triangle: float
    rank2_sum: float
    tight: float
    loose: float
    rank2_slack: tuple[float, float]

    def links(self) -> dict[str, tuple[float, float]]:
        return {
            "holevo<=half_trace_norm": (self.holevo, self.half_trace_norm),
            "half_trace_norm<=triangle": (self.half_trace_norm, self.triangle),
            "triangle<=rank2_sum": (self.triangle, self.rank2_sum),
            "rank2_sum<=tight": (self.rank2_sum, self.tight),
            "tight<=loose": (self.tight, self.loose),
            "exact<=bound": (self.holevo, min(self.tight, 1.0)),
        }

    def violations(self, slack: float = 1e-9) -> list[str]:
        bad = [name for name, (lhs, rhs) in self.links().items() if lhs > rhs + slack]
        bad += [f"rank2[{i}]" for i, s in enumerate(self.rank2_slack) if s < -slack]
        return bad


def bound_chain(attack: AttackOperator, Q: float) -> BoundChain:
    rho0, rho1, p_a = conditional_states(attack, Q)
    f0, f1, f2, f3 = attack.f
    n = attack.f_norms
    sigma0 = np.outer(f0, f1.conj()) + np.outer(f1, f0.conj())
    sigma1 = np.outer(f2, f3.conj()) + np.outer(f3, f2.conj())
    t0, t1 = trace_norm(sigma0), trace_norm(sigma1)
    l0, l1 = 2 * math.sqrt(n[0] * n[1]), 2 * math.sqrt(n[2] * n[3])
    b = thm1_bound(Q, n, p_a)
    return BoundChain(
        holevo=exact_IAC(attack, Q),
        half_trace_norm=0.5 * trace_norm(rho0 - rho1),
        triangle=(1 - Q) / (2 * p_a) * t0 + Q / (2 * p_a) * t1,
        rank2_sum=(1 - Q) / (2 * p_a) * l0 + Q / (2 * p_a) * l1,
        tight=b.tight,
        loose=b.loose,
        rank2_slack=(l0 - t0, l1 - t1),
    )


def check_Q(initial: InitialState, Q: float, atol: float = 1e-8) -> float:
    """Recompute Q from the start state; warn when it disagrees with ``Q``."""
    actual = initial.Q
    if abs(actual - Q) > atol:
        warnings.warn(f"start state gives Q = {actual:.12g}, caller supplied {Q:.12g}",
                      InconsistentInputWarning, stacklevel=2)
    return actual


def estimate_q_from_pw(p: float, p_w: float) -> float:
    """Reverse-channel noise implied by the reflect-round error rate."""
    if p >= 1:
        raise ValueError("forward noise p must be < 1")
    q = (4 * p_w - p) / (1 - p)
    if -1e-12 <= q < 0:
        q = 0.0
    elif 1 < q <= 1 + 1e-12:
        q = 1.0
    if not 0.0 <= q <= 1.0:
        raise InconsistentObservation(f"p = {p:.6g}, p_w = {p_w:.6g} imply q = {q:.6g} outside [0, 1]")
    return q


class F0Bound(NamedTuple):
    value: float
    clamped: bool


def f0_upper_bound(Q: float, p_w: float, f2: float = 1.0) -> F0Bound:
    """Upper bound on sqrt(<f0|f0>) from the reflect-round error rate."""
    if Q >= 1:
        raise ValueError("Q must be < 1")
    val = math.sqrt(1 - Q) * (math.sqrt(Q * f2) + math.sqrt(p_w)) / (1 - Q)
    if val > 1.0:
        return F0Bound(1.0, True)
    return F0Bound(val, False)


def keyrate_worst_low(Q: float, Q_Z: float, p_w: float, p_a: float) -> KeyRateReport:
    """Worst-case rate using only p_w to bound <f0|f0>."""
    if p_a <= 0:
        raise ValueError("p_a must be positive")
    inputs = ObservedParams(Q=Q, Q_Z=Q_Z, p_a=p_a, p_w=p_w)
    i_ac = (math.sqrt(1 - Q) * (math.sqrt(Q) + math.sqrt(p_w)) + Q) / p_a
    return KeyRateReport.build(1 - binary_entropy(Q_Z), i_ac, "worst-low", inputs)


def keyrate_worst_high(Q: float, p_w: float, p_a: float) -> KeyRateReport:
    """Worst-case rate assuming <f2|f2>, <f3|f3> <= Q and Q_Z = Q^2/p_a."""
    if p_a <= 0:
        raise ValueError("p_a must be positive")
    flags = []
    if Q > math.sqrt(p_a / 2):
        flags.append("Q-beyond-validity")
    q_z = Q * Q / p_a
    if q_z > 1:
        raise ValueError(f"Q = {Q:.6g} gives Q_Z = Q^2/p_a = {q_z:.6g} > 1")
    inputs = ObservedParams(Q=Q, Q_Z=q_z, p_a=p_a, p_w=p_w)
    i_ac = (math.sqrt(1 - Q) * (Q + math.sqrt(p_w)) + Q * Q) / p_a
    return KeyRateReport.build(1 - binary_entropy(q_z), i_ac, "worst-high", inputs, flags)


def keyrate_semi_honest(p: float, q: float) -> KeyRateReport:
    """Rate for an honest server behind depolarizing channels (p forward, q back)."""
    for name, x in (("p", p), ("q", q)):
        if not 0.0 <= x < 1.0:
            raise ValueError(f"{name} must lie in [0, 1), got {x!r}")
    Q = p / 2
    f = semi_honest_f_norms(q)
    p_a = p_a_formula(Q, f)
    if p_a <= 0:
        raise ValueError("p_a = 0")
    q_z = q_z_formula(Q, f[2], f[3], p_a)
    bound = thm1_bound(Q, f, p_a)
    p_w = (1 - q) * p / 4 + q / 4
    inputs = ObservedParams(Q=Q, Q_Z=q_z, p_a=p_a, p_w=p_w, p_minus1_neq=q / 4)
    flags = ("bound-capped",) if bound.capped else ()
    return KeyRateReport.build(1 - binary_entropy(q_z), bound.value, "semi-honest", inputs, flags)


class Threshold(NamedTuple):
    q_star: float
    bracket: tuple[float, float]
    rates: tuple[float, float]
    crossed: bool


def find_threshold(rate_fn: Callable[[float], float], lo: float, hi: float,
                   step: float = 1e-3, tol: float = 1e-6) -> Threshold:
    """Largest Q in [lo, hi] with a non-negative rate (scan, then bisection)."""
    r_lo = rate_fn(lo)
    if not r_lo > 0:
        raise ValueError(f"rate at lo = {lo} is {r_lo:.6g}; need a positive start")
    n = int(math.floor((hi - lo) / step + 1e-9))
    grid = [lo + i * step for i in range(n + 1)]
    if grid[-1] < hi:
        grid.append(hi)
    rates = [r_lo] + [rate_fn(x) for x in grid[1:]]
    last = max(i for i, r in enumerate(rates) if r >= 0)
    if last == len(grid) - 1:
        return Threshold(hi, (hi, hi), (rates[-1], rates[-1]), False)
    a, b = grid[last], grid[last + 1]
    ra, rb = rates[last], rates[last + 1]
    while b - a > tol:
        mid = 0.5 * (a + b)
        rm = rate_fn(mid)
        if rm >= 0:
            a, ra = mid, rm
        else:
            b, rb = mid, rm
    return Threshold(a, (a, b), (ra, rb), True)


def semi_honest_equal_noise(Q: float) -> KeyRateReport:
    return keyrate_semi_honest(2 * Q, 2 * Q)


def fmt(x: float) -> str:
    return "%.9g" % x


def write_curve_csv(rows: Iterable[tuple[float, KeyRateReport]], path_or_file) -> None:
    """Write (Q, r, i_ab, i_ac_bound, formula_tag) rows."""

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Q", "r", "i_ab", "i_ac_bound", "formula_tag"])
        for Q, rep in rows:
            w.writerow([fmt(Q), fmt(rep.rate), fmt(rep.i_ab), fmt(rep.i_ac_bound), rep.formula_tag])

    if isinstance(path_or_file, (str, Path)):
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)
    else:
        emit(path_or_file)
