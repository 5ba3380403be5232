"""Paired-samples t-test and the Student-t CDF behind it."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DataError, DegenerateInputError

_EPS = 1e-16
_TINY = 1e-300


def _betacf(a: float, b: float, x: float, max_iter: int = 20000) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float, one_minus_x: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``one_minus_x`` may be passed when ``1 - x`` is known more accurately than
    it can be computed from ``x``.
    """
    y = 1.0 - x if one_minus_x is None else one_minus_x
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def student_t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise DataError(f"degrees of freedom must be positive, got {df}")
    if t == 0:
        return 0.5
    t2 = t * t
    x = df / (df + t2)
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, x, t2 / (df + t2))
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float
    df: int
    mean_difference: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05

    def as_dict(self) -> dict:
        return {"t_stat": self.t_stat, "p_value": self.p_value, "df": self.df,
                "mean_difference": self.mean_difference, "significant": self.significant}


def paired_t_test(a, b) -> TTestResult:
    """Two-tailed paired-samples t-test of ``a - b`` (sample sd, df = n - 1)."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    if len(a) != len(b):
        raise DataError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise DataError("paired t-test needs at least two pairs")
    d = [x - y for x, y in zip(a, b)]
    mean = math.fsum(d) / n
    var = math.fsum((v - mean) ** 2 for v in d) / (n - 1)
    if var == 0.0:
        raise DegenerateInputError("paired differences have zero variance")
    t = mean / math.sqrt(var / n)
    df = n - 1
    t2 = t * t
    # two-tailed p equals I_x(df/2, 1/2) directly; avoids 1 - cdf cancellation
    p = 1.0 if t == 0 else betainc_regularized(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))
    return TTestResult(t, min(1.0, max(0.0, p)), df, mean)
