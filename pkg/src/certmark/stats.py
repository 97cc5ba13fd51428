"""Self-contained statistical primitives for the certification arithmetic.

Everything here is implemented with the standard library only (math.erfc,
math.lgamma) so the decision and certification math has no dependency on an
external numerical stack.  Accuracy notes:

- ``phi`` evaluates the standard normal CDF through erfc; absolute error is
  below 1e-14 over the whole real line.
- ``phi_inv`` uses a rational initial estimate refined by Halley steps on the
  exact tail function 0.5*erfc(x/sqrt(2)), which keeps full relative precision
  where the CDF itself saturates; the result agrees with the true quantile to
  a few ulp over the whole open interval.
- ``t_quantile`` inverts the Student-t CDF, itself computed via the
  regularized incomplete beta function (continued fraction), by guarded
  bisection to 1e-12 relative bracket width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .errors import (
    InsufficientSamplesError,
    InvalidArgumentError,
    NumericDomainError,
)

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def phi(x: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-float(x) / _SQRT2)


def _phi_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT2PI


# rational approximation coefficients for the initial inverse-CDF estimate
_PHI_INV_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_PHI_INV_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_PHI_INV_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_PHI_INV_D = (
    7.784695709041462e-03, 3.224671290700398e-01,
    2.445134137142996e00, 3.754408661907416e00,
)


def phi_inv(p: float) -> float:
    """Standard normal quantile for p in (0, 1)."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"phi_inv needs p in (0,1), got {p}")
    if p == 0.5:
        return 0.0
    a, b, c, d = _PHI_INV_A, _PHI_INV_B, _PHI_INV_C, _PHI_INV_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    # Halley refinement in upper-tail space: solve Q(y) = tail with
    # Q(y) = 0.5 * erfc(y / sqrt(2)).  For p >= 0.5 the tail 1 - p is exact
    # (Sterbenz), and erfc keeps full relative precision out to the extreme
    # tails, unlike phi(x) - p, which saturates near p = 1.
    sign = 1.0 if p >= 0.5 else -1.0
    tail = 1.0 - p if p >= 0.5 else p
    y = abs(x)
    for _ in range(3):
        err = 0.5 * math.erfc(y / _SQRT2) - tail
        u = err / _phi_pdf(y)  # Newton step for the decreasing tail function
        y += u / (1.0 - 0.5 * y * u)
    return sign * y


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    ITMAX = 500
    EPS = 3e-16
    FPMIN = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, ITMAX + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return h
    raise NumericDomainError(
        f"incomplete beta continued fraction failed to converge (a={a}, b={b}, x={x})"
    )


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    bt = math.exp(log_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: int) -> float:
    """Student-t CDF with ``dof`` degrees of freedom."""
    dof = int(dof)
    if dof < 1:
        raise InvalidArgumentError("degrees of freedom must be >= 1")
    t = float(t)
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    tail = 0.5 * _betainc_reg(0.5 * dof, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def _t_pdf(t: float, dof: int) -> float:
    return math.exp(
        math.lgamma(0.5 * (dof + 1))
        - math.lgamma(0.5 * dof)
        - 0.5 * math.log(dof * math.pi)
        - 0.5 * (dof + 1) * math.log1p(t * t / dof)
    )


def t_quantile(p: float, dof: int) -> float:
    """Student-t quantile: the t with t_cdf(t, dof) == p.

    Guarded bisection on the CDF followed by Newton polish; the CDF
    round-trip error is held below 1e-10 across dof from 1 to 1e6.
    """
    p = float(p)
    dof = int(dof)
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"t_quantile needs p in (0,1), got {p}")
    if dof < 1:
        raise InvalidArgumentError("degrees of freedom must be >= 1")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, dof)
    lo = 0.0
    hi = max(1.0, 2.0 * phi_inv(p) + 1.0)
    for _ in range(400):
        if t_cdf(hi, dof) >= p:
            break
        lo = hi
        hi *= 2.0
    else:
        raise NumericDomainError("t_quantile bracket search failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, lo):
            break
    x = 0.5 * (lo + hi)
    for _ in range(2):
        f = t_cdf(x, dof) - p
        df = _t_pdf(x, dof)
        if df <= 0.0:
            break
        step = f / df
        if abs(step) > hi - lo + 1.0:
            break
        x -= step
    return x


def _log_binom_coeff(n: int, i: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)


def _binom_logsumexp(terms: list[float]) -> float:
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms))


def _check_binom_args(k: int, n: int, p0: float) -> tuple[int, int, float]:
    n = int(n)
    k = int(k)
    p0 = float(p0)
    if n < 0:
        raise InvalidArgumentError("n must be >= 0")
    if not 0 <= k <= n:
        raise InvalidArgumentError(f"k must lie in [0, n], got k={k}, n={n}")
    if not 0.0 <= p0 <= 1.0:
        raise InvalidArgumentError("p0 must lie in [0, 1]")
    return k, n, p0


def binom_sf(k: int, n: int, p0: float) -> float:
    """Exact binomial survival P(X >= k) for X ~ Binomial(n, p0).

    Terms are summed in log space so tiny tails (e.g. 2^-20) keep full
    relative precision.
    """
    k, n, p0 = _check_binom_args(k, n, p0)
    if k == 0:
        return 1.0
    if p0 == 0.0:
        return 0.0
    if p0 == 1.0:
        return 1.0
    log_p = math.log(p0)
    log_q = math.log1p(-p0)
    terms = [
        _log_binom_coeff(n, i) + i * log_p + (n - i) * log_q for i in range(k, n + 1)
    ]
    return min(1.0, math.exp(_binom_logsumexp(terms)))


def binom_cdf(k: int, n: int, p0: float) -> float:
    """Exact binomial CDF P(X <= k) for X ~ Binomial(n, p0)."""
    k, n, p0 = _check_binom_args(k, n, p0)
    if k == n:
        return 1.0
    if p0 == 0.0:
        return 1.0
    if p0 == 1.0:
        return 0.0
    log_p = math.log(p0)
    log_q = math.log1p(-p0)
    terms = [
        _log_binom_coeff(n, i) + i * log_p + (n - i) * log_q for i in range(0, k + 1)
    ]
    return min(1.0, math.exp(_binom_logsumexp(terms)))


@dataclass(frozen=True)
class ConfidenceBound:
    """A one-sided finite-sample confidence bound on a [0, 1] parameter."""

    point: float
    bound: float
    side: str  # "lower" or "upper"
    confidence: float
    n: int


def _check_bound_args(empirical: float, n: int, delta: float) -> tuple[float, int, float]:
    empirical = float(empirical)
    n = int(n)
    delta = float(delta)
    if not 0.0 <= empirical <= 1.0:
        raise InvalidArgumentError("empirical rate must lie in [0, 1]")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    if not 0.0 < delta < 1.0:
        raise InvalidArgumentError("delta must lie in (0, 1)")
    return empirical, n, delta


def dkw_lower(empirical: float, n: int, delta: float) -> ConfidenceBound:
    """One-sided DKW lower bound: empirical - sqrt(ln(1/delta)/(2n)), floored at 0.

    Valid simultaneously over every threshold of the same empirical CDF, which
    is what makes it usable for a whole threshold grid at one confidence.
    """
    empirical, n, delta = _check_bound_args(empirical, n, delta)
    slack = math.sqrt(math.log(1.0 / delta) / (2.0 * n))
    return ConfidenceBound(
        point=empirical,
        bound=max(0.0, empirical - slack),
        side="lower",
        confidence=1.0 - delta,
        n=n,
    )


def hoeffding_upper(empirical: float, n: int, delta: float) -> ConfidenceBound:
    """One-sided Hoeffding upper bound: empirical + sqrt(ln(1/delta)/(2n)), capped at 1."""
    empirical, n, delta = _check_bound_args(empirical, n, delta)
    slack = math.sqrt(math.log(1.0 / delta) / (2.0 * n))
    return ConfidenceBound(
        point=empirical,
        bound=min(1.0, empirical + slack),
        side="upper",
        confidence=1.0 - delta,
        n=n,
    )


class PairedTStatistic(NamedTuple):
    t_stat: float
    dbar: float
    s_d: float


def paired_t_statistic(differences: Sequence[float]) -> PairedTStatistic:
    """Paired-sample t statistic sqrt(N) * mean / sd for a difference sample.

    A zero sample standard deviation is degenerate: the statistic is +inf
    when the common difference is positive (always rejects an upper-tail
    test) and -inf otherwise (never rejects).
    """
    d = [float(x) for x in differences]
    n = len(d)
    if n < 2:
        raise InsufficientSamplesError("paired t statistic needs at least 2 pairs")
    dbar = sum(d) / n
    var = sum((x - dbar) ** 2 for x in d) / (n - 1)
    s_d = math.sqrt(var)
    if s_d == 0.0:
        t = math.inf if dbar > 0 else -math.inf
    else:
        t = math.sqrt(n) * dbar / s_d
    return PairedTStatistic(t_stat=t, dbar=dbar, s_d=s_d)
