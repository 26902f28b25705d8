"""
Special functions on float64 numpy arrays: log-gamma, polygammas, the regularized
lower incomplete gamma function and its inverse, and a Gamma sampler.

The incomplete gamma follows the usual split: power series below x = a + 1,
Lentz continued fraction above it.
"""
import math
import sys

import numpy as np

from ren.utils import DomainError, ren_error

_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

MIN_SHAPE = 1e-6
TINY = np.finfo(np.float64).tiny
EPS = 1.0e-15
MAX_ITER = 1000


def _lanczos_lgamma(x):
    # valid for x >= 0.5
    x = x - 1.0
    acc = np.full_like(x, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        acc = acc + _LANCZOS_COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x):
    """log Γ(x) for x > 0 (Lanczos, reflection below 1/2)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ren_error(DomainError, f"lgamma requires positive input, got min {x.min()}")
    small = x < 0.5
    out = np.empty_like(x)
    if np.any(~small):
        out[~small] = _lanczos_lgamma(x[~small])
    if np.any(small):
        xs = x[small]
        out[small] = np.log(np.pi / np.abs(np.sin(np.pi * xs))) - _lanczos_lgamma(1.0 - xs)
    return out


def digamma(x):
    """ψ(x) for x > 0: recurrence up to x >= 6, then the asymptotic series."""
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(x <= 0):
        raise ren_error(DomainError, f"digamma requires positive input, got min {x.min()}")
    shift = np.zeros_like(x)
    low = x < 6.0
    while np.any(low):
        shift[low] -= 1.0 / x[low]
        x[low] += 1.0
        low = x < 6.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132))))
    return shift + np.log(x) - 0.5 * inv - series


def trigamma(x):
    """ψ'(x) for x > 0."""
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(x <= 0):
        raise ren_error(DomainError, f"trigamma requires positive input, got min {x.min()}")
    shift = np.zeros_like(x)
    low = x < 6.0
    while np.any(low):
        shift[low] += 1.0 / (x[low] * x[low])
        x[low] += 1.0
        low = x < 6.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 / 30)))
    return shift + series


def _gammainc_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_fraction(a: float, x: float) -> float:
    tiny = sys.float_info.min / sys.float_info.epsilon
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def _gammainc_scalar(a: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gammainc_series(a, x)
    return 1.0 - _gammaincc_fraction(a, x)


_gammainc_vec = np.vectorize(_gammainc_scalar, otypes=[np.float64])


def gammainc(a, x):
    """Regularized lower incomplete gamma P(a, x), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(a <= 0):
        raise ren_error(DomainError, "gammainc requires a > 0")
    if np.any(x < 0):
        raise ren_error(DomainError, "gammainc requires x >= 0")
    return _gammainc_vec(a, x)


def gamma_log_pdf_unit(a, x):
    """Log density of Γ(a, 1) at x > 0."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return (a - 1.0) * np.log(x) - x - lgamma(a)


def _gammaincinv_scalar(a: float, p: float) -> float:
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return math.inf
    lo, hi = 0.0, max(1.0, a)
    while _gammainc_scalar(a, hi) < p:
        lo, hi = hi, hi * 2.0
    x = 0.5 * (lo + hi)
    log_norm = math.lgamma(a)
    for _ in range(200):
        f = _gammainc_scalar(a, x) - p
        if f > 0:
            hi = x
        else:
            lo = x
        pdf = math.exp((a - 1.0) * math.log(x) - x - log_norm) if x > 0 else 0.0
        step_ok = False
        if pdf > 0:
            candidate = x - f / pdf
            if lo < candidate < hi:
                step_ok = True
        x_new = candidate if step_ok else 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(1.0, x):
            return x_new
        x = x_new
    return x


_gammaincinv_vec = np.vectorize(_gammaincinv_scalar, otypes=[np.float64])


def gammaincinv(a, p):
    """Inverse of P(a, ·) in its second argument (safeguarded Newton)."""
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any(a <= 0):
        raise ren_error(DomainError, "gammaincinv requires a > 0")
    return _gammaincinv_vec(a, p)


def log_sample_gamma_unit(a, rng: np.random.Generator):
    """Draw log s for s ~ Γ(a, 1) elementwise with the Marsaglia–Tsang squeeze method.

    Shapes below one are boosted: draw with a + 1 and add log(u) / a. The boost
    stays in log space, so small shapes give very negative logs instead of zeros.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a < MIN_SHAPE):
        raise ren_error(DomainError, f"Gamma sampler needs shape >= {MIN_SHAPE}, got min {np.min(a)}")
    boost = a < 1.0
    shape = np.where(boost, a + 1.0, a)
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    flat_d = d.ravel()
    flat_c = c.ravel()
    out = np.empty_like(flat_d)
    pending = np.arange(flat_d.size)
    while pending.size:
        z = rng.standard_normal(pending.size)
        u = rng.uniform(size=pending.size)
        v = (1.0 + flat_c[pending] * z) ** 3
        positive = v > 0
        safe_v = np.where(positive, v, 1.0)
        accept = positive & (
            (u < 1.0 - 0.0331 * z ** 4)
            | (np.log(u) < 0.5 * z * z + flat_d[pending] * (1.0 - safe_v + np.log(safe_v)))
        )
        out[pending[accept]] = np.log(flat_d[pending[accept]]) + np.log(safe_v[accept])
        pending = pending[~accept]
    out = out.reshape(a.shape)

    if np.any(boost):
        u = rng.uniform(size=a.shape)
        log_u = np.log(np.maximum(u, TINY))
        out = np.where(boost, out + log_u / np.where(boost, a, 1.0), out)
    if not np.all(np.isfinite(out)):
        raise ren_error(DomainError, "Gamma sampler produced a non-finite draw")
    return out


def sample_gamma_unit(a, rng: np.random.Generator):
    """Draw s ~ Γ(a, 1), floored at the smallest normal float."""
    return np.maximum(np.exp(log_sample_gamma_unit(a, rng)), TINY)
