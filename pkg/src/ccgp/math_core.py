"""Special functions, tempered likelihoods and the Polya-Gamma distribution.

Everything here is vectorised over numpy arrays. The likelihood functions
reduce over the last axis (the class axis).
"""

import math

import numpy as np
from scipy.special import log_ndtr, ndtr

LOG2 = math.log(2.0)

# Lanczos approximation, g = 7, n = 9.
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

# B_{2k} / (2k) for k = 1..7
_DIGAMMA_SERIES = np.array([
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
])


def log_sigmoid(x):
    """Stable ``log(1 / (1 + exp(-x)))``."""
    x = np.asarray(x, dtype=float)
    neg = x < 0
    # exp argument is always <= 0, so nothing overflows
    tail = np.log1p(np.exp(np.where(neg, x, -x)))
    return np.where(neg, x - tail, -tail)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(log_sigmoid(x))


def logsumexp(a, axis=-1, keepdims=False):
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def log_logistic_softmax(f, tau):
    """Log-probabilities of the tempered logistic-softmax over the last axis."""
    z = log_sigmoid(np.asarray(f, dtype=float) / tau)
    return z - logsumexp(z, axis=-1, keepdims=True)


def logistic_softmax(f, tau=1.0):
    """Tempered logistic-softmax ``sigma(f_k/tau) / sum_c sigma(f_c/tau)``.

    Evaluated in log space and renormalised by the exact sum, so rows sum to
    one even when some entries underflow.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    p = np.exp(log_logistic_softmax(f, tau))
    return p / p.sum(axis=-1, keepdims=True)


def softmax_temp(f, tau=1.0):
    """Softmax with temperature, max-subtracted."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(f, dtype=float) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_cosh(x):
    x = np.abs(np.asarray(x, dtype=float))
    return x + np.log1p(np.exp(-2.0 * x)) - LOG2


def digamma(x):
    """Digamma function for positive arguments.

    Shifts the argument above 10 with the recurrence
    ``psi(x) = psi(x + 1) - 1/x`` and finishes with the asymptotic series.
    """
    x = np.array(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("digamma is only implemented for x > 0")
    acc = np.zeros_like(x)
    for _ in range(10):
        small = x < 10.0
        if not small.any():
            break
        acc = acc - np.where(small, 1.0 / x, 0.0)
        x = np.where(small, x + 1.0, x)
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in _DIGAMMA_SERIES[::-1]:
        series = (series + coef) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return out[()] if out.ndim == 0 else out


def lgamma(x):
    """``log Gamma(x)`` for positive arguments via the Lanczos approximation."""
    x = np.array(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("lgamma is only implemented for x > 0")
    # reflection for x < 0.5: Gamma(x) Gamma(1-x) = pi / sin(pi x)
    refl = x < 0.5
    z = np.where(refl, 1.0 - x, x) - 1.0
    s = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        s = s + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    lg = 0.5 * math.log(2.0 * math.pi) + (z + 0.5) * np.log(t) - t + np.log(s)
    with np.errstate(divide="ignore"):
        out = np.where(refl, math.log(math.pi) - np.log(np.abs(np.sin(math.pi * x))) - lg, lg)
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Polya-Gamma distribution
# ---------------------------------------------------------------------------

def pg_mean(b, c):
    """Mean of ``PG(b, c)``: ``b / (2c) * tanh(c / 2)``."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-8
    safe = np.where(small, 1.0, c)
    out = np.where(small, 0.25 * b, b / (2.0 * safe) * np.tanh(0.5 * safe))
    out = np.where(b == 0, 0.0, out)
    return out[()] if out.ndim == 0 else out


def pg_var(b, c):
    """Variance of ``PG(b, c)``."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-3
    safe = np.where(small, 1.0, c)
    big = b / (4.0 * safe ** 3) * (np.sinh(safe) - safe) / np.cosh(0.5 * safe) ** 2
    # Taylor expansion around 0: b * (1/24 - c^2/60 + ...)
    taylor = b * (1.0 / 24.0 - c * c / 60.0)
    out = np.where(small, taylor, big)
    return out[()] if out.ndim == 0 else out


_TRUNC = 0.64


def _series_coef(n, x):
    """Piecewise coefficients of the alternating series for J*(1)."""
    k = n + 0.5
    left = math.pi * k * (2.0 / (math.pi * x)) ** 1.5 * np.exp(-2.0 * k * k / x)
    right = math.pi * k * np.exp(-0.5 * k * k * math.pi ** 2 * x)
    return np.where(x > _TRUNC, right, left)


def _truncated_inverse_gauss(rng, z):
    """Draw IG(1/z, 1) restricted to (0, t) for every entry of ``z``."""
    t = _TRUNC
    out = np.empty_like(z)
    low = np.flatnonzero(z < 1.0 / t)
    high = np.flatnonzero(z >= 1.0 / t)

    pending = low
    while pending.size:
        m = pending.size
        e1 = rng.standard_exponential(m)
        e2 = rng.standard_exponential(m)
        ok = e1 * e1 <= 2.0 * e2 / t
        while not ok.all():
            bad = np.flatnonzero(~ok)
            e1[bad] = rng.standard_exponential(bad.size)
            e2[bad] = rng.standard_exponential(bad.size)
            ok[bad] = e1[bad] ** 2 <= 2.0 * e2[bad] / t
        x = t / (1.0 + t * e1) ** 2
        accept = rng.random(m) <= np.exp(-0.5 * z[pending] ** 2 * x)
        out[pending[accept]] = x[accept]
        pending = pending[~accept]

    pending = high
    while pending.size:
        m = pending.size
        mu = 1.0 / z[pending]
        y = rng.standard_normal(m) ** 2
        muy = mu * y
        x = mu + 0.5 * mu * muy - 0.5 * mu * np.sqrt(4.0 * muy + muy * muy)
        flip = rng.random(m) > mu / (mu + x)
        x = np.where(flip, mu * mu / x, x)
        accept = x < t
        out[pending[accept]] = x[accept]
        pending = pending[~accept]
    return out


def _sample_jstar1(rng, z):
    """Exact draws from J*(1, z) by Devroye's alternating-series rejection."""
    t = _TRUNC
    z = np.asarray(z, dtype=float)
    K = math.pi ** 2 / 8.0 + 0.5 * z * z
    log_p = math.log(math.pi / 2.0) - np.log(K) - K * t
    # mass of the tilted left piece: 2 exp(-z) * IG_cdf(t; 1/z, 1)
    rt = math.sqrt(t)
    log_q = LOG2 + np.logaddexp(
        -z + np.log(np.maximum(ndtr((t * z - 1.0) / rt), 1e-300)),
        z + log_ndtr(-(t * z + 1.0) / rt),
    )
    prob_right = 1.0 / (1.0 + np.exp(log_q - log_p))

    out = np.empty_like(z)
    pending = np.arange(z.size)
    while pending.size:
        m = pending.size
        zp = z[pending]
        right = rng.random(m) < prob_right[pending]
        x = np.empty(m)
        nr = int(right.sum())
        x[right] = t + rng.standard_exponential(nr) / K[pending][right]
        if nr < m:
            x[~right] = _truncated_inverse_gauss(rng, zp[~right])
        s = _series_coef(0, x)
        y = rng.random(m) * s
        accepted = np.zeros(m, dtype=bool)
        open_ = np.ones(m, dtype=bool)
        n = 0
        while open_.any():
            n += 1
            a = _series_coef(n, x)
            if n % 2:
                s = s - a
                hit = open_ & (y <= s)
                accepted |= hit
                open_ &= ~hit
            else:
                s = s + a
                open_ &= ~(y > s)
        out[pending[accepted]] = x[accepted]
        pending = pending[~accepted]
    return out


def pg_sample(rng, b, c):
    """Draw from ``PG(b, c)`` for integer ``b``.

    ``PG(b, c)`` is the sum of ``b`` independent ``PG(1, c)`` variates and
    ``PG(1, c) = J*(1, c/2) / 4``. ``b`` and ``c`` broadcast against each
    other; entries with ``b == 0`` are exactly zero (point mass).
    """
    b_arr, c_arr = np.broadcast_arrays(np.asarray(b), np.asarray(c, dtype=float))
    if np.any(b_arr < 0) or np.any(b_arr != np.round(b_arr)):
        raise ValueError("PG shape must be a non-negative integer")
    counts = b_arr.astype(np.int64).ravel()
    out = np.zeros(counts.size)
    total = int(counts.sum())
    if total:
        owner = np.repeat(np.arange(counts.size), counts)
        draws = 0.25 * _sample_jstar1(rng, 0.5 * np.abs(c_arr.ravel()[owner]))
        np.add.at(out, owner, draws)
    out = out.reshape(b_arr.shape)
    return out[()] if out.ndim == 0 else out


def pg_log_density_base(omega, b, terms=200):
    """Log density of ``PG(b, 0)`` at ``omega`` from its alternating series.

    ``PG(b, 0) = J*(b) / 4`` where

        f_J(x | b) = 2^b / Gamma(b) * sum_n (-1)^n Gamma(n+b) / n!
                     * (2n+b) / sqrt(2 pi x^3) * exp(-(2n+b)^2 / (2x)).

    The sum is truncated at ``terms`` terms. It alternates with growing
    terms, so precision drops as ``omega`` grows (about 1e-9 relative at
    ``omega = 4`` for ``b = 1``); once it is gone entirely the result is NaN.
    By convention ``PG(0, 0)`` is a point mass at zero with log density 0.
    """
    omega, b = np.broadcast_arrays(np.asarray(omega, dtype=float), np.asarray(b, dtype=float))
    out = np.zeros(omega.shape)
    live = b > 0
    if not live.any():
        return out[()] if out.ndim == 0 else out
    w = omega[live]
    bb = b[live]
    x = 4.0 * w
    n = np.arange(terms, dtype=float)[:, None]
    k = 2.0 * n + bb
    log_mag = (lgamma(n + bb) - lgamma(n + 1.0) + np.log(k)
               - 0.5 * np.log(2.0 * math.pi * x ** 3) - k * k / (2.0 * x))
    sign = np.where(n % 2 == 0, 1.0, -1.0)
    shift = log_mag.max(axis=0)
    total = np.sum(sign * np.exp(log_mag - shift), axis=0)
    with np.errstate(invalid="ignore"):
        log_fj = bb * LOG2 - lgamma(bb) + shift + np.log(np.where(total > 0, total, np.nan))
    out[live] = log_fj + math.log(4.0)
    return out[()] if out.ndim == 0 else out


def pg_log_density(omega, b, c, terms=200):
    """Log density of ``PG(b, c)``: exponential tilt of ``PG(b, 0)``."""
    omega = np.asarray(omega, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    tilt = b * log_cosh(0.5 * c) - 0.5 * c * c * omega
    return np.where(b > 0, tilt, 0.0) + pg_log_density_base(omega, b, terms)
