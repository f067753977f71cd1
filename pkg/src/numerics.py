"""
Scalar special functions and numerically stable primitives.

Every function accepts a float or a numpy array and returns the same kind
(a Python float for scalar input). Domain violations raise DomainError
instead of producing NaN.
"""

import math

import numpy as np

from src.errors import DomainError

# Lanczos approximation, g = 7, nine coefficients.
LANCZOS_G = 7.0
LANCZOS_COEFFICIENTS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)

# Digamma: recurrence up to this point, asymptotic series beyond it.
DIGAMMA_ASYMPTOTIC_FROM = 6.0

INCOMPLETE_GAMMA_EPS = 1e-16
INCOMPLETE_GAMMA_MAX_ITER = 100_000
FPMIN = 1e-300


def _as_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return arr, arr.ndim == 0


def _result(arr: np.ndarray, scalar: bool):
    return float(arr) if scalar else arr


def _require_positive(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} requires x > 0, got {arr.min() if arr.size else arr}")


def log_gamma(x):
    """
    Natural logarithm of the gamma function for x > 0.

    Args:
        x: Positive float or array.

    Returns:
        ln Γ(x), same kind as the input.

    Raises:
        DomainError: If any x <= 0.
    """
    arr, scalar = _as_array(x)
    _require_positive("log_gamma", arr)
    # ln Γ(x) = ln Γ(x + 1) - ln x keeps the Lanczos sum on x >= 0.5
    small = arr < 0.5
    shifted = np.where(small, arr + 1.0, arr)

    z = shifted - 1.0
    series = np.full_like(z, LANCZOS_COEFFICIENTS[0])
    for i, coefficient in enumerate(LANCZOS_COEFFICIENTS[1:], start=1):
        series = series + coefficient / (z + i)
    t = z + LANCZOS_G + 0.5
    value = HALF_LOG_TWO_PI + (z + 0.5) * np.log(t) - t + np.log(series)

    value = np.where(small, value - np.log(arr), value)
    return _result(value, scalar)


def digamma(x):
    """
    Digamma function Ψ(x) = d/dx ln Γ(x) for x > 0.

    Uses the recurrence Ψ(x) = Ψ(x + 1) - 1/x until x reaches the
    asymptotic region, then the standard asymptotic series.

    Raises:
        DomainError: If any x <= 0.
    """
    arr, scalar = _as_array(x)
    _require_positive("digamma", arr)
    z = np.array(arr, copy=True)
    value = np.zeros_like(z)
    while True:
        low = z < DIGAMMA_ASYMPTOTIC_FROM
        if not low.any():
            break
        value[low] -= 1.0 / z[low]
        z[low] += 1.0

    inv2 = 1.0 / (z * z)
    tail = inv2 * (
        1.0 / 12.0
        - inv2
        * (
            1.0 / 120.0
            - inv2
            * (
                1.0 / 252.0
                - inv2
                * (
                    1.0 / 240.0
                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))
                )
            )
        )
    )
    value = value + np.log(z) - 0.5 / z - tail
    return _result(value, scalar)


def trigamma(x, h: float = 1e-6):
    """Central finite difference of digamma; accurate to roughly 1e-6."""
    arr, scalar = _as_array(x)
    _require_positive("trigamma", arr)
    step = np.minimum(h, 0.5 * arr)
    value = (digamma(arr + step) - digamma(arr - step)) / (2.0 * step)
    return _result(np.asarray(value), scalar)


def _gamma_prefactor(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.exp(-x + a * np.log(x) - log_gamma(a))


def _incomplete_gamma_series(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    ap = np.array(a, copy=True)
    delta = 1.0 / a
    total = np.array(delta, copy=True)
    active = np.ones(a.shape, dtype=bool)
    for _ in range(INCOMPLETE_GAMMA_MAX_ITER):
        ap[active] += 1.0
        delta[active] *= x[active] / ap[active]
        total[active] += delta[active]
        active &= np.abs(delta) >= np.abs(total) * INCOMPLETE_GAMMA_EPS
        if not active.any():
            break
    return total * _gamma_prefactor(a, x)


def _incomplete_gamma_continued_fraction(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Modified Lentz evaluation of the upper regularized function Q(a, x)
    b = x + 1.0 - a
    c = np.full(a.shape, 1.0 / FPMIN)
    d = 1.0 / b
    h = np.array(d, copy=True)
    active = np.ones(a.shape, dtype=bool)
    for i in range(1, INCOMPLETE_GAMMA_MAX_ITER + 1):
        an = -i * (i - a[active])
        b[active] += 2.0
        d_a = an * d[active] + b[active]
        d_a = np.where(np.abs(d_a) < FPMIN, FPMIN, d_a)
        c_a = b[active] + an / c[active]
        c_a = np.where(np.abs(c_a) < FPMIN, FPMIN, c_a)
        d_a = 1.0 / d_a
        delta = d_a * c_a
        h[active] *= delta
        d[active] = d_a
        c[active] = c_a
        done = np.abs(delta - 1.0) < INCOMPLETE_GAMMA_EPS
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
    return _gamma_prefactor(a, x) * h


def reg_incomplete_gamma(a, x):
    """
    Regularized lower incomplete gamma function P(a, x).

    This is the CDF of a Gamma(a, 1) variable evaluated at x. The series
    expansion is used for x < a + 1 and the continued fraction otherwise.

    Args:
        a: Shape parameter(s), a > 0.
        x: Evaluation point(s), x >= 0. Broadcast against ``a``.

    Returns:
        P(a, x) in [0, 1].

    Raises:
        DomainError: If a <= 0 or x < 0.
    """
    a_arr, a_scalar = _as_array(a)
    x_arr, x_scalar = _as_array(x)
    _require_positive("reg_incomplete_gamma", a_arr)
    if not np.all(np.isfinite(x_arr)) or np.any(x_arr < 0.0):
        raise DomainError("reg_incomplete_gamma requires x >= 0")
    a_arr, x_arr = np.broadcast_arrays(a_arr, x_arr)
    a_arr = np.array(a_arr, dtype=np.float64)
    x_arr = np.array(x_arr, dtype=np.float64)

    value = np.zeros(a_arr.shape)
    positive = x_arr > 0.0
    use_series = positive & (x_arr < a_arr + 1.0)
    use_fraction = positive & ~use_series
    if use_series.any():
        value[use_series] = _incomplete_gamma_series(a_arr[use_series], x_arr[use_series])
    if use_fraction.any():
        value[use_fraction] = 1.0 - _incomplete_gamma_continued_fraction(
            a_arr[use_fraction], x_arr[use_fraction]
        )
    value = np.clip(value, 0.0, 1.0)
    return _result(value, a_scalar and x_scalar)


def gamma_log_density(a, x):
    """Log density of Gamma(a, 1) at x > 0."""
    a_arr, a_scalar = _as_array(a)
    x_arr, x_scalar = _as_array(x)
    value = (a_arr - 1.0) * np.log(x_arr) - x_arr - log_gamma(a_arr)
    return _result(np.asarray(value), a_scalar and x_scalar)


def stable_sigmoid(t):
    """σ(t) = 1 / (1 + e^-t) without overflow for large |t|."""
    arr, scalar = _as_array(t)
    e = np.exp(-np.abs(arr))
    value = np.where(arr >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(value, scalar)


def log_sigmoid(t):
    """ln σ(t), finite for every finite t."""
    arr, scalar = _as_array(t)
    return _result(-np.logaddexp(0.0, -arr), scalar)


def softplus(t):
    """ln(1 + e^t)."""
    arr, scalar = _as_array(t)
    return _result(np.logaddexp(0.0, arr), scalar)


def softmax(v, axis: int = -1) -> np.ndarray:
    """
    Softmax along ``axis`` with max subtraction.

    Raises:
        DomainError: If the input is empty or not finite.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise DomainError("softmax requires finite input")
    shifted = arr - np.max(arr, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)
