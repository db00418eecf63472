"""Modified Bessel functions I0, I1, K0, K1 for positive real arguments.

K0 and K1 use the ascending series on (0, 2] and, for larger arguments,
the trapezoidal rule applied to the integral representation

    K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt,

whose integrand is analytic in a strip around the real axis, so the
trapezoidal sum converges geometrically in the step size. Relative accuracy is about 1e-14 on
both branches.
"""

import numpy as np

EULER_GAMMA = 0.57721566490153286061

_SERIES_SWITCH = 2.0
_SERIES_TERMS = 30
_TRAP_STEP = 0.2
# integrand below exp(-40) relative to its peak is dropped
_TAIL_EXPONENT = 40.0


def _as_positive(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("argument must be strictly positive")
    return x


def bessel_i0(x):
    """I0 by its power series. Intended for moderate arguments (x <~ 20)."""
    x = np.asarray(x, dtype=float)
    q = 0.25 * x * x
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(1, 60):
        term = term * q / (k * k)
        total = total + term
    return total


def bessel_i1(x):
    x = np.asarray(x, dtype=float)
    q = 0.25 * x * x
    term = 0.5 * x
    total = term.copy()
    for k in range(1, 60):
        term = term * q / (k * (k + 1))
        total = total + term
    return total


def _k0_series(x):
    q = 0.25 * x * x
    log_term = np.log(0.5 * x) + EULER_GAMMA
    term = np.ones_like(x)
    i0 = np.ones_like(x)
    tail = np.zeros_like(x)
    harmonic = 0.0
    for k in range(1, _SERIES_TERMS):
        term = term * q / (k * k)
        harmonic += 1.0 / k
        i0 = i0 + term
        tail = tail + term * harmonic
    return -log_term * i0 + tail


def _k1_series(x):
    # K1(x) = 1/x + ln(x/2) I1(x)
    #         - (x/4) sum_k (x^2/4)^k / (k!(k+1)!) * (psi(k+1) + psi(k+2))
    q = 0.25 * x * x
    term = np.ones_like(x)  # (x^2/4)^k / (k!(k+1)!)
    psi_k1 = -EULER_GAMMA  # psi(1)
    psi_k2 = 1.0 - EULER_GAMMA  # psi(2)
    acc = term * (psi_k1 + psi_k2)
    i1 = 0.5 * x * term
    for k in range(1, _SERIES_TERMS):
        term = term * q / (k * (k + 1))
        psi_k1 += 1.0 / k
        psi_k2 += 1.0 / (k + 1)
        acc = acc + term * (psi_k1 + psi_k2)
        i1 = i1 + 0.5 * x * term
    return 1.0 / x + np.log(0.5 * x) * i1 - 0.25 * x * acc


def _k_integral(x, order):
    # Scaled form exp(-x) * int exp(-x (cosh t - 1)) ...; the peak at t = 0
    # has width ~ 1/sqrt(x), so the step shrinks accordingly.
    h = np.minimum(_TRAP_STEP, 0.5 / np.sqrt(x))
    t_max = np.arccosh(1.0 + _TAIL_EXPONENT / x)
    k = np.arange(int(np.ceil((t_max / h).max())) + 2)
    t = h[:, None] * k[None, :]
    weights = np.where(t <= t_max[:, None] + h[:, None], h[:, None], 0.0)
    weights[:, 0] *= 0.5
    integrand = np.exp(-x[:, None] * (np.cosh(t) - 1.0))
    if order == 1:
        integrand = integrand * np.cosh(t)
    return np.exp(-x) * np.sum(integrand * weights, axis=1)


def _dispatch(x, series, order):
    x = _as_positive(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = x <= _SERIES_SWITCH
    if small.any():
        out[small] = series(x[small])
    if (~small).any():
        out[~small] = _k_integral(x[~small], order)
    return out[0] if scalar else out


def bessel_k0(x):
    """Modified Bessel function of the second kind, order 0, for x > 0."""
    return _dispatch(x, _k0_series, 0)


def bessel_k1(x):
    """Modified Bessel function of the second kind, order 1, for x > 0."""
    return _dispatch(x, _k1_series, 1)
