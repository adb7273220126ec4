"""Special functions used by the closed-form moment formulas.

erf/erfc follow the standard convention (weight exp(-t^2)); the incomplete
gamma is the upper one, Gamma(a, z) = int_z^inf t^(a-1) e^-t dt.  The
confluent hypergeometric function U(a, b, z) is evaluated by adaptive
quadrature of its integral representation

    U(a, b, z) = (1/Gamma(a)) int_0^inf e^(-zt) t^(a-1) (1+t)^(b-a-1) dt,

with the tail truncated where e^(-zt) drops below 1e-16.  The arguments we
need (b = 0, moderate z) are benign, so no series acceleration is required.

`gaussian_identities` collects the five scalar-Gaussian integrals that feed
the sigmoid and saturation moment formulas.  Each returns the value of the
normalized integral (1/(sqrt(2 pi) sigma)) * int ... dt and is validated
against quadrature in the test suite.
"""

import math

import numpy as np
from scipy import integrate
from scipy import special as _sp


class DomainError(ValueError):
    """Raised when a special-function argument is outside the supported domain."""


def erf(z):
    return _sp.erf(z)


def erfc(z):
    return _sp.erfc(z)


def inc_gamma(a, z):
    """Upper incomplete gamma Gamma(a, z) for a, z > 0."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(a <= 0) or np.any(z <= 0):
        raise DomainError("inc_gamma requires a > 0 and z > 0")
    return _sp.gammaincc(a, z) * _sp.gamma(a)


def sinc(x):
    """sin(x)/x with the removable singularity filled in at 0."""
    x = np.asarray(x, dtype=float)
    out = np.where(x == 0.0, 1.0, np.sin(np.where(x == 0.0, 1.0, x))
                   / np.where(x == 0.0, 1.0, x))
    if out.ndim == 0:
        return float(out)
    return out


def confluent_u(a, b, z):
    """Kummer's U(a, b, z) by quadrature of the integral representation.

    Requires a > 0 and z > 0 (the representation's convergence region).
    """
    if a <= 0 or z <= 0:
        raise DomainError("confluent_u requires a > 0 and z > 0")
    # e^(-z t) < 1e-16 beyond this point; the algebraic factor only shrinks
    # the tail further for b <= a + 1, and adds at most a few digits otherwise.
    tail = -math.log(1e-16) / z

    def integrand(t):
        return math.exp(-z * t) * t ** (a - 1.0) * (1.0 + t) ** (b - a - 1.0)

    # the integrand has an integrable t^(a-1) singularity at 0 for a < 1;
    # quad handles it via the weight-free adaptive rule with points hint
    val, _ = integrate.quad(integrand, 0.0, tail, limit=400,
                            epsabs=1e-14, epsrel=1e-13)
    return val / _sp.gamma(a)


def _check_sigma(sigma):
    sigma = float(sigma)
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    return sigma


def gaussian_tail(z, sigma):
    """(1/(sqrt(2 pi) s)) int_z^inf e^(-t^2/(2 s^2)) dt = erfc(z/(sqrt2 s))/2."""
    sigma = _check_sigma(sigma)
    return 0.5 * _sp.erfc(z / (math.sqrt(2.0) * sigma))


def gaussian_half_sigmoid_sq(sigma):
    """Normalized int_0^inf t^2/(1+t^2) e^(-t^2/(2 s^2)) dt."""
    sigma = _check_sigma(sigma)
    s = sigma
    return 0.5 * (1.0 - math.sqrt(math.pi / 2.0) / s
                  * math.exp(1.0 / (2.0 * s * s))
                  * _sp.erfc(1.0 / (math.sqrt(2.0) * s)))


def gaussian_trunc_square(sigma):
    """Normalized int_0^1 t^2 e^(-t^2/(2 s^2)) dt."""
    sigma = _check_sigma(sigma)
    s = sigma
    return (0.5 * s * s * _sp.erf(1.0 / (math.sqrt(2.0) * s))
            - s / math.sqrt(2.0 * math.pi) * math.exp(-1.0 / (2.0 * s * s)))


def gaussian_tail_linear(sigma):
    """Normalized int_1^inf t e^(-t^2/(2 s^2)) dt = (s/sqrt(2 pi)) Gamma(1, 1/(2 s^2))."""
    sigma = _check_sigma(sigma)
    s = sigma
    return s / math.sqrt(2.0 * math.pi) * float(inc_gamma(1.0, 1.0 / (2.0 * s * s)))


def gaussian_half_sigmoid_cross(sigma):
    """Normalized int_0^inf t^2/sqrt(1+t^2) e^(-t^2/(2 s^2)) dt."""
    sigma = _check_sigma(sigma)
    s = sigma
    return s / (2.0 * math.sqrt(2.0)) * confluent_u(0.5, 0.0, 1.0 / (2.0 * s * s))


def gaussian_identities(sigma, z=1.0):
    """All five normalized Gaussian integrals at one sigma, as a dict."""
    return {
        "tail": gaussian_tail(z, sigma),
        "half_sigmoid_sq": gaussian_half_sigmoid_sq(sigma),
        "trunc_square": gaussian_trunc_square(sigma),
        "tail_linear": gaussian_tail_linear(sigma),
        "half_sigmoid_cross": gaussian_half_sigmoid_cross(sigma),
    }
