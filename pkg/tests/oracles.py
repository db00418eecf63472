"""Independent reference computations used by the tests only."""

import math

from scipy import integrate

from stochks.kernel import MollifierSpec, bessel_potential_derivative


def ball_quadrature_force(r, epsilon, d, epsrel=1e-10):
    """Radial component of (psi_eps * grad G)(x), |x| = r, by direct 2D quadrature.

    Polar (d=2) or axisymmetric spherical (d=3) coordinates centred on x, so the
    integrable singularity of grad G sits at the coordinate origin and is
    cancelled by the Jacobian.
    """
    spec = MollifierSpec(epsilon, d)

    def rho_limits(theta):
        disc = epsilon ** 2 - (r * math.sin(theta)) ** 2
        if disc <= 0:
            return 0.0, 0.0
        root = math.sqrt(disc)
        lo = max(0.0, -r * math.cos(theta) - root)
        hi = max(0.0, -r * math.cos(theta) + root)
        return lo, hi

    def integrand(rho, theta):
        if rho == 0.0:
            g_rho = -1.0 / (2 * math.pi) if d == 2 else -1.0 / (4 * math.pi)
        else:
            g_rho = float(bessel_potential_derivative(rho, d)) * rho ** (d - 1)
        dist = math.sqrt(r * r + 2 * r * rho * math.cos(theta) + rho * rho)
        psi = float(spec.radial(dist))
        val = psi * (-g_rho) * math.cos(theta)
        if d == 3:
            val *= 2 * math.pi * math.sin(theta)
        return val

    upper = 2 * math.pi if d == 2 else math.pi
    val, _ = integrate.dblquad(
        integrand, 0.0, upper,
        lambda th: rho_limits(th)[0], lambda th: rho_limits(th)[1],
        epsabs=1e-13, epsrel=epsrel,
    )
    return val
