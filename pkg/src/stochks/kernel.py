"""Bessel potential, Newtonian split, bump mollifier and the mollified force table.

The Bessel potential G is the kernel of (I - Laplacian)^{-1}:

    d = 3:  G(r) = exp(-r) / (4 pi r)
    d = 2:  G(r) = K0(r) / (2 pi)

The regularized force is grad(psi_eps * G), with psi_eps the standard radial
bump rescaled to the ball of radius eps. Both G and psi_eps are radial, so the
ball integral collapses onto spherical shells: the average of G over a sphere
of radius s, seen from a point at distance r from its centre, is

    G(max(r, s)) * A(min(r, s)),   A(s) = sinh(s)/s (d=3),  I0(s) (d=2).

Differentiating in r gives the radial force magnitude

    F(r) = G'(r) P(r) + A'(r) Q(r),
    P(r) = int_0^min(r,eps) A(s) w(s) ds,   Q(r) = int_r^eps G(s) w(s) ds,

with w(s) = |S^{d-1}| s^{d-1} psi_eps(s). Outside the ball Q vanishes and
F(r) = P(eps) G'(r) exactly.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicHermiteSpline

from .io import read_blob, write_blob
from .special import bessel_i0, bessel_i1, bessel_k0, bessel_k1

SUPPORTED_DIMS = (2, 3)
TAIL_TOLERANCE = 1e-10
QUAD_RTOL = 1e-8
DEFAULT_RESOLUTION = 512
COARSE_STEP = 0.002
FINE_RADIUS = 2.0


class DomainError(ValueError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


class KernelBuildError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (worst residual {residual:.3e})")
        self.residual = residual


def _check_dim(d):
    if d not in SUPPORTED_DIMS:
        raise UnsupportedDimensionError(f"dimension {d} not supported, expected 2 or 3")


def _check_radius(r):
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise DomainError("radius must be > 0 (the potential is singular at the origin)")
    return r


def sphere_area(d):
    """Surface area of the unit sphere in R^d."""
    _check_dim(d)
    return 2.0 * np.pi if d == 2 else 4.0 * np.pi


# --- Bessel potential and its Newtonian split ----------------------------------


def bessel_potential(r, d):
    r = _check_radius(r)
    _check_dim(d)
    if d == 3:
        return np.exp(-r) / (4.0 * np.pi * r)
    return bessel_k0(r) / (2.0 * np.pi)


def bessel_potential_derivative(r, d):
    """Radial derivative G'(r) (negative: the potential decreases)."""
    r = _check_radius(r)
    _check_dim(d)
    if d == 3:
        return -np.exp(-r) * (1.0 + r) / (4.0 * np.pi * r * r)
    return -bessel_k1(r) / (2.0 * np.pi)


def newtonian_part(r, d):
    """Fundamental solution of -Laplacian: 1/(4 pi r) in 3D, -ln(r)/(2 pi) in 2D."""
    r = _check_radius(r)
    _check_dim(d)
    if d == 3:
        return 1.0 / (4.0 * np.pi * r)
    return -np.log(r) / (2.0 * np.pi)


def smooth_part(r, d):
    """Residual Psi = G - Phi of the Newtonian split."""
    return bessel_potential(r, d) - newtonian_part(r, d)


def grad_bessel_potential(x):
    """Gradient of G at a point (or stack of points, last axis = dimension)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    _check_dim(d)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0):
        raise DomainError("grad G is singular at x = 0")
    scale = bessel_potential_derivative(r, d) / r
    return np.asarray(scale)[..., None] * x


def fourier_inversion_potential(r, d=3):
    """G(r) from its Fourier symbol 1/(1 + |w|^2) by numerical radial inversion.

    Only d = 3, where the radial inverse transform is a one-dimensional
    sine integral handled by QUADPACK's Fourier-integral routine.
    """
    if d != 3:
        raise UnsupportedDimensionError("Fourier-inversion oracle implemented for d=3 only")
    r = float(_check_radius(r))
    val, _ = integrate.quad(
        lambda w: w / (1.0 + w * w), 0.0, np.inf, weight="sin", wvar=r, limlst=200
    )
    return val / (2.0 * np.pi ** 2 * r)


# --- Mollifier -------------------------------------------------------------------


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _bump_normalization(d):
    area = sphere_area(d)
    mass, _ = integrate.quad(
        lambda s: area * s ** (d - 1) * math.exp(-1.0 / (1.0 - s * s)),
        0.0, 1.0, epsabs=0.0, epsrel=1e-13, limit=200,
    )
    return 1.0 / mass


@dataclass(frozen=True)
class MollifierSpec:
    epsilon: float
    dim: int
    normalization: float = field(default=None)

    def __post_init__(self):
        _check_dim(self.dim)
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.normalization is None:
            object.__setattr__(self, "normalization", _bump_normalization(self.dim))

    def radial(self, s):
        """psi_eps as a function of |x|."""
        s = np.asarray(s, dtype=float)
        eps = self.epsilon
        return self.normalization * eps ** (-self.dim) * _bump(s / eps)

    def mass(self):
        """Radial quadrature of psi_eps over B(0, eps)."""
        area = sphere_area(self.dim)
        val, _ = integrate.quad(
            lambda s: area * s ** (self.dim - 1) * float(self.radial(s)),
            0.0, self.epsilon, epsabs=0.0, epsrel=1e-13, limit=200,
        )
        return val


def mollifier_value(x, spec):
    x = np.asarray(x, dtype=float)
    return spec.radial(np.linalg.norm(x, axis=-1))


# --- Shell averaging functions -----------------------------------------------------


def _shell_gain(s, d):
    s = np.asarray(s, dtype=float)
    if d == 2:
        return bessel_i0(s)
    out = np.ones_like(s)
    nz = s > 0
    out[nz] = np.sinh(s[nz]) / s[nz]
    return out


def _shell_gain_derivative(r, d):
    r = np.asarray(r, dtype=float)
    if d == 2:
        return bessel_i1(r)
    # d/dr sinh(r)/r = sum_k 2k r^(2k-1) / (2k+1)!, summed directly to avoid
    # the cancellation in (r cosh r - sinh r)/r^2.
    total = np.zeros_like(r)
    term = r / 3.0
    for k in range(1, 30):
        total = total + term
        term = term * r * r / (2 * k * (2 * k + 3))
    return total


# --- Kernel table ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KernelTable:
    """Radial samples of the mollified force magnitude F, with grad G_eps(x) = F(|x|) x/|x|.

    Samples are uniformly spaced with step ``h`` on [0, r_split] and step
    ``h_coarse`` from r_split to ``r_cut``, where the force is smooth on the
    unit scale of the potential. Lookups are monotone cubic Hermite
    interpolation on those samples (second-order knot slopes passed through
    the Hyman monotonicity filter).
    """

    epsilon: float
    dim: int
    r_samples: np.ndarray
    f_samples: np.ndarray
    r_cut: float
    tail_bound: float
    h: float = None
    n_fine: int = None
    h_coarse: float = None
    shell_mass: float = 1.0
    force_constant: float = float("nan")
    coeffs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.coeffs is None:
            object.__setattr__(self, "coeffs", _hermite_coefficients(self.r_samples, self.f_samples))
        if not math.isfinite(self.force_constant):
            fc = float(np.max(np.abs(self.f_samples))) * self.epsilon ** (self.dim - 1)
            object.__setattr__(self, "force_constant", fc)
        self.r_samples.setflags(write=False)
        self.f_samples.setflags(write=False)
        self.coeffs.setflags(write=False)

    @property
    def r_split(self):
        return self.h * self.n_fine

    @property
    def max_force(self):
        return float(np.max(np.abs(self.f_samples)))

    def radial(self, r):
        """Interpolated F(r); zero for r >= r_cut."""
        r = np.asarray(r, dtype=float)
        shape = r.shape
        r = r.reshape(-1)
        n_int = self.coeffs.shape[0]
        fine = r < self.r_split
        idx = np.where(fine, np.floor(r / self.h),
                       self.n_fine + np.floor((r - self.r_split) / self.h_coarse))
        idx = np.clip(idx, 0, n_int - 1).astype(np.int64)
        dx = r - self.r_samples[idx]
        c = self.coeffs[idx]
        val = ((c[:, 0] * dx + c[:, 1]) * dx + c[:, 2]) * dx + c[:, 3]
        val = np.where(r >= self.r_cut, 0.0, val)
        return val[0] if shape == () else val.reshape(shape)

    def to_header(self):
        return {
            "kind": "kernel-table",
            "epsilon": self.epsilon,
            "d": self.dim,
            "r_cut": self.r_cut,
            "samples": int(self.r_samples.size),
            "h": self.h,
            "n_fine": self.n_fine,
            "h_coarse": self.h_coarse,
            "tail_bound": self.tail_bound,
            "shell_mass": self.shell_mass,
            "force_constant": self.force_constant,
        }

    def save(self, path):
        write_blob(path, self.to_header(), [self.r_samples, self.f_samples])

    @classmethod
    def load(cls, path):
        header, flat = read_blob(path)
        n = header["samples"]
        if flat.size != 2 * n:
            raise ValueError(f"{path}: expected {2 * n} floats, found {flat.size}")
        return cls(
            epsilon=header["epsilon"], dim=header["d"],
            r_samples=flat[:n].copy(), f_samples=flat[n:].copy(),
            r_cut=header["r_cut"], tail_bound=header["tail_bound"],
            h=header["h"], n_fine=header["n_fine"], h_coarse=header["h_coarse"],
            shell_mass=header["shell_mass"], force_constant=header["force_constant"],
        )


def _hermite_coefficients(r, f):
    """Per-interval cubic coefficients (c3, c2, c1, c0) in powers of (x - r_k)."""
    slope = np.gradient(f, r, edge_order=2)
    # F is odd in r: the centred slope at 0 uses F(-h) = -F(h)
    slope[0] = f[1] / r[1]
    secant = np.diff(f) / np.diff(r)
    # Hyman filter: cap |slope| at 3 min(|adjacent secants|) where the data
    # are monotone over the surrounding four intervals; near a local extremum
    # the second-order slope is kept, otherwise the cap flattens the peak
    pad = np.concatenate([[secant[0]], secant, [secant[-1]]])
    s_m2, s_m1, s_p1, s_p2 = pad[:-3], pad[1:-2], pad[2:-1], pad[3:]
    mono = (s_m2 * s_m1 > 0) & (s_m1 * s_p1 > 0) & (s_p1 * s_p2 > 0)
    cap = 3.0 * np.minimum(np.abs(s_m1), np.abs(s_p1))
    inner = slope[1:-1]
    inner = np.where(mono & (inner * s_m1 < 0), 0.0, inner)
    inner = np.where(mono, np.sign(inner) * np.minimum(np.abs(inner), cap), inner)
    slope[1:-1] = inner
    spline = CubicHermiteSpline(r, f, slope, extrapolate=False)
    return np.ascontiguousarray(spline.c.T)


def eval_force(table, x):
    """grad G_eps at displacement(s) x; zero at x = 0 and beyond r_cut."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    scale = np.where(r > 0, table.radial(r) / safe, 0.0)
    return np.asarray(scale)[..., None] * x


def _segment_integrals(f, edges):
    """Adaptive quadrature of f over consecutive [edges[k], edges[k+1]]."""
    vals = np.empty(edges.size - 1)
    worst = 0.0
    for k in range(edges.size - 1):
        v, err = integrate.quad(f, edges[k], edges[k + 1], epsabs=1e-300, epsrel=1e-12, limit=100)
        vals[k] = v
        worst = max(worst, err / max(abs(v), 1e-300))
    return vals, worst


def _cutoff_radius(d, shell_mass, eps):
    def excess(r):
        return shell_mass * abs(float(bessel_potential_derivative(r, d))) - TAIL_TOLERANCE

    r0 = optimize.brentq(excess, 1.0, 200.0, xtol=1e-12)
    return r0 + eps


def mollified_force_inside(epsilon, d, radii):
    """F(r) for 0 <= r <= eps from the shell decomposition (vectorized over radii).

    Returns (F, P(eps), worst relative quadrature residual).
    """
    radii = np.asarray(radii, dtype=float)
    spec = MollifierSpec(epsilon, d)
    area = sphere_area(d)

    def w(s):
        return area * s ** (d - 1) * float(spec.radial(s))

    def gain_weight(s):
        return float(_shell_gain(s, d)) * w(s)

    def potential_weight(s):
        return float(bessel_potential(s, d)) * w(s) if s > 0 else 0.0

    edges = np.unique(np.concatenate([[0.0], radii, [epsilon]]))
    p_seg, err_p = _segment_integrals(gain_weight, edges)
    q_seg, err_q = _segment_integrals(potential_weight, edges)
    p_cum = np.concatenate([[0.0], np.cumsum(p_seg)])
    q_tail = np.concatenate([np.cumsum(q_seg[::-1])[::-1], [0.0]])
    pos = np.searchsorted(edges, radii)
    p_at, q_at = p_cum[pos], q_tail[pos]

    force = np.zeros_like(radii)
    nz = radii > 0
    force[nz] = (bessel_potential_derivative(radii[nz], d) * p_at[nz]
                 + _shell_gain_derivative(radii[nz], d) * q_at[nz])
    return force, float(p_cum[-1]), max(err_p, err_q)


def build_kernel_table(epsilon, d, resolution=DEFAULT_RESOLUTION):
    """Tabulate the radial magnitude of grad(psi_eps * G) from 0 to r_cut."""
    _check_dim(d)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if resolution < 64:
        raise ValueError("resolution must be at least 64 samples per epsilon")
    h = epsilon / resolution
    inner = h * np.arange(resolution + 1)
    f_inner, shell_mass, residual = mollified_force_inside(epsilon, d, inner)
    if not residual <= QUAD_RTOL or not np.all(np.isfinite(f_inner)):
        raise KernelBuildError("shell quadrature did not converge", residual)

    r_cut = _cutoff_radius(d, shell_mass, epsilon)
    # fine spacing out to max(2 eps, FINE_RADIUS), then a coarse spacing
    # resolving the unit scale of the potential
    n_fine = int(math.ceil(max(2.0 * epsilon, FINE_RADIUS) / h))
    r_split = h * n_fine
    h_coarse = max(h, COARSE_STEP)
    n_coarse = int(math.ceil((r_cut - r_split) / h_coarse)) + 1
    r = np.concatenate([h * np.arange(n_fine), r_split + h_coarse * np.arange(n_coarse)])
    f = np.empty_like(r)
    f[: resolution + 1] = f_inner
    f[resolution + 1:] = shell_mass * bessel_potential_derivative(r[resolution + 1:], d)
    tail = shell_mass * abs(float(bessel_potential_derivative(r_cut, d)))
    return KernelTable(epsilon=float(epsilon), dim=d, r_samples=r, f_samples=f,
                       r_cut=float(r_cut), tail_bound=tail, h=h, n_fine=n_fine,
                       h_coarse=h_coarse, shell_mass=shell_mass)


def kernel_report(table, eps_list=(0.4, 0.2, 0.1, 0.05), resolution=128):
    """Summary used by ``validate-kernel``: scaling exponent of max|F| over eps_list."""
    from .harness import fit_rate  # local: harness imports this module

    maxima = [build_kernel_table(e, table.dim, resolution).max_force for e in eps_list]
    fit = fit_rate(np.log(eps_list), np.log(maxima))
    spec = MollifierSpec(table.epsilon, table.dim)
    return {
        "epsilon": table.epsilon,
        "d": table.dim,
        "max_force": table.max_force,
        "fitted_exponent": fit.slope,
        "tail_bound": table.tail_bound,
        "mollifier_mass_error": abs(spec.mass() - 1.0),
    }


def report_json(table, **kwargs):
    return json.dumps(kernel_report(table, **kwargs), indent=2)
