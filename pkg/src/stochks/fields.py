"""Diffusion coefficient fields nu_t(x), sigma_t(x) and Wiener increment streams.

Fields map (t, x) with x of shape (M, d) to matrices of shape (M, d, d').
Noise streams are counter-based (Philox keyed by (seed_root, stream_id)), so
stream ``i`` yields the same increments no matter which other streams are
drawn, in what order, or on how many threads.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb
from scipy.stats import qmc

FIELD_KINDS = ("constant", "time-varying", "shear", "tabulated")
DIVERGENCE_TOL = 1e-8
FD_STEP = 1e-3

W_STREAM = 0
# Increments live on a fixed-point grid so Brownian-bridge refinement can
# split them exactly: for multiples of QUANTUM below 2^53 QUANTUM in size,
# floating-point addition and subtraction are exact.
QUANTUM = 2.0 ** -48
INCREMENT_BOUND = 2.0 ** 53 * QUANTUM / 2


class FieldValidationError(ValueError):
    """A coefficient field violates one of the standing assumptions."""

    def __init__(self, assumption, detail, point=None):
        self.assumption = assumption
        self.point = point
        msg = f"assumption {assumption} violated: {detail}"
        if point is not None:
            msg += f" at {np.round(np.asarray(point, dtype=float), 6).tolist()}"
        super().__init__(msg)


def _matrix(value, d, dp, name):
    if np.isscalar(value):
        mat = float(value) * np.eye(d, dp)
    else:
        mat = np.asarray(value, dtype=float)
    if mat.shape != (d, dp):
        raise ValueError(f"{name} must be a {d}x{dp} matrix, got shape {mat.shape}")
    return mat


def _periodic_interp(table, box, x):
    """Multilinear periodic interpolation of node values (n,)*d + tail on [-L, L)^d."""
    d = x.shape[1]
    n = table.shape[0]
    h = 2.0 * box / n
    s = (x + box) / h
    i0 = np.floor(s).astype(np.int64)
    frac = s - i0
    out = 0.0
    for corner in itertools.product((0, 1), repeat=d):
        w = np.ones(x.shape[0])
        idx = []
        for a, c in enumerate(corner):
            w = w * (frac[:, a] if c else 1.0 - frac[:, a])
            idx.append((i0[:, a] + c) % n)
        out = out + w[:, None, None] * table[tuple(idx)]
    return out


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """nu and sigma as functions of (t, x); build through :func:`make_field`."""

    kind: str
    dim: int
    noise_dim: int
    params: dict = field(repr=False)
    spatially_constant: bool = True
    lambda_check: float = float("nan")
    Lambda_check: float = float("nan")

    def nu(self, t, x):
        return self._eval("nu", t, np.atleast_2d(np.asarray(x, dtype=float)))

    def sigma(self, t, x):
        return self._eval("sigma", t, np.atleast_2d(np.asarray(x, dtype=float)))

    def diffusion_matrix(self, t, x):
        """a = nu nu^T + sigma sigma^T, shape (M, d, d)."""
        nu = self.nu(t, x)
        sg = self.sigma(t, x)
        return np.einsum("mik,mjk->mij", nu, nu) + np.einsum("mik,mjk->mij", sg, sg)

    def nu_const(self, t):
        return self.nu(t, np.zeros((1, self.dim)))[0]

    def sigma_const(self, t):
        return self.sigma(t, np.zeros((1, self.dim)))[0]

    def _eval(self, which, t, x):
        p = self.params
        m = x.shape[0]
        if self.kind == "constant":
            return np.broadcast_to(p[which], (m, self.dim, self.noise_dim))
        if self.kind == "time-varying":
            base = np.broadcast_to(p[which], (m, self.dim, self.noise_dim))
            if which == "sigma":
                mod = 1.0 + p["modulation"] * np.sin(2.0 * np.pi * p["frequency"] * np.asarray(t))
                base = base * np.broadcast_to(mod, (m,))[:, None, None]
            return base
        if self.kind == "shear":
            if which == "nu":
                return np.broadcast_to(p["nu"], (m, self.dim, self.noise_dim))
            # column k of sigma varies only along directions other than its own
            # row, so sum_i D_i sigma^{ik} = 0 identically
            out = np.zeros((m, self.dim, self.noise_dim))
            kappa = p["wavenumber"]
            for k in range(min(self.dim, self.noise_dim)):
                other = (k + 1) % self.dim
                out[:, k, k] = p["base"] + p["amplitude"] * np.sin(kappa * x[:, other])
            return out
        if self.kind == "tabulated":
            return _periodic_interp(p[which], p["box"], x)
        raise ValueError(f"unknown field kind {self.kind!r}")


def _check_keys(spec, allowed, where):
    unknown = set(spec) - set(allowed)
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def make_field(spec, dim=2, box=8.0, horizon=1.0, validate=True, m=3, samples=1024):
    """Construct a coefficient field from a configuration mapping.

    ``spec`` keys: ``kind`` plus ``nu`` and ``sigma`` blocks. Supported kinds:

    * ``constant``: ``nu.scale`` / ``nu.matrix``, same for ``sigma``
    * ``time-varying``: constant nu, sigma(t) = S (1 + modulation sin(2 pi f t))
    * ``shear``: constant nu, sigma^{kk}(x) = base + amplitude sin(kappa x_{k+1})
    * ``tabulated``: node values of shape (n,)*d + (d, d') for nu and sigma

    With ``validate`` the field is checked against the standing assumptions
    (ellipticity, divergence-free sigma, C^m bounds) and rejected on failure.
    """
    spec = dict(spec)
    kind = spec.get("kind", "constant")
    if kind not in FIELD_KINDS:
        raise ValueError(f"field kind must be one of {FIELD_KINDS}, got {kind!r}")
    dp = int(spec.get("noise_dim", dim))
    nu_spec = dict(spec.get("nu", {}))
    sg_spec = dict(spec.get("sigma", {}))

    def const_matrix(block, default, name):
        if "matrix" in block:
            return _matrix(block["matrix"], dim, dp, name)
        return _matrix(float(block.get("scale", default)), dim, dp, name)

    params = {}
    spatially_constant = True
    if kind == "constant":
        _check_keys(nu_spec, ("scale", "matrix"), "field.nu")
        _check_keys(sg_spec, ("scale", "matrix"), "field.sigma")
        params["nu"] = const_matrix(nu_spec, math.sqrt(2.0), "nu")
        params["sigma"] = const_matrix(sg_spec, 0.0, "sigma")
    elif kind == "time-varying":
        _check_keys(nu_spec, ("scale", "matrix"), "field.nu")
        _check_keys(sg_spec, ("scale", "matrix", "modulation", "frequency"), "field.sigma")
        params["nu"] = const_matrix(nu_spec, math.sqrt(2.0), "nu")
        params["sigma"] = const_matrix(sg_spec, 0.5, "sigma")
        params["modulation"] = float(sg_spec.get("modulation", 0.5))
        params["frequency"] = float(sg_spec.get("frequency", 1.0))
    elif kind == "shear":
        _check_keys(nu_spec, ("scale", "matrix"), "field.nu")
        _check_keys(sg_spec, ("base", "amplitude", "mode"), "field.sigma")
        params["nu"] = const_matrix(nu_spec, math.sqrt(2.0), "nu")
        params["base"] = float(sg_spec.get("base", 0.0))
        params["amplitude"] = float(sg_spec.get("amplitude", 0.1))
        params["mode"] = int(sg_spec.get("mode", 1))
        params["wavenumber"] = math.pi * params["mode"] / box
        spatially_constant = False
    else:
        _check_keys(nu_spec, ("values",), "field.nu")
        _check_keys(sg_spec, ("values",), "field.sigma")
        for name, block in (("nu", nu_spec), ("sigma", sg_spec)):
            values = block["values"]
            if isinstance(values, str):
                values = np.load(values)
            values = np.asarray(values, dtype=float)
            if values.shape[dim:] != (dim, dp) or values.ndim != dim + 2:
                raise ValueError(f"tabulated {name} must have shape (n,)*{dim} + ({dim}, {dp})")
            params[name] = values
        params["box"] = box
        spatially_constant = False

    fld = CoefficientField(kind=kind, dim=dim, noise_dim=dp, params=params,
                           spatially_constant=spatially_constant)
    report = assumption1_report(fld, m=m, samples=samples, box=box, horizon=horizon)
    object.__setattr__(fld, "lambda_check", report["lambda_est"])
    object.__setattr__(fld, "Lambda_check", report["Lambda_est"])
    if validate and not report["pass"]:
        label, detail = report["violation"]
        raise FieldValidationError(label, detail, report["worst_point"])
    return fld


def _sample_points(dim, samples, box, horizon, seed=0):
    # Sobol points are balanced in blocks of 2^m: draw the enclosing block
    sobol = qmc.Sobol(d=dim + 1, scramble=True, seed=seed)
    u = sobol.random_base2(max(0, math.ceil(math.log2(samples))))[:samples]
    t = u[:, 0] * horizon
    x = -box + 2.0 * box * u[:, 1:]
    return t, x


def _fd_derivative(func, t, x, alpha, h=FD_STEP):
    """Central finite difference D^alpha of func(t, x) -> (M, d, d')."""
    offsets = [range(a + 1) for a in alpha]
    out = 0.0
    for js in itertools.product(*offsets):
        shift = np.array([(a / 2.0 - j) * h for a, j in zip(alpha, js)])
        weight = np.prod([(-1) ** j * comb(a, j) for a, j in zip(alpha, js)])
        out = out + weight * func(t, x + shift)
    return out / h ** sum(alpha)


def _eval_at_times(fld, which, t, x):
    return np.asarray(getattr(fld, which)(t, x))


def assumption1_report(fld, m=3, samples=1024, box=8.0, horizon=1.0):
    """Estimate ellipticity floor, C^m bound and divergence of sigma on quasi-random samples.

    Returns ``{lambda_est, Lambda_est, max_divergence, pass}`` plus the label
    and location of the first violated condition. ``pass=False`` is data.
    """
    if samples < 1000:
        raise ValueError("at least 1000 samples are required")
    d = fld.dim
    t, x = _sample_points(d, samples, box, horizon)

    nu = _eval_at_times(fld, "nu", t, x)
    a = np.einsum("mik,mjk->mij", nu, nu)
    eig = np.linalg.eigvalsh(a)[:, 0]
    worst_ellip = int(np.argmin(eig))
    lambda_est = float(eig[worst_ellip])

    div = np.zeros((samples, fld.noise_dim))
    for i in range(d):
        alpha = tuple(1 if a_ == i else 0 for a_ in range(d))
        div += _fd_derivative(lambda tt, xx: fld.sigma(tt, xx), t, x, alpha)[:, i, :]
    div_abs = np.abs(div).max(axis=1)
    worst_div = int(np.argmax(div_abs))
    max_div = float(div_abs[worst_div])

    norms = {}
    for which in ("nu", "sigma"):
        sup = np.abs(_eval_at_times(fld, which, t, x)).max(axis=0)
        for order in range(1, m + 1):
            for alpha in itertools.product(range(order + 1), repeat=d):
                if sum(alpha) != order:
                    continue
                deriv = _fd_derivative(
                    lambda tt, xx: _eval_at_times(fld, which, tt, xx), t, x, alpha)
                sup = np.maximum(sup, np.abs(deriv).max(axis=0))
        norms[which] = sup
    Lambda_est = float((norms["nu"] + norms["sigma"]).max())

    violation = None
    worst_point = None
    if not lambda_est > 1e-12:
        violation = ("(i)", f"ellipticity floor {lambda_est:.3e} <= 0")
        worst_point = np.concatenate([[t[worst_ellip]], x[worst_ellip]])
    elif max_div > DIVERGENCE_TOL:
        violation = ("(iii)", f"divergence of sigma {max_div:.3e} > {DIVERGENCE_TOL:g}")
        worst_point = np.concatenate([[t[worst_div]], x[worst_div]])
    elif not math.isfinite(Lambda_est):
        violation = ("(ii)", "non-finite C^m norm estimate")
    return {
        "lambda_est": lambda_est,
        "Lambda_est": Lambda_est,
        "max_divergence": max_div,
        "m": m,
        "samples": samples,
        "pass": violation is None,
        "violation": violation,
        "worst_point": None if worst_point is None else worst_point.tolist(),
    }


# --- Wiener increments ---------------------------------------------------------


def _generator(seed_root, stream_id, level=0):
    key = np.array([seed_root, stream_id], dtype=np.uint64)
    counter = np.array([0, 0, 0, level], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True, eq=False)
class WienerPath:
    seed_root: int
    stream_id: int
    n_steps: int
    dt: float
    dims: int
    increments: np.ndarray
    level: int = 0

    def refine(self):
        """Halve dt by Brownian-bridge subdivision; pairwise sums reproduce the coarse increments bit-for-bit."""
        rng = _generator(self.seed_root, self.stream_id, self.level + 1)
        xi = rng.standard_normal(self.increments.shape)
        coarse = self.increments
        first = _quantize(0.5 * coarse + 0.5 * math.sqrt(self.dt) * xi)
        second = coarse - first  # exact: both on the QUANTUM grid
        fine = np.empty((2 * self.n_steps, self.dims))
        fine[0::2] = first
        fine[1::2] = second
        return WienerPath(self.seed_root, self.stream_id, 2 * self.n_steps, self.dt / 2,
                          self.dims, fine, self.level + 1)

    def values(self):
        """Path values W at t_0 = 0, ..., t_n."""
        return np.vstack([np.zeros((1, self.dims)), np.cumsum(self.increments, axis=0)])


def _quantize(x):
    """Round to the fixed-point grid QUANTUM; sums of such values below 2^53 QUANTUM are exact."""
    out = np.round(np.asarray(x) / QUANTUM) * QUANTUM
    if np.any(np.abs(out) >= INCREMENT_BOUND):
        raise ArithmeticError(f"Wiener increment beyond the exact range |dW| < {INCREMENT_BOUND:g}")
    return out


def sample_increments(seed_root, stream_id, n_steps, dt, dims):
    if n_steps < 1 or not dt > 0:
        raise ValueError("need n_steps >= 1 and dt > 0")
    rng = _generator(seed_root, stream_id)
    inc = _quantize(math.sqrt(dt) * rng.standard_normal((n_steps, dims)))
    return WienerPath(int(seed_root), int(stream_id), int(n_steps), float(dt), int(dims), inc)


class StreamBank:
    """Per-particle Brownian streams drawn in chunks of steps.

    Row ``r`` of each block comes from stream ``stream_ids[r]`` and equals the
    corresponding rows of ``sample_increments(seed_root, stream_ids[r], ...)``.
    """

    def __init__(self, seed_root, stream_ids, dt, dims, chunk=256):
        self.seed_root = int(seed_root)
        self.stream_ids = np.asarray(stream_ids, dtype=np.int64)
        self.dt = float(dt)
        self.dims = int(dims)
        self.chunk = int(chunk)
        self._gens = [_generator(self.seed_root, int(s)) for s in self.stream_ids]
        self._block = None
        self._pos = self.chunk

    def next(self):
        if self._pos >= self.chunk:
            self._block = np.stack(
                [g.standard_normal((self.chunk, self.dims)) for g in self._gens], axis=1)
            self._block = _quantize(self._block * math.sqrt(self.dt))
            self._pos = 0
        out = self._block[self._pos]
        self._pos += 1
        return out
