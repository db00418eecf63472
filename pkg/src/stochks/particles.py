"""Regularized interacting particle system on the periodic box.

    dX^i = chi/(N-1) sum_{j != i} grad G_eps(X^i - X^j) dt + nu(X^i) dB^i + sigma(X^i) dW

integrated with Euler-Maruyama. Displacements use the minimum-image
convention and the force is cut off at min(r_cut, L), which lets the pair sum
run over a cell list.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _nbody
from .grid import DensityField, minimum_image, wrap

INIT_STREAM = 2 ** 62
DEFAULT_BOX = 8.0


class IntegrationError(FloatingPointError):
    def __init__(self, particle, t):
        super().__init__(f"non-finite position for particle {particle} at t={t:.6g}")
        self.particle = particle
        self.t = t


class SamplingError(RuntimeError):
    pass


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    t: float = 0.0
    epsilon: float = float("nan")
    stream_ids: np.ndarray = None
    box: float = DEFAULT_BOX

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[0] < 2:
            raise ValueError("an ensemble needs N >= 2 particles, positions of shape (N, d)")
        if self.stream_ids is None:
            self.stream_ids = np.arange(1, self.N + 1, dtype=np.int64)
        self.stream_ids = np.asarray(self.stream_ids, dtype=np.int64)
        if self.stream_ids.shape != (self.N,):
            raise ValueError("one stream id per particle")
        if np.unique(self.stream_ids).size != self.N:
            raise ValueError("stream ids must be distinct")
        if not np.all(np.isfinite(self.positions)):
            bad = int(np.argmax(~np.isfinite(self.positions).all(axis=1)))
            raise IntegrationError(bad, self.t)

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    def permuted(self, perm):
        return replace(self, positions=self.positions[perm].copy(),
                       stream_ids=self.stream_ids[perm].copy())


@dataclass(frozen=True)
class InitialDensity:
    """rho_0: ``gaussian`` (mean, cov), ``gaussian-mixture`` (means, covs, weights) or ``grid-tabulated`` (density)."""

    kind: str = "gaussian"
    dim: int = 2
    mean: tuple = None
    cov: object = 1.0
    means: tuple = None
    covs: tuple = None
    weights: tuple = None
    density: DensityField = field(default=None, repr=False)

    def components(self):
        if self.kind == "gaussian":
            mean = np.zeros(self.dim) if self.mean is None else np.asarray(self.mean, float)
            return [(1.0, mean, _cov_matrix(self.cov, self.dim))]
        if self.kind == "gaussian-mixture":
            w = np.asarray(self.weights, float)
            w = w / w.sum()
            return [(wi, np.asarray(m, float), _cov_matrix(c, self.dim))
                    for wi, m, c in zip(w, self.means, self.covs)]
        raise ValueError(f"{self.kind} has no Gaussian components")

    def on_grid(self, grid):
        """Density values on the grid, renormalized to unit discrete mass."""
        if self.kind == "grid-tabulated":
            vals = np.asarray(self.density.values, dtype=float).copy()
        else:
            x = grid.coords
            vals = np.zeros(grid.shape)
            for w, mean, cov in self.components():
                diff = minimum_image(x - mean, grid.box)
                prec = np.linalg.inv(cov)
                quad = np.einsum("...i,ij,...j->...", diff, prec, diff)
                norm = 1.0 / math.sqrt((2 * math.pi) ** self.dim * np.linalg.det(cov))
                vals += w * norm * np.exp(-0.5 * quad)
        return DensityField(grid, vals / grid.integrate(vals), 0.0)


def _cov_matrix(cov, d):
    if np.isscalar(cov):
        return float(cov) * np.eye(d)
    cov = np.asarray(cov, dtype=float)
    return np.diag(cov) if cov.ndim == 1 else cov


def _rng(seed):
    key = np.array([seed, INIT_STREAM], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _box_muller(rng, n, d):
    m = (n * d + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
    return z[: n * d].reshape(n, d)


def sample_initial(density, N, seed, box=DEFAULT_BOX, epsilon=float("nan")):
    """Draw N i.i.d. positions from rho_0, deterministically in ``seed``."""
    if N < 2:
        raise ValueError("N must be at least 2")
    rng = _rng(seed)
    d = density.dim
    if density.kind in ("gaussian", "gaussian-mixture"):
        comps = density.components()
        weights = np.array([c[0] for c in comps])
        which = np.searchsorted(np.cumsum(weights), rng.random(N) * weights.sum(), side="right")
        which = np.minimum(which, len(comps) - 1)
        z = _box_muller(rng, N, d)
        pos = np.empty((N, d))
        for k, (_, mean, cov) in enumerate(comps):
            sel = which == k
            pos[sel] = mean + z[sel] @ np.linalg.cholesky(cov).T
        pos = wrap(pos, box)
    elif density.kind == "grid-tabulated":
        pos = _rejection_sample(density.density, N, rng)
    else:
        raise ValueError(f"unknown initial density kind {density.kind!r}")
    return ParticleEnsemble(pos, 0.0, epsilon, np.arange(1, N + 1), box)


def _rejection_sample(dens, N, rng):
    grid = dens.grid
    vals = np.clip(dens.values, 0.0, None)
    top = vals.max()
    if not top > 0:
        raise SamplingError("tabulated density is identically zero")
    budget = int(1e6) * N
    out = []
    drawn = 0
    have = 0
    batch = max(4 * N, 1024)
    while have < N:
        if drawn >= budget:
            raise SamplingError(f"rejection sampling exhausted {budget} proposals")
        prop = -grid.box + 2.0 * grid.box * rng.random((batch, grid.dim))
        # piecewise-constant density around each node
        idx = np.floor((prop + grid.box) / grid.dx + 0.5).astype(np.int64) % grid.n
        accept = rng.random(batch) * top < vals[tuple(idx.T)]
        out.append(prop[accept])
        have += int(accept.sum())
        drawn += batch
    return np.concatenate(out)[:N]


# --- drift ------------------------------------------------------------------------


def effective_cutoff(table, box):
    return min(table.r_cut, box)


def pairwise_drift(ens, table, chi, method="auto"):
    """chi/(N-1) sum_{j != i} grad G_eps(x_i - x_j), shape (N, d).

    ``method``: ``cells`` (cell list), ``brute`` (all ordered pairs), ``pairs``
    (serial, each unordered pair once) or ``auto``, which uses the cell list
    when the box holds at least three cells per axis and ``pairs`` otherwise.
    """
    if table.dim != ens.dim:
        raise ValueError("kernel table dimension does not match the ensemble")
    pos = np.ascontiguousarray(ens.positions)
    r_cut = effective_cutoff(table, ens.box)
    coeffs = table.coeffs
    tab = _nbody.lookup_params(table)
    ncell = max(1, int(math.floor(2.0 * ens.box / r_cut)))
    if method == "auto":
        method = "cells" if ncell >= 3 else "pairs"
    if method == "brute":
        raw = _nbody.drift_brute(pos, ens.box, tab, coeffs, r_cut)
    elif method == "pairs":
        raw = _nbody.drift_pairs(pos, ens.box, tab, coeffs, r_cut)
    elif method == "cells":
        raw = _nbody.drift_cells(pos, ens.box, tab, coeffs, r_cut, ncell,
                                 _neighbors(ncell, ens.dim))
    else:
        raise ValueError(f"unknown method {method!r}")
    return (chi / (ens.N - 1)) * raw


_NEIGHBOR_CACHE = {}


def _neighbors(ncell, d):
    key = (ncell, d)
    if key not in _NEIGHBOR_CACHE:
        _NEIGHBOR_CACHE[key] = _nbody.neighbor_table(ncell, d)
    return _NEIGHBOR_CACHE[key]


def max_stable_dt(table, chi):
    """Largest dt with dt * chi * max|F| <= 0.1 eps."""
    if chi == 0:
        return math.inf
    return 0.1 * table.epsilon / (abs(chi) * table.max_force)


# --- time stepping ----------------------------------------------------------------


def noise_displacement(field, t, x, dW_common, dB):
    """nu_t(x_i) dB_i + sigma_t(x_i) dW for every particle."""
    out = np.einsum("nik,nk->ni", field.nu(t, x), dB)
    if np.any(dW_common):
        out += np.einsum("nik,k->ni", field.sigma(t, x), dW_common)
    return out


def em_step(ens, table, field, dW_common, dB, dt, chi, method="auto"):
    """One Euler-Maruyama step; every particle shares dW_common and uses its own row of dB."""
    x = ens.positions
    drift = pairwise_drift(ens, table, chi, method) if chi != 0 else 0.0
    new = x + drift * dt + noise_displacement(field, ens.t, x, np.asarray(dW_common), dB)
    finite = np.isfinite(new).all(axis=1)
    if not finite.all():
        raise IntegrationError(int(np.argmin(finite)), ens.t + dt)
    return replace(ens, positions=wrap(new, ens.box), t=ens.t + dt)


def n_steps_for(T, dt):
    steps = T / dt
    n = int(round(steps))
    if abs(steps - n) > 1e-9 * max(1.0, steps):
        raise ValueError(f"T/dt = {steps} is not an integer")
    return n


def integrate(ens, table, field, w_path, b_streams, T, dt, chi, observers=(), stride=1,
              method="auto"):
    """Apply em_step round(T/dt) times; observers are called at step 0 and every ``stride`` steps.

    ``w_path`` is a WienerPath for the common noise, ``b_streams`` a StreamBank
    (or array of shape (steps, N, d')) for the idiosyncratic noises.
    Returns (final ensemble, list of observer outputs per observation).
    """
    steps = n_steps_for(T, dt)
    if steps > 0 and w_path.n_steps < steps:
        raise ValueError("common-noise path shorter than the horizon")
    records = [_observe(observers, ens)]
    for k in range(steps):
        dB = b_streams.next() if hasattr(b_streams, "next") else b_streams[k]
        ens = em_step(ens, table, field, w_path.increments[k], dB, dt, chi, method)
        if (k + 1) % stride == 0 or k + 1 == steps:
            records.append(_observe(observers, ens))
    return ens, records


def _observe(observers, ens):
    return {name: fn(ens) for name, fn in (observers.items() if isinstance(observers, dict) else
                                           ((getattr(o, "__name__", str(i)), o)
                                            for i, o in enumerate(observers)))}


# --- observables -----------------------------------------------------------------


def test_functional(ens, phi):
    """<rho^{eps,N}, phi> = (1/N) sum_i phi(x_i)."""
    vals = np.asarray(phi(ens.positions), dtype=float)
    return float(np.mean(vals))


test_functional.__test__ = False  # not a pytest test


def moments(ens, radius=None):
    x = ens.positions
    radius = 0.75 * ens.box if radius is None else radius
    return {
        "t": ens.t,
        "mean": x.mean(axis=0).tolist(),
        "second_moment": (x ** 2).mean(axis=0).tolist(),
        "min_pair_distance": float(_nbody.min_pair_distance(np.ascontiguousarray(x), ens.box)),
        "mass_outside_radius": float(np.mean(np.linalg.norm(x, axis=1) > radius)),
    }


def silverman_bandwidth(positions):
    n, d = positions.shape
    std = positions.std(axis=0, ddof=1)
    return std * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_density(ens, bandwidth, grid):
    """Periodic product-Gaussian KDE on the grid, normalized to unit discrete mass.

    ``bandwidth`` is a scalar or per-axis array; ``"silverman"`` picks Silverman's rule.
    """
    pos = ens.positions if isinstance(ens, ParticleEnsemble) else np.asarray(ens, dtype=float)
    n_part, d = pos.shape
    if isinstance(bandwidth, str):
        bandwidth = silverman_bandwidth(pos)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    if np.any(bw <= 0):
        raise ValueError("bandwidth must be positive")
    factors = []
    for a in range(d):
        diff = minimum_image(grid.axis[None, :] - pos[:, a:a + 1], grid.box)
        factors.append(np.exp(-0.5 * (diff / bw[a]) ** 2) / (math.sqrt(2 * math.pi) * bw[a]))
    if d == 2:
        vals = factors[0].T @ factors[1]
    else:
        vals = np.einsum("pi,pj,pk->ijk", *factors, optimize=True)
    vals /= n_part
    return DensityField(grid, vals / grid.integrate(vals), getattr(ens, "t", 0.0))
