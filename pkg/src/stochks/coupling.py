"""Synchronous coupling of the particle system with its mean-field reference.

Y^i solves the McKean-Vlasov equation whose drift chi grad(G_eps * rho^eps)
is read off the grid solution rho^eps of the regularized SPDE along the same
common noise W. X^i and Y^i start at the same point and consume the same
increments (B^i, W), so (1/N) sum |X^i - Y^i|^2 measures the mean-field error
path by path.

Stream layout (seed_root, stream_id): W is stream 0, B^i is stream id i >= 1,
initial positions use stream 2^62 of a replica seed. In the shared-W pooling
mode all replicas keep seed_root for W and take disjoint blocks of B ids.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .fields import StreamBank, sample_increments
from .grid import DensityField, minimum_image
from .particles import (IntegrationError, ParticleEnsemble, em_step, kde_density,
                        n_steps_for, noise_displacement, sample_initial, test_functional)
from .spde import BLOWUP_L4, DriftOperator, SPDESolver

W_STREAM = 0


class SeedMismatchError(ValueError):
    pass


# --- test functions ---------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """phi(x) for x of shape (..., d); all shipped ones vanish with their gradient on the box boundary."""

    __test__ = False  # not a pytest class

    name: str
    box: float
    kind: str
    center: tuple = (0.0, 0.0)
    width: float = 1.0

    def window(self, x):
        # prod_k cos^2(pi x_k / 2L): C^1, zero with zero slope at x_k = +-L
        return np.prod(np.cos(0.5 * np.pi * x / self.box) ** 2, axis=-1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "one":
            return np.ones(x.shape[:-1])
        if self.kind == "bump":
            c = np.zeros(x.shape[-1])
            c[: len(self.center)] = self.center[: x.shape[-1]]
            diff = minimum_image(x - c, self.box)
            return np.exp(-0.5 * np.sum(diff ** 2, axis=-1) / self.width ** 2) * self.window(x)
        if self.kind == "linear":
            return x[..., 0] * self.window(x)
        if self.kind == "quadratic":
            return np.sum(x ** 2, axis=-1) * self.window(x)
        raise ValueError(f"unknown test function kind {self.kind!r}")


def shipped_test_functions(box):
    """The three test functions used by the weak-error checks."""
    return (
        TestFunction("bump", box, "bump", center=(0.5, 0.0, 0.0), width=1.0),
        TestFunction("window_x1", box, "linear"),
        TestFunction("window_r2", box, "quadratic"),
    )


TEST_FUNCTION_KINDS = ("bump", "linear", "quadratic", "one")


# --- single-step operators ---------------------------------------------------------


def interpolate_field(u, grid, points, order=1):
    """Periodic interpolation of a grid vector field u (d, n, ..., n) at points (N, d).

    ``order`` 1 is bilinear/trilinear, 3 is cubic spline.
    """
    idx = ((np.asarray(points) + grid.box) / grid.dx).T
    return np.stack([map_coordinates(u[a], idx, order=order, mode="grid-wrap",
                                     prefilter=order > 1) for a in range(u.shape[0])], axis=1)


def mean_field_step(Y, rho_eps, table, field, dW_common, dB, dt, chi, drift=None, order=1):
    """Euler-Maruyama step of Y with drift chi grad(G_eps * rho^eps) interpolated at Y.

    ``drift`` may pass the precomputed grid field; otherwise it is computed from rho_eps.
    """
    if drift is None:
        drift = DriftOperator(rho_eps.grid, "regularized", table, chi, images=False)(rho_eps.values)
    x = Y.positions
    new = x + dt * interpolate_field(drift, rho_eps.grid, x, order) if chi != 0 else x.copy()
    new = new + noise_displacement(field, Y.t, x, np.asarray(dW_common), dB)
    finite = np.isfinite(new).all(axis=1)
    if not finite.all():
        raise IntegrationError(int(np.argmin(finite)), Y.t + dt)
    return replace(Y, positions=rho_eps.grid.wrap(new), t=Y.t + dt)


# --- error functionals --------------------------------------------------------------


def _check_coupled(X, Y):
    if X.positions.shape != Y.positions.shape:
        raise SeedMismatchError("ensembles have different shapes")
    if not np.array_equal(X.stream_ids, Y.stream_ids):
        raise SeedMismatchError("ensembles were driven by different Brownian streams")
    if X.t != Y.t:
        raise SeedMismatchError(f"ensembles are at different times {X.t} and {Y.t}")
    if X.box != Y.box:
        raise SeedMismatchError("ensembles live on different boxes")


def per_particle_error(X, Y):
    """|X^i - Y^i|^2 with minimum-image distances."""
    _check_coupled(X, Y)
    diff = minimum_image(X.positions - Y.positions, X.box)
    return np.sum(diff * diff, axis=1)


def coupling_error(X, Y):
    """(1/N) sum_i |X^i - Y^i|^2.

    For sequences of ensembles (trajectories) returns (time series, sup over times).
    """
    if isinstance(X, ParticleEnsemble):
        return float(np.mean(per_particle_error(X, Y)))
    if len(X) != len(Y):
        raise SeedMismatchError("trajectories have different lengths")
    series = np.array([coupling_error(x, y) for x, y in zip(X, Y)])
    return series, float(series.max()) if series.size else 0.0


def grid_functional(rho, phi):
    """<rho, phi> by the grid quadrature sum rho phi dx^d."""
    return rho.grid.integrate(rho.values * phi(rho.grid.coords))


def weak_error(X, rho, phi):
    """|<rho^{eps,N}, phi> - <rho, phi>|^2."""
    return (test_functional(X, phi) - grid_functional(rho, phi)) ** 2


def kde_l1(points, rho, bandwidth="silverman"):
    est = kde_density(points, bandwidth, rho.grid)
    return rho.grid.integrate(np.abs(est.values - rho.values))


def conditional_density_check(ensembles, rho_eps, t, bandwidth="silverman", w_keys=None,
                              min_replicas=10, min_pooled=10_000):
    """L^1 distance between the KDE of the pooled Y particles and rho^eps_t.

    Conditionally on W the Y particles of all replicas are i.i.d. with density
    rho^eps_t, so pooling is valid only if every replica used the same W;
    ``w_keys`` holds each replica's (seed_root, stream_id) of W. The default
    Silverman bandwidth shrinks with the pooled count automatically.
    """
    ensembles = list(ensembles)
    if len(ensembles) < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas, got {len(ensembles)}")
    if w_keys is not None:
        keys = {tuple(k) for k in w_keys}
        if len(keys) != 1 or len(w_keys) != len(ensembles):
            raise SeedMismatchError("replicas were driven by different common-noise paths")
    ids = np.concatenate([e.stream_ids for e in ensembles])
    if np.unique(ids).size != ids.size:
        raise SeedMismatchError("replicas share Brownian streams; they must be independent")
    for e in ensembles:
        if abs(e.t - t) > 1e-12 or abs(rho_eps.t - t) > 1e-12:
            raise SeedMismatchError(f"ensemble at t={e.t}, density at t={rho_eps.t}, requested t={t}")
    pooled = np.concatenate([e.positions for e in ensembles])
    if pooled.shape[0] < min_pooled:
        raise ValueError(f"pooled count {pooled.shape[0]} below {min_pooled}")
    return kde_l1(pooled, rho_eps, bandwidth)


# --- coupled runs -------------------------------------------------------------------


def replica_seed(seed_root, replica):
    """Deterministic 63-bit seed for replica ``replica`` of a run rooted at ``seed_root``."""
    state = np.random.SeedSequence([int(seed_root), int(replica)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & (2 ** 63 - 1)


@dataclass
class StreamLayout:
    """Which Philox streams one replica consumes."""

    w_key: tuple          # (seed_root, stream_id) of W
    b_seed: int           # seed_root of the B^i streams
    b_ids: np.ndarray     # stream ids of B^1..B^N
    init_seed: int        # seed of the initial positions

    def to_dict(self):
        return {"w_key": list(self.w_key), "b_seed": self.b_seed,
                "b_ids": [int(self.b_ids[0]), int(self.b_ids[-1])], "init_seed": self.init_seed}


def stream_layout(seed_root, replica, N, shared_w=False):
    rs = replica_seed(seed_root, replica)
    if shared_w:
        ids = np.arange(1 + replica * N, 1 + (replica + 1) * N, dtype=np.int64)
        return StreamLayout((int(seed_root), W_STREAM), int(seed_root), ids, rs)
    return StreamLayout((rs, W_STREAM), rs, np.arange(1, N + 1, dtype=np.int64), rs)


@dataclass
class CoupledRun:
    """Checkpointed output of one coupled (X, Y, rho^eps, rho) run."""

    N: int
    epsilon: float
    layout: StreamLayout
    times: list = field(default_factory=list)
    coupling: list = field(default_factory=list)
    per_particle: list = field(default_factory=list)
    weak: dict = field(default_factory=dict)
    weak_reg: dict = field(default_factory=dict)
    gap: list = field(default_factory=list)
    density_l1: list = field(default_factory=list)
    triangle_ok: bool = True
    boundary_mass: float = 0.0
    blowup: bool = False
    blowup_time: float = None
    X: ParticleEnsemble = None
    Y: ParticleEnsemble = None
    rho_eps: DensityField = None

    @property
    def sup_coupling(self):
        return max(self.coupling) if self.coupling else 0.0

    def sup_weak(self):
        return {k: max(v) for k, v in self.weak.items()}

    def csv_rows(self):
        names = list(self.weak)
        header = ["t", "coupling_error"] + [f"weak_error_{n}" for n in names] + [
            "regularization_gap", "conditional_density_L1"]
        rows = [header]
        for k, t in enumerate(self.times):
            rows.append([t, self.coupling[k]] + [self.weak[n][k] for n in names]
                        + [self.gap[k], self.density_l1[k]])
        return rows

    def to_csv(self, path):
        with open(path, "w") as fh:
            for row in self.csv_rows():
                fh.write(",".join(r if isinstance(r, str) else repr(float(r)) for r in row) + "\n")


def exact_reference(rho0, field, w_path, T, dt, chi, stride, solver=None):
    """Snapshots of the exact-drift SPDE at every ``stride`` steps (and at T)."""
    solver = solver or SPDESolver(rho0.grid, field, chi, "exact")
    steps = n_steps_for(T, dt)
    rho = rho0.copy()
    snaps = [rho.copy()]
    for k in range(steps):
        rho, _, _ = solver.step(rho, w_path.increments[k], dt)
        if not np.all(np.isfinite(rho.values)) or rho.norm(4) > BLOWUP_L4:
            return snaps, rho.t
        if (k + 1) % stride == 0 or k + 1 == steps:
            snaps.append(rho.copy())
    return snaps, None


def run_coupled(*, N, table, field, initial, grid, T, dt, chi, seed_root, replica=0,
                shared_w=False, stride=1, test_functions=None, interp_order=1,
                method="auto", exact_snapshots=None, keep_final=False):
    """One coupled run of X (particles), Y (mean field), rho^eps and rho.

    Per dt, in order: grid drift from rho^eps_n, X step, rho^eps and rho steps,
    Y step with the drift from rho^eps_n. ``exact_snapshots`` reuses a
    precomputed exact-SPDE path (valid when it does not depend on W, i.e. sigma = 0).
    """
    layout = stream_layout(seed_root, replica, N, shared_w)
    box = grid.box
    steps = n_steps_for(T, dt)
    phis = test_functions if test_functions is not None else shipped_test_functions(box)
    run = CoupledRun(N, table.epsilon, layout, weak={p.name: [] for p in phis},
                     weak_reg={p.name: [] for p in phis})

    X = sample_initial(initial, N, layout.init_seed, box, table.epsilon)
    X = replace(X, stream_ids=layout.b_ids.copy())
    Y = replace(X, positions=X.positions.copy())
    w_path = sample_increments(layout.w_key[0], layout.w_key[1], max(steps, 1), dt, field.noise_dim)
    bank = StreamBank(layout.b_seed, layout.b_ids, dt, field.noise_dim)

    rho_eps = initial.on_grid(grid)
    reg = SPDESolver(grid, field, chi, "regularized", table, images=False)
    exact = None
    if exact_snapshots is None:
        exact = SPDESolver(grid, field, chi, "exact")
        rho = rho_eps.copy()

    def checkpoint(k):
        ref = exact_snapshots[len(run.times)] if exact is None else rho
        err = per_particle_error(X, Y)
        run.times.append(X.t)
        run.coupling.append(float(err.mean()))
        run.per_particle.append(err)
        diff = rho_eps.values - ref.values
        run.gap.append(float((np.sum(np.abs(diff) ** 4) * grid.cell_volume) ** 0.25))
        for p in phis:
            w_exact = weak_error(X, ref, p)
            w_reg = weak_error(X, rho_eps, p)
            run.weak[p.name].append(w_exact)
            run.weak_reg[p.name].append(w_reg)
            proj = (grid_functional(rho_eps, p) - grid_functional(ref, p)) ** 2
            if w_exact > 2.0 * (w_reg + proj) * (1 + 1e-9) + 1e-300:
                run.triangle_ok = False
        run.density_l1.append(kde_l1(Y.positions, rho_eps))

    checkpoint(0)
    for k in range(steps):
        dW = w_path.increments[k]
        dB = bank.next()
        u = reg.drift(rho_eps.values)
        X = em_step(X, table, field, dW, dB, dt, chi, method)
        rho_new, _, _ = reg.step(rho_eps, dW, dt, drift=u)
        if exact is not None:
            rho, _, _ = exact.step(rho, dW, dt)
        Y = mean_field_step(Y, rho_eps, table, field, dW, dB, dt, chi, drift=u, order=interp_order)
        rho_eps = rho_new
        bad = [r for r in ([rho_eps] + ([rho] if exact is not None else []))
               if not np.all(np.isfinite(r.values)) or r.norm(4) > BLOWUP_L4]
        if bad:
            run.blowup, run.blowup_time = True, rho_eps.t
            break
        if (k + 1) % stride == 0 or k + 1 == steps:
            checkpoint(k + 1)
    run.boundary_mass = float(np.mean(np.max(np.abs(Y.positions), axis=1) > 0.75 * box))
    if keep_final:
        run.X, run.Y, run.rho_eps = X, Y, rho_eps
    return run
