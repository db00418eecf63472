"""Stochastic Keller-Segel equation on the periodic grid.

    d rho = 1/2 D_ij(rho a_ij) dt - chi div(rho grad c) dt - D_i(rho sigma^{ik}) dW^k,
    (I - Laplacian) c = rho,    a = nu nu^T + sigma sigma^T

and its regularized variant, where grad c is replaced by grad(G_eps * rho).

One step of the scheme (Ito, explicit in the noise):

* the spatially constant part of a is treated implicitly in Fourier space,
  the variable remainder explicitly (spectral second derivatives);
* the aggregation flux rho u, u = chi grad c, is a conservative finite-volume
  divergence with minmod-limited upwind face values;
* the noise flux rho (sigma dW) uses centred face densities and sigma
  evaluated at the faces.

Every term is a discrete divergence, so the zero Fourier mode (the mass) is
carried over unchanged.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import DensityField

BLOWUP_L4 = 1e6
STABILITY_SAFETY = 0.5


class GridResolutionError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


# --- elliptic part ---------------------------------------------------------------


def resolvent_solve(rho):
    """c = (I - Laplacian)^{-1} rho, exactly in the discrete Fourier basis."""
    grid = rho.grid
    c_hat = np.fft.rfftn(rho.values) / (1.0 + grid.k_squared)
    return DensityField(grid, np.fft.irfftn(c_hat, s=grid.shape, axes=range(grid.dim)), rho.t)


def _nyquist_mask(grid):
    # odd derivatives drop the unpaired Nyquist mode
    masks = []
    for a, k in enumerate(grid.wavenumbers):
        m = np.ones_like(k)
        if grid.n % 2 == 0:
            nyq = grid.n // 2
            idx = [0] * grid.dim
            idx[a] = nyq
            m[tuple(idx)] = 0.0
        masks.append(m)
    return masks


def periodized_kernel(table, grid, images=True):
    """grad G_eps sampled at grid offsets, shape (d,) + grid.shape, index 0 = zero offset.

    With ``images`` the periodic images within r_cut are summed (the kernel of
    the equation on the torus). Without, only the minimum-image offset is used
    and the force is cut at min(r_cut, L), which is exactly the kernel the
    particle system sees.
    """
    from .kernel import eval_force

    d = grid.dim
    offsets = grid.dx * np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    mesh = np.stack(np.meshgrid(*([offsets] * d), indexing="ij"), axis=-1)
    if not images:
        kern = eval_force(table, mesh)
        kern[np.linalg.norm(mesh, axis=-1) >= min(table.r_cut, grid.box)] = 0.0
        return np.moveaxis(kern, -1, 0)
    span = 2.0 * grid.box
    reach = int(math.ceil(table.r_cut / span)) + 1
    out = np.zeros(grid.shape + (d,))
    for image in np.ndindex(*([2 * reach + 1] * d)):
        shift = span * (np.array(image) - reach)
        # skip images entirely beyond the cutoff
        if np.linalg.norm(np.maximum(np.abs(shift) - grid.box, 0.0)) >= table.r_cut:
            continue
        out += eval_force(table, mesh + shift)
    return np.moveaxis(out, -1, 0)


class DriftOperator:
    """u = chi grad c (exact) or chi grad(G_eps * rho) (regularized) on a fixed grid."""

    def __init__(self, grid, mode="exact", table=None, chi=1.0, images=True):
        self.grid = grid
        self.mode = mode
        self.chi = float(chi)
        ks = grid.wavenumbers
        masks = _nyquist_mask(grid)
        if mode == "exact":
            self.multipliers = [1j * k * m / (1.0 + grid.k_squared) for k, m in zip(ks, masks)]
            self.epsilon = 0.0
        elif mode == "regularized":
            if table is None or table.dim != grid.dim:
                raise ValueError("regularized drift needs a kernel table of matching dimension")
            if table.epsilon < 2.0 * grid.dx:
                raise GridResolutionError(
                    f"epsilon={table.epsilon:g} < 2 dx = {2 * grid.dx:g}: kernel not resolved")
            kern = periodized_kernel(table, grid, images)
            self.multipliers = [grid.cell_volume * np.fft.rfftn(kern[a]) for a in range(grid.dim)]
            self.epsilon = table.epsilon
        else:
            raise ValueError(f"mode must be 'exact' or 'regularized', got {mode!r}")

    def __call__(self, values):
        if self.chi == 0.0:
            return np.zeros((self.grid.dim,) + self.grid.shape)
        rho_hat = np.fft.rfftn(values)
        axes = range(self.grid.dim)
        return np.stack([self.chi * np.fft.irfftn(m * rho_hat, s=self.grid.shape, axes=axes)
                         for m in self.multipliers])


def drift_field(rho, mode="exact", chi=1.0, table=None, images=True):
    """Vector field chi grad c or chi grad(G_eps * rho), shape (d,) + grid.shape."""
    return DriftOperator(rho.grid, mode, table, chi, images)(rho.values)


# --- finite-volume fluxes ------------------------------------------------------------


def _minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def aggregation_divergence(values, u, dx):
    """div(rho u) with upwind, minmod-limited face values (periodic)."""
    out = np.zeros_like(values)
    for a in range(values.ndim):
        fwd = np.roll(values, -1, axis=a) - values
        bwd = values - np.roll(values, 1, axis=a)
        slope = _minmod(fwd, bwd)
        left = values + 0.5 * slope                     # face i+1/2 from cell i
        right = np.roll(values - 0.5 * slope, -1, axis=a)  # face i+1/2 from cell i+1
        u_face = 0.5 * (u[a] + np.roll(u[a], -1, axis=a))
        flux = u_face * np.where(u_face > 0, left, right)
        out += (flux - np.roll(flux, 1, axis=a)) / dx
    return out


def noise_divergence(values, face_velocity, dx):
    """div(rho v) with centred face densities; face_velocity[a] lives on faces i+1/2 along axis a."""
    out = np.zeros_like(values)
    for a in range(values.ndim):
        rho_face = 0.5 * (values + np.roll(values, -1, axis=a))
        flux = rho_face * face_velocity[a]
        out += (flux - np.roll(flux, 1, axis=a)) / dx
    return out


# --- time stepping -----------------------------------------------------------------


@dataclass
class NormTrace:
    times: list = field(default_factory=list)
    l1_mass: list = field(default_factory=list)
    l4_norm: list = field(default_factory=list)
    w14_seminorm: list = field(default_factory=list)
    c_sup: list = field(default_factory=list)
    clipped_mass: list = field(default_factory=list)
    renorm_factor: list = field(default_factory=list)

    COLUMNS = ("t", "l1_mass", "l4_norm", "w14_seminorm", "c_sup", "clipped_mass", "renorm_factor")

    def record(self, rho, clipped=0.0, factor=1.0):
        grid = rho.grid
        self.times.append(rho.t)
        self.l1_mass.append(grid.integrate(np.abs(rho.values)))
        self.l4_norm.append(rho.norm(4))
        grads = [(np.roll(rho.values, -1, a) - np.roll(rho.values, 1, a)) / (2 * grid.dx)
                 for a in range(grid.dim)]
        gnorm = np.sqrt(sum(g * g for g in grads))
        self.w14_seminorm.append(float((np.sum(gnorm ** 4) * grid.cell_volume) ** 0.25))
        self.c_sup.append(float(resolvent_solve(rho).values.max()))
        self.clipped_mass.append(clipped)
        self.renorm_factor.append(factor)

    def rows(self):
        return list(zip(*(getattr(self, c if c != "t" else "times") for c in self.COLUMNS)))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows():
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


class SPDESolver:
    """Stepper for one (grid, field, chi, drift mode) combination."""

    def __init__(self, grid, field, chi, mode="exact", table=None, images=True):
        self.grid = grid
        self.field = field
        self.chi = float(chi)
        self.mode = mode
        self.drift = DriftOperator(grid, mode, table, chi, images)
        d = grid.dim
        # face centres along each axis
        self._faces = []
        for a in range(d):
            pts = grid.coords.copy()
            pts[..., a] += 0.5 * grid.dx
            self._faces.append(pts.reshape(-1, d))
        # second-order finite-difference symbols of D_i D_j: the resulting
        # resolvent is an M-matrix inverse, so it keeps positivity on the kinks
        # the limited flux leaves behind (the spectral symbol rings there)
        ks = grid.wavenumbers
        half = [2.0 / grid.dx * np.sin(0.5 * grid.dx * k) for k in ks]
        cent = [np.sin(grid.dx * k) / grid.dx for k in ks]
        self._symbol = [[half[i] ** 2 if i == j else cent[i] * cent[j] for j in range(d)]
                        for i in range(d)]
        self._variable_a = None
        if not field.spatially_constant:
            a = field.diffusion_matrix(0.0, grid.coords.reshape(-1, d))
            self._mean_a = a.mean(axis=0)
            self._variable_a = (a - self._mean_a).reshape(grid.shape + (d, d))
            if field.kind not in ("shear", "tabulated"):
                raise ValueError("variable diffusion supported for time-independent fields only")

    # constant-coefficient diffusion matrix at time t
    def _mean_diffusion(self, t):
        if self._variable_a is not None:
            return self._mean_a
        nu = self.field.nu_const(t)
        sg = self.field.sigma_const(t)
        return nu @ nu.T + sg @ sg.T

    def max_stable_dt(self, rho=None, t=0.0):
        """Explicit-term step limit (with safety factor) for the current state."""
        grid = self.grid
        limits = []
        if self._variable_a is not None:
            amax = np.abs(self._variable_a).max()
            if amax > 0:
                limits.append(grid.dx ** 2 / (2 * grid.dim * amax))
        if rho is not None and self.chi != 0:
            umax = np.abs(self.drift(rho.values)).max()
            if umax > 0:
                limits.append(grid.dx / (2.0 * umax))
        smax = max(np.abs(self.field.sigma(t, f)).max() for f in self._faces[:1])
        if smax > 0:
            limits.append((grid.dx / (3.0 * smax)) ** 2)
        return STABILITY_SAFETY * min(limits) if limits else math.inf

    def _face_velocity(self, t, dW):
        d = self.grid.dim
        if self.field.spatially_constant:
            sg = self.field.sigma_const(t)
            v = sg @ dW
            return [v[a] for a in range(d)]
        out = []
        for a in range(d):
            sg = self.field.sigma(t, self._faces[a])  # (M, d, d')
            out.append((sg[:, a, :] @ dW).reshape(self.grid.shape))
        return out

    def step(self, rho, dW, dt, drift=None):
        """Advance one step; returns (new DensityField, clipped_mass, renorm_factor).

        ``drift`` may pass the already computed self.drift(rho.values).
        """
        grid = self.grid
        vals = rho.values
        dW = np.asarray(dW, dtype=float)
        explicit = np.zeros_like(vals)
        if self.chi != 0.0:
            u = self.drift(vals) if drift is None else drift
            explicit -= dt * aggregation_divergence(vals, u, grid.dx)
        if np.any(dW != 0):
            explicit -= noise_divergence(vals, self._face_velocity(rho.t, dW), grid.dx)
        rhs_hat = np.fft.rfftn(vals + explicit)
        if self._variable_a is not None:
            for i in range(grid.dim):
                for j in range(grid.dim):
                    g_hat = np.fft.rfftn(vals * self._variable_a[..., i, j])
                    rhs_hat -= 0.5 * dt * self._symbol[i][j] * g_hat
        a_bar = self._mean_diffusion(rho.t)
        symbol = sum(a_bar[i, j] * self._symbol[i][j] for i in range(grid.dim)
                     for j in range(grid.dim))
        new_hat = rhs_hat / (1.0 + 0.5 * dt * symbol)
        zero = (0,) * grid.dim
        new_hat[zero] = np.fft.rfftn(vals)[zero]
        new = np.fft.irfftn(new_hat, s=grid.shape, axes=range(grid.dim))

        clipped = 0.0
        factor = 1.0
        if not np.all(np.isfinite(new)):
            return DensityField(grid, new, rho.t + dt), math.nan, math.nan
        neg = new < 0
        if neg.any():
            before = new.sum()
            clipped = -float(new[neg].sum()) * grid.cell_volume
            new = np.where(neg, 0.0, new)
            factor = float(before / new.sum())
            new = new * factor
        return DensityField(grid, new, rho.t + dt), clipped, factor


@dataclass
class PathResult:
    final: DensityField
    trace: NormTrace
    snapshots: list
    blowup: bool = False
    blowup_time: float = None


def solve_path(rho0, field, w_path, T, dt, chi, mode="exact", table=None, snapshot_stride=0,
               solver=None, trace_stride=1):
    """Iterate spde_step along the common-noise path up to time T."""
    from .particles import n_steps_for

    solver = solver or SPDESolver(rho0.grid, field, chi, mode, table)
    steps = n_steps_for(T, dt)
    if steps and w_path.n_steps < steps:
        raise ValueError("common-noise path shorter than the horizon")
    rho = rho0.copy()
    trace = NormTrace()
    trace.record(rho)
    snaps = [rho.copy()] if snapshot_stride else []
    for k in range(steps):
        rho, clipped, factor = solver.step(rho, w_path.increments[k], dt)
        if not np.all(np.isfinite(rho.values)) or rho.norm(4) > BLOWUP_L4:
            return PathResult(rho, trace, snaps, True, rho.t)
        if (k + 1) % trace_stride == 0 or k + 1 == steps:
            trace.record(rho, clipped, factor)
        if snapshot_stride and ((k + 1) % snapshot_stride == 0 or k + 1 == steps):
            snaps.append(rho.copy())
    return PathResult(rho, trace, snaps)


def spde_step(rho, field, dW_common, dt, chi, mode="exact", table=None):
    """Single step with a throwaway solver (convenient, not fast)."""
    new, _, _ = SPDESolver(rho.grid, field, chi, mode, table).step(rho, dW_common, dt)
    return new


def regularization_gap(path_eps, path_exact, p=4):
    """sup over saved times of the grid L^p norm of rho^eps_t - rho_t."""
    if len(path_eps) != len(path_exact):
        raise GridMismatchError("paths have different numbers of snapshots")
    gap = 0.0
    for a, b in zip(path_eps, path_exact):
        if a.grid != b.grid:
            raise GridMismatchError("snapshots live on different grids")
        if abs(a.t - b.t) > 1e-12:
            raise GridMismatchError(f"snapshot times differ: {a.t} vs {b.t}")
        diff = DensityField(a.grid, a.values - b.values, a.t)
        gap = max(gap, diff.norm(p))
    return gap
