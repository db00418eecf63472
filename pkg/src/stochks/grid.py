"""Periodic box [-L, L)^d, its uniform grid, and gridded densities."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    n: int
    dim: int
    box: float  # half-width L

    @property
    def dx(self):
        return 2.0 * self.box / self.n

    @property
    def cell_volume(self):
        return self.dx ** self.dim

    @property
    def shape(self):
        return (self.n,) * self.dim

    @cached_property
    def axis(self):
        return -self.box + self.dx * np.arange(self.n)

    @cached_property
    def coords(self):
        """Node coordinates, shape (n,)*d + (d,)."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def wavenumbers(self):
        """Angular wave vectors for rfftn layout, one array per axis (broadcastable)."""
        ks = []
        for a in range(self.dim):
            if a == self.dim - 1:
                k = 2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.dx)
            else:
                k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
            shape = [1] * self.dim
            shape[a] = k.size
            ks.append(k.reshape(shape))
        return ks

    @cached_property
    def k_squared(self):
        return sum(k * k for k in self.wavenumbers)

    def integrate(self, values):
        return float(np.sum(values) * self.cell_volume)

    def wrap(self, x):
        return wrap(x, self.box)


def wrap(x, box):
    """Map coordinates into [-L, L)."""
    return np.mod(np.asarray(x) + box, 2.0 * box) - box


def minimum_image(dx, box):
    return dx - 2.0 * box * np.round(dx / (2.0 * box))


@dataclass
class DensityField:
    grid: Grid
    values: np.ndarray
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def mass(self):
        return self.grid.integrate(self.values)

    def norm(self, p):
        return float((np.sum(np.abs(self.values) ** p) * self.grid.cell_volume) ** (1.0 / p))

    def copy(self):
        return DensityField(self.grid, self.values.copy(), self.t, dict(self.meta))
