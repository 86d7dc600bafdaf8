"""Uniform box grids, the Neumann Laplacian and the quadratures built on them.

Fields are plain numpy arrays.  A space field has one entry per grid node
(lexicographic order in 2D); a space-time field has shape ``(N + 1, nodes)``
with row ``k`` holding the slice at ``t_k = k * dt``.

Spatial integrals use the node-based trapezoidal rule.  Time integrals use
right-endpoint weights ``(0, dt, ..., dt)``, which is the quadrature implied
by backward Euler: the control slice ``k`` acts on the step ending at
``t_k``, so slice 0 carries no weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform node grid on ``(0, L)^dim``."""

    dim: int
    nodes_per_axis: int
    axis_length: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.nodes_per_axis < 2:
            raise ValueError("nodes_per_axis must be at least 2")
        if not self.axis_length > 0:
            raise ValueError("axis_length must be positive")

    @property
    def spacing(self) -> float:
        return self.axis_length / (self.nodes_per_axis - 1)

    @property
    def size(self) -> int:
        return self.nodes_per_axis**self.dim

    @property
    def measure(self) -> float:
        return self.axis_length**self.dim

    @cached_property
    def weights(self) -> np.ndarray:
        w1 = np.full(self.nodes_per_axis, self.spacing)
        w1[[0, -1]] *= 0.5
        if self.dim == 1:
            return w1
        return np.kron(w1, w1)

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``."""
        x = np.linspace(0.0, self.axis_length, self.nodes_per_axis)
        if self.dim == 1:
            return x[:, None]
        xx, yy = np.meshgrid(x, x, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def laplacian(self) -> sps.csr_matrix:
        """Five/three-point Neumann Laplacian with mirrored ghost nodes."""
        n, h = self.nodes_per_axis, self.spacing
        main = np.full(n, -2.0)
        upper = np.ones(n - 1)
        lower = np.ones(n - 1)
        # ghost node f_{-1} = f_1 and f_n = f_{n-2}
        upper[0] = 2.0
        lower[-1] = 2.0
        lap1 = sps.diags([lower, main, upper], [-1, 0, 1]) / h**2
        if self.dim == 1:
            return sps.csr_matrix(lap1)
        eye = sps.identity(n)
        return sps.csr_matrix(sps.kron(lap1, eye) + sps.kron(eye, lap1))


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = 0.0
        return w


def check_space_field(g: SpatialGrid, f, name="field") -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (g.size,):
        raise ValueError(f"{name} has shape {f.shape}, expected ({g.size},)")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite entries")
    return f


def check_spacetime_field(g: SpatialGrid, tg: TimeGrid, f, name="field") -> np.ndarray:
    f = np.asarray(f, dtype=float)
    expected = (tg.steps + 1, g.size)
    if f.shape != expected:
        raise ValueError(f"{name} has shape {f.shape}, expected {expected}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite entries")
    return f


def apply_neumann_laplacian(g: SpatialGrid, f) -> np.ndarray:
    f = check_space_field(g, f)
    return g.laplacian @ f


def integrate(g: SpatialGrid, f) -> float:
    return float(g.weights @ check_space_field(g, f))


def inner_product(g: SpatialGrid, f1, f2) -> float:
    """Trapezoidal approximation of the L2(Omega) inner product."""
    f1 = check_space_field(g, f1, "f1")
    f2 = check_space_field(g, f2, "f2")
    return float(np.sum(g.weights * f1 * f2))


def norm(g: SpatialGrid, f) -> float:
    return float(np.sqrt(max(inner_product(g, f, f), 0.0)))


def inner_product_q(g: SpatialGrid, tg: TimeGrid, f1, f2) -> float:
    """L2(Q) inner product of two space-time fields."""
    f1 = check_spacetime_field(g, tg, f1, "f1")
    f2 = check_spacetime_field(g, tg, f2, "f2")
    return float(tg.weights @ ((f1 * f2) @ g.weights))


def norm_q(g: SpatialGrid, tg: TimeGrid, f) -> float:
    return float(np.sqrt(max(inner_product_q(g, tg, f, f), 0.0)))


def slice_norms_space(g: SpatialGrid, f) -> np.ndarray:
    """``||f(., t_k)||_{L2(Omega)}`` for every time node."""
    f = np.asarray(f, dtype=float)
    return np.sqrt(np.maximum((f * f) @ g.weights, 0.0))


def slice_norms_time(tg: TimeGrid, f) -> np.ndarray:
    """``||f(x_j, .)||_{L2(0,T)}`` for every grid node."""
    f = np.asarray(f, dtype=float)
    return np.sqrt(np.maximum(tg.weights @ (f * f), 0.0))


def slice_norm_space(g: SpatialGrid, f, k: int) -> float:
    f = np.asarray(f, dtype=float)
    if not 0 <= k < f.shape[0]:
        raise IndexError(f"time index {k} out of range 0..{f.shape[0] - 1}")
    return float(slice_norms_space(g, f[k : k + 1])[0])


def slice_norm_time(tg: TimeGrid, f, j: int) -> float:
    f = np.asarray(f, dtype=float)
    if not 0 <= j < f.shape[1]:
        raise IndexError(f"node index {j} out of range 0..{f.shape[1] - 1}")
    return float(slice_norms_time(tg, f[:, j : j + 1])[0])


def sup_norm_c0l2(g: SpatialGrid, f) -> float:
    """Discrete ``C^0([0,T]; L2(Omega))`` norm: max over time nodes."""
    return float(np.max(slice_norms_space(g, f)))


def h1_norm(g: SpatialGrid, f) -> float:
    """Discrete H1 norm, ``||f||^2 + <-Lap f, f>`` in the quadrature inner product."""
    f = check_space_field(g, f)
    energy = -inner_product(g, g.laplacian @ f, f)
    return float(np.sqrt(max(inner_product(g, f, f) + energy, 0.0)))
