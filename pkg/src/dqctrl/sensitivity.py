"""Linearized state system: the exact derivative of the discrete forward map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlPair
from .forward import (
    SolveOptions,
    StateTrajectory,
    jacobian_blocks,
    layout_for,
    time_matrix,
)
from .model import f1_second, h_eval


@dataclass
class LinearizedTrajectory:
    eta: np.ndarray
    rho: np.ndarray
    zeta: np.ndarray


def check_base(base: StateTrajectory, u: ControlPair):
    if base.spec.is_obstacle:
        raise ValueError("linearization needs a deep-quench base state")
    u.check(base.grid, base.tgrid)


def step_jacobian(params, base: StateTrajectory, u: ControlPair, k: int):
    """Blocks of the Jacobian of step ``k`` (the step ending at ``t_k``)."""
    mu, phi, sig = base.slice(k)
    return jacobian_blocks(params, base.tgrid.dt, mu, phi, sig, u.u1[k], f1_second(base.spec, phi))


def solve_linearized(params, base: StateTrajectory, u: ControlPair, h: ControlPair,
                     opts: SolveOptions | None = None) -> LinearizedTrajectory:
    """Directional derivative ``(eta, rho, zeta)`` of the state at ``u`` along ``h``.

    Step ``k`` solves ``J_k dy_k = E dy_{k-1} / dt - B_k h_k`` with
    ``B_k h = (h(phi_k) h1, 0, -h2)`` and ``dy_0 = 0``.
    """
    check_base(base, u)
    h.check(base.grid, base.tgrid)
    g, tg = base.grid, base.tgrid
    lay = layout_for(g)
    e = time_matrix(params)
    dt = tg.dt
    out = np.zeros((3, tg.steps + 1, g.size))
    prev = np.zeros((g.size, 3))
    for k in range(1, tg.steps + 1):
        blocks = step_jacobian(params, base, u, k)
        rhs = prev @ e.T / dt
        rhs[:, 0] -= h_eval(params, base.phi[k]) * h.u1[k]
        rhs[:, 2] += h.u2[k]
        z = lay.solve(lay.assemble(blocks), rhs.ravel(), opts, blocks)
        prev = z.reshape(g.size, 3)
        out[:, k] = prev.T
    return LinearizedTrajectory(out[0], out[1], out[2])


def apply_linearized(params, base, u, h, opts=None) -> np.ndarray:
    """Stacked ``(eta, rho, zeta)`` as one array of shape ``(3, N+1, nodes)``."""
    lin = solve_linearized(params, base, u, h, opts)
    return np.stack([lin.eta, lin.rho, lin.zeta])

