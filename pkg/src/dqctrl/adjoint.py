"""Discrete adjoint of the deep-quench forward map and its limit diagnostics.

The adjoint ``(p, q, r)`` is the transpose of the linearized step map
applied to the tracking sources.  The time loop runs backward from a
terminal slice placed one step after ``T`` that carries the terminal data
``p_T = 0``, ``r_T = 0``, ``(p + beta q)_T = b2 (phi(T) - phi_Omega)``.
Slice ``k`` then solves

    J_k^T W X_k = W [b1 (phi_k - phi_Q,k) e_phi + E^T X_{k+1} / dt],

with ``W`` the spatial quadrature weights.  With this scaling the reduced
gradient is ``d = (-h(phi) p, r)`` in the space-time quadrature of `grid`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlPair
from .forward import StateTrajectory, layout_for, time_matrix
from .grid import check_space_field, check_spacetime_field, norm_q, sup_norm_c0l2
from .model import f1_second
from .sensitivity import check_base, step_jacobian


@dataclass(frozen=True)
class TargetData:
    phi_hat_Q: np.ndarray
    phi_hat_Omega: np.ndarray

    def check(self, g, tg):
        check_spacetime_field(g, tg, self.phi_hat_Q, "phi_hat_Q")
        check_space_field(g, self.phi_hat_Omega, "phi_hat_Omega")

    @classmethod
    def zeros(cls, g, tg):
        return cls(np.zeros((tg.steps + 1, g.size)), np.zeros(g.size))


@dataclass
class AdjointTrajectory:
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    terminal: tuple  # (p_T, q_T, r_T)


def tracking_sources(cost, base: StateTrajectory):
    """Space-time and terminal derivatives of the tracking terms."""
    src_q = cost.b1 * (base.phi - cost.targets.phi_hat_Q)
    src_t = cost.b2 * (base.phi[-1] - cost.targets.phi_hat_Omega)
    return src_q, src_t


def solve_adjoint(params, cost, base: StateTrajectory, u: ControlPair, opts=None) -> AdjointTrajectory:
    check_base(base, u)
    g, tg = base.grid, base.tgrid
    cost.targets.check(g, tg)
    lay = layout_for(g)
    e = time_matrix(params)
    dt = tg.dt
    src_q, src_t = tracking_sources(cost, base)
    n = g.size
    terminal = np.zeros((n, 3))
    terminal[:, 1] = src_t / params.beta
    w3 = np.repeat(g.weights, 3)
    out = np.zeros((3, tg.steps + 1, n))
    nxt = terminal
    for k in range(tg.steps, -1, -1):
        rhs = nxt @ e / dt
        rhs[:, 1] += src_q[k]
        blocks = step_jacobian(params, base, u, k)
        ab = lay.assemble(blocks, transpose=True)
        x = lay.solve(ab, w3 * rhs.ravel(), opts, blocks, transpose=True) / w3
        nxt = x.reshape(n, 3)
        out[:, k] = nxt.T
    return AdjointTrajectory(out[0], out[1], out[2], tuple(terminal.T.copy()))


def multiplier_action(base: StateTrajectory, adj: AdjointTrajectory, v) -> float:
    """Quadrature of ``F1''(phi) q v`` over the space-time cylinder."""
    if base.spec.is_obstacle:
        raise ValueError("the multiplier functional is defined for deep-quench states")
    g, tg = base.grid, base.tgrid
    v = check_spacetime_field(g, tg, v, "v")
    if np.any(v[0] != 0.0):
        raise ValueError("test field must vanish at t = 0")
    dens = f1_second(base.spec, base.phi) * adj.q * v
    return float(tg.weights @ (dens @ g.weights))


def _is_flagged(diffs, atol):
    diffs = np.asarray(diffs)
    for a, b in zip(diffs[:-1], diffs[1:]):
        if b >= a and b > atol:
            return True
    return False


def limit_adjoint_diagnostics(gammas, adjoints, bases=None, test_fields=(), atol=1e-14):
    """Successive differences of adjoints along a decreasing gamma sweep.

    Reports ``p`` and ``r`` differences in the discrete ``C0(L2)`` norm and
    ``q`` differences in ``L2(Q)``.  A metric is flagged when its sequence of
    differences fails to decrease strictly (differences below ``atol`` count
    as converged).  With ``bases`` given, also reports the self-pairing of
    each multiplier with its own ``q`` (masked at ``t = 0``) and its pairing
    with each of ``test_fields``.
    """
    if len(adjoints) < 2 or len(gammas) != len(adjoints):
        raise ValueError("need at least two sweep points with matching gammas")
    g = tg = None
    if bases is not None:
        g, tg = bases[0].grid, bases[0].tgrid
    rows = []
    for i in range(len(adjoints) - 1):
        a, b = adjoints[i], adjoints[i + 1]
        row = {"gamma": float(gammas[i]), "gamma_next": float(gammas[i + 1])}
        if g is not None:
            row["p_c0l2"] = sup_norm_c0l2(g, a.p - b.p)
            row["r_c0l2"] = sup_norm_c0l2(g, a.r - b.r)
            row["q_l2q"] = norm_q(g, tg, a.q - b.q)
        else:
            row["p_c0l2"] = float(np.max(np.sqrt(np.sum((a.p - b.p) ** 2, axis=1))))
            row["r_c0l2"] = float(np.max(np.sqrt(np.sum((a.r - b.r) ** 2, axis=1))))
            row["q_l2q"] = float(np.sqrt(np.sum((a.q - b.q) ** 2)))
        rows.append(row)
    flags = {m: _is_flagged([r[m] for r in rows], atol) for m in ("p_c0l2", "r_c0l2", "q_l2q")}
    report = {"differences": rows, "flags": flags, "flagged": any(flags.values())}
    if bases is not None:
        members = []
        for gam, base, adj in zip(gammas, bases, adjoints):
            q0 = adj.q.copy()
            q0[0] = 0.0
            entry = {"gamma": float(gam), "self_pairing": multiplier_action(base, adj, q0)}
            entry["self_pairing_nonnegative"] = entry["self_pairing"] >= 0.0
            entry["test_pairings"] = [multiplier_action(base, adj, v) for v in test_fields]
            members.append(entry)
        report["members"] = members
    return report
