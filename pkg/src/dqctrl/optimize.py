"""Cost functional, proximal-gradient solver and sparsity certificates.

Controls are handled internally as stacked arrays ``U`` of shape
``(2, N + 1, nodes)``.  All pairings use the space-time quadrature of
`grid`, so the smooth gradient ``d + b0 u`` is the Riesz representative of
the derivative of the smooth cost.

Time slice 0 carries zero quadrature weight and does not influence the
state, so it is not an optimization variable.  It is filled by the
pointwise projection formula with the adjoint slice at ``t = 0``, which
makes the stationarity certificate meaningful on every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .adjoint import AdjointTrajectory, TargetData, solve_adjoint, tracking_sources
from .controls import Bounds, ControlPair
from .forward import SolveOptions, SolverError, StateTrajectory, solve_state
from .grid import (
    SpatialGrid,
    TimeGrid,
    inner_product,
    inner_product_q,
    norm_q,
    slice_norms_space,
    slice_norms_time,
    sup_norm_c0l2,
)
from .model import InitialData, ModelParams, PotentialSpec, h_eval
from .parallel import parallel_map
from .sensitivity import solve_linearized

SPARSITY_KINDS = ("none", "time", "space", "spacetime")


@dataclass(frozen=True)
class CostSpec:
    b0: float
    b1: float
    b2: float
    kappa: float
    targets: TargetData
    sparsity: str = "none"
    adapted_anchor: ControlPair | None = None

    def violations(self) -> list[str]:
        out = []
        if not (np.isfinite(self.b0) and self.b0 > 0):
            out.append(f"(C1) b0 must be positive, got {self.b0!r}")
        for name in ("b1", "b2", "kappa"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                out.append(f"(C1) {name} must be nonnegative, got {v!r}")
        if self.sparsity not in SPARSITY_KINDS:
            out.append(f"(C3) sparsity kind must be one of {SPARSITY_KINDS}, got {self.sparsity!r}")
        elif self.sparsity != "none" and not self.kappa > 0:
            out.append(f"(C4) kappa must be positive when sparsity is {self.sparsity!r}")
        return out

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def adapted(self) -> bool:
        return self.adapted_anchor is not None

    @property
    def b_eff(self) -> float:
        return self.b0 + (1.0 if self.adapted else 0.0)

    def anchor_array(self, shape) -> np.ndarray:
        if self.adapted_anchor is None:
            return np.zeros(shape)
        return self.adapted_anchor.stack()


@dataclass(frozen=True)
class ControlProblem:
    """Everything except the cost and potential that a control solve needs."""

    grid: SpatialGrid
    tgrid: TimeGrid
    params: ModelParams
    init: InitialData
    bounds: Bounds
    solve_opts: SolveOptions = SolveOptions()


@dataclass
class SubgradientField:
    lambda1: np.ndarray
    lambda2: np.ndarray

    def stack(self):
        return np.stack([self.lambda1, self.lambda2])


@dataclass
class ReducedGradientField:
    d1: np.ndarray
    d2: np.ndarray

    def stack(self):
        return np.stack([self.d1, self.d2])


@dataclass
class OptimizationResult:
    u: ControlPair
    state: StateTrajectory
    adjoint: AdjointTrajectory
    subgradient: SubgradientField
    gradient: ReducedGradientField
    report: dict = field(default_factory=dict)


# -- helpers ----------------------------------------------------------------


def _stack(u) -> np.ndarray:
    return u.stack() if hasattr(u, "stack") else np.asarray(u, dtype=float)


def _q_inner(g, tg, a, b) -> float:
    return float(np.sum(tg.weights[None, :] * ((a * b) @ g.weights)))


def _bounds_arrays(bounds: Bounds):
    lo = np.array([bounds.u1_min, bounds.u2_min])[:, None, None]
    hi = np.array([bounds.u1_max, bounds.u2_max])[:, None, None]
    return lo, hi


def sparsity_value(g: SpatialGrid, tg: TimeGrid, kind: str, u) -> float:
    """The directional sparsity functional summed over both components."""
    U = _stack(u)
    if kind == "none":
        return 0.0
    if kind == "time":
        return float(sum(tg.weights @ slice_norms_space(g, Ui) for Ui in U))
    if kind == "space":
        return float(sum(g.weights @ slice_norms_time(tg, Ui) for Ui in U))
    if kind == "spacetime":
        return float(sum(tg.weights @ (np.abs(Ui) @ g.weights) for Ui in U))
    raise ValueError(f"unknown sparsity kind {kind!r}")


def _smooth_cost(g, tg, cost: CostSpec, phi, U) -> float:
    t = cost.targets
    val = 0.5 * cost.b1 * norm_q(g, tg, phi - t.phi_hat_Q) ** 2
    diff = phi[-1] - t.phi_hat_Omega
    val += 0.5 * cost.b2 * float(g.weights @ (diff * diff))
    val += 0.5 * cost.b0 * _q_inner(g, tg, U, U)
    if cost.adapted:
        dU = U - cost.anchor_array(U.shape)
        val += 0.5 * _q_inner(g, tg, dU, dU)
    return float(val)


def eval_cost(g: SpatialGrid, tg: TimeGrid, cost: CostSpec, traj: StateTrajectory, u):
    """Return ``(J, J1, g)`` with ``J = J1 + kappa g``.

    ``J1`` includes the tether to the anchor when the cost is adapted.
    """
    U = _stack(u)
    if U.shape != (2, tg.steps + 1, g.size) or traj.phi.shape != U.shape[1:]:
        raise ValueError("control and state shapes do not match the grids")
    cost.targets.check(g, tg)
    j1 = _smooth_cost(g, tg, cost, traj.phi, U)
    gv = sparsity_value(g, tg, cost.sparsity, U)
    return j1 + cost.kappa * gv, j1, gv


def reduced_gradient(params, base: StateTrajectory, adj: AdjointTrajectory, u, cost: CostSpec):
    """Reduced gradient ``d = (-h(phi) p, r)`` and the smooth gradient.

    The smooth gradient is ``d + b0 u`` plus ``u - anchor`` for an adapted
    cost.
    """
    U = _stack(u)
    if adj.p.shape != base.phi.shape or U.shape[1:] != base.phi.shape:
        raise ValueError("adjoint, state and control shapes do not match")
    d = ReducedGradientField(-h_eval(params, base.phi) * adj.p, adj.r.copy())
    G = d.stack() + cost.b0 * U
    if cost.adapted:
        G = G + (U - cost.anchor_array(U.shape))
    return d, G


# -- proximal maps ------------------------------------------------------------


def _group_shrink(v, norms, w):
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > w, 1.0 - w / norms, 0.0)
    return scale


def prox_sparsity(g: SpatialGrid, tg: TimeGrid, kind: str, w: float, v) -> np.ndarray:
    """Prox of ``w * g`` in the space-time quadrature inner product (no box)."""
    if not w > 0:
        raise ValueError("prox weight must be positive")
    V = _stack(v)
    if kind == "none":
        return V.copy()
    if kind == "spacetime":
        return np.sign(V) * np.maximum(np.abs(V) - w, 0.0)
    out = np.empty_like(V)
    for i, Vi in enumerate(V):
        if kind == "time":
            out[i] = _group_shrink(Vi, slice_norms_space(g, Vi), w)[:, None] * Vi
        elif kind == "space":
            out[i] = _group_shrink(Vi, slice_norms_time(tg, Vi), w)[None, :] * Vi
        else:
            raise ValueError(f"unknown sparsity kind {kind!r}")
    return out


def prox_group_box(v: np.ndarray, weights: np.ndarray, t: float, lo: float, hi: float) -> np.ndarray:
    """Exact minimizer of ``0.5 |u - v|^2 + t |u| `` over the box, weighted norm.

    The minimizer is ``clamp(v rho / (rho + t))`` where ``rho = |u|`` solves a
    scalar fixed point; it is zero exactly when ``|v| <= t``.
    """
    nv = float(np.sqrt(weights @ (v * v)))
    if nv <= t:
        return np.zeros_like(v)

    def psi(rho):
        x = np.clip(v * (rho / (rho + t)), lo, hi)
        return float(np.sqrt(weights @ (x * x))) - rho

    b = float(np.sqrt(weights @ np.clip(v, lo, hi) ** 2))
    if psi(b) >= 0.0:
        rho = b
    else:
        a = b
        for _ in range(1100):
            a *= 0.5
            if psi(a) > 0.0:
                break
        else:
            return np.zeros_like(v)
        rho = brentq(psi, a, b, xtol=1e-15 * max(b, 1e-300), rtol=4 * np.finfo(float).eps, maxiter=200)
    return np.clip(v * (rho / (rho + t)), lo, hi)


def prox_composite(g, tg, kind: str, w: float, v, bounds: Bounds) -> np.ndarray:
    """Exact prox of ``w * g`` plus the box indicator.

    Needs ``lo < 0 < hi`` when ``w > 0`` so that zero is admissible.
    """
    V = _stack(v)
    lo, hi = _bounds_arrays(bounds)
    if kind == "none" or w == 0.0:
        return np.clip(V, lo, hi)
    if kind == "spacetime":
        return np.clip(np.sign(V) * np.maximum(np.abs(V) - w, 0.0), lo, hi)
    out = np.empty_like(V)
    for i, Vi in enumerate(V):
        l_i, h_i = float(lo[i, 0, 0]), float(hi[i, 0, 0])
        if kind == "time":
            out[i] = [prox_group_box(row, g.weights, w, l_i, h_i) for row in Vi]
        elif kind == "space":
            out[i] = np.column_stack([prox_group_box(col, tg.weights, w, l_i, h_i) for col in Vi.T])
        else:
            raise ValueError(f"unknown sparsity kind {kind!r}")
    return out


# -- certificates -------------------------------------------------------------


def _unit_ball_project(v, norm):
    return v if norm <= 1.0 else v / norm


def recover_subgradient(g, tg, kind: str, u, d_shifted, kappa: float) -> SubgradientField:
    """Subgradient of ``g`` at ``u`` matching the projection formula.

    ``d_shifted`` is ``d`` minus the anchor for adapted costs.  On the
    support the equality branch ``u / |u|`` is taken; elsewhere the
    negative scaled gradient projected to the unit ball.
    """
    U = _stack(u)
    D = _stack(d_shifted)
    lam = np.zeros_like(U)
    if kind == "none" or kappa == 0.0:
        return SubgradientField(lam[0], lam[1])
    if kind == "spacetime":
        lam = np.where(U != 0.0, np.sign(U), np.clip(-D / kappa, -1.0, 1.0))
        return SubgradientField(lam[0], lam[1])
    for i in range(2):
        if kind == "time":
            un = slice_norms_space(g, U[i])
            for k in range(U.shape[1]):
                if un[k] > 0.0:
                    lam[i, k] = U[i, k] / un[k]
                else:
                    v = -D[i, k] / kappa
                    lam[i, k] = _unit_ball_project(v, float(np.sqrt(g.weights @ (v * v))))
        elif kind == "space":
            un = slice_norms_time(tg, U[i])
            for j in range(U.shape[2]):
                if un[j] > 0.0:
                    lam[i, :, j] = U[i, :, j] / un[j]
                else:
                    v = -D[i, :, j] / kappa
                    lam[i, :, j] = _unit_ball_project(v, float(np.sqrt(tg.weights @ (v * v))))
        else:
            raise ValueError(f"unknown sparsity kind {kind!r}")
    return SubgradientField(lam[0], lam[1])


def subgradient_violation(g, tg, kind: str, u, lam) -> float:
    """Largest violation of the subdifferential membership of ``lam`` at ``u``."""
    U, L = _stack(u), _stack(lam)
    if kind == "none":
        return float(np.max(np.abs(L)))
    worst = 0.0
    if kind == "spacetime":
        on = U != 0.0
        worst = max(worst, float(np.max(np.abs(L[on] - np.sign(U[on])), initial=0.0)))
        worst = max(worst, float(np.max(np.abs(L[~on]) - 1.0, initial=0.0)))
        return max(worst, 0.0)
    for i in range(2):
        if kind == "time":
            un, ln = slice_norms_space(g, U[i]), slice_norms_space(g, L[i])
            on = un > 0
            if np.any(on):
                worst = max(worst, float(np.max(np.abs(L[i][on] - U[i][on] / un[on][:, None]))))
        else:
            un, ln = slice_norms_time(tg, U[i]), slice_norms_time(tg, L[i])
            on = un > 0
            if np.any(on):
                worst = max(worst, float(np.max(np.abs(L[i][:, on] - U[i][:, on] / un[on][None, :]))))
        worst = max(worst, float(np.max(ln - 1.0, initial=0.0)))
    return max(worst, 0.0)


def stationarity_residual(cost: CostSpec, bounds: Bounds, u, d, lam) -> float:
    """``max |u - clamp(-(d + kappa lam - anchor) / b_eff)|`` over all nodes and both components."""
    U = _stack(u)
    D = _stack(d)
    L = _stack(lam) if cost.kappa > 0 and cost.sparsity != "none" else 0.0
    lo, hi = _bounds_arrays(bounds)
    shifted = D - cost.anchor_array(U.shape) if cost.adapted else D
    target = np.clip(-(shifted + cost.kappa * L) / cost.b_eff, lo, hi)
    return float(np.max(np.abs(U - target)))


def sparsity_report(g, u, d, kappa: float, kind: str = "time", rel_slack: float = 1e-6, zero_tol: float = 1e-10):
    """Per-slice check of ``|u_i(t)| = 0  <=>  |d_i(t)| <= kappa``.

    A slice counts as zero when its norm is at most ``zero_tol`` times the
    largest slice norm (or 1).  The kappa comparison allows a relative slack
    of ``rel_slack`` on either side.
    """
    if kind != "time":
        raise ValueError("sparsity_report supports the time kind")
    U, D = _stack(u), _stack(d)
    rows = []
    ok_all = True
    for i in range(2):
        un = slice_norms_space(g, U[i])
        dn = slice_norms_space(g, D[i])
        scale = max(1.0, float(np.max(un)))
        for k in range(U.shape[1]):
            zero = bool(un[k] <= zero_tol * scale)
            if zero:
                ok = bool(dn[k] <= kappa * (1.0 + rel_slack))
            else:
                ok = bool(dn[k] >= kappa * (1.0 - rel_slack))
            ok_all &= ok
            rows.append({"component": i + 1, "k": k, "u_norm": float(un[k]), "d_norm": float(dn[k]),
                         "zero": zero, "pass": ok})
    n_pass = sum(r["pass"] for r in rows)
    return {"rows": rows, "pass_fraction": n_pass / len(rows), "all_pass": ok_all, "kappa": float(kappa)}


def active_slices(g, u, zero_tol: float = 1e-10) -> tuple[int, int]:
    """Number of nonzero time slices of each component."""
    U = _stack(u)
    out = []
    for Ui in U:
        un = slice_norms_space(g, Ui)
        out.append(int(np.sum(un > zero_tol * max(1.0, float(np.max(un))))))
    return tuple(out)


# -- solver -----------------------------------------------------------------


def _fill_slice_zero(g, tg, cost: CostSpec, bounds: Bounds, U, D):
    """Set slice 0 by the pointwise projection formula."""
    lo, hi = _bounds_arrays(bounds)
    b = cost.b_eff
    Dp = D[:, 0] - (cost.anchor_array(U.shape)[:, 0] if cost.adapted else 0.0)
    kind, kap = cost.sparsity, cost.kappa
    if kind == "space" and kap > 0:
        for i in range(2):
            rho = slice_norms_time(tg, U[i])
            with np.errstate(divide="ignore"):
                denom = np.where(rho > 0, b + kap / np.where(rho > 0, rho, 1.0), np.inf)
            U[i, 0] = np.clip(np.where(rho > 0, -Dp[i] / denom, 0.0), lo[i, 0, 0], hi[i, 0, 0])
        return U
    tmp = np.zeros((2, 1, g.size))
    tmp[:, 0] = -Dp / b
    if kind == "time" and kap > 0:
        for i in range(2):
            U[i, 0] = prox_group_box(tmp[i, 0], g.weights, kap / b, float(lo[i, 0, 0]), float(hi[i, 0, 0]))
        return U
    if kind == "spacetime" and kap > 0:
        U[:, 0] = np.clip(np.sign(tmp[:, 0]) * np.maximum(np.abs(tmp[:, 0]) - kap / b, 0.0), lo[:, 0], hi[:, 0])
        return U
    U[:, 0] = np.clip(tmp[:, 0], lo[:, 0], hi[:, 0])
    return U


class _Evaluator:
    """Caches the forward and adjoint solves at the current control."""

    def __init__(self, problem: ControlProblem, spec: PotentialSpec, cost: CostSpec):
        self.pb, self.spec, self.cost = problem, spec, cost
        self.n_forward = 0
        self.n_adjoint = 0

    def pair(self, U):
        return ControlPair(U[0], U[1])

    def forward(self, U):
        self.n_forward += 1
        pb = self.pb
        return solve_state(pb.grid, pb.tgrid, pb.params, self.spec, pb.init, self.pair(U), pb.solve_opts)

    def smooth(self, traj, U):
        return _smooth_cost(self.pb.grid, self.pb.tgrid, self.cost, traj.phi, U)

    def gradient(self, traj, U):
        self.n_adjoint += 1
        adj = solve_adjoint(self.pb.params, self.cost, traj, self.pair(U), self.pb.solve_opts)
        d, G = reduced_gradient(self.pb.params, traj, adj, U, self.cost)
        return adj, d, G


def _certify(problem, cost, U, d):
    g, tg = problem.grid, problem.tgrid
    D = d.stack()
    Dp = D - cost.anchor_array(U.shape) if cost.adapted else D
    lam = recover_subgradient(g, tg, cost.sparsity, U, Dp, cost.kappa)
    res = stationarity_residual(cost, problem.bounds, U, D, lam)
    return lam, res


def proximal_gradient_solve(problem: ControlProblem, gamma: float, cost: CostSpec, u0,
                            tol: float = 1e-8, max_iter: int = 500, tau_max: float = 1e8,
                            max_backtracks: int = 60, method: str = "bb") -> OptimizationResult:
    """Proximal gradient on the deep-quench problem at ``gamma``.

    Each update is ``u <- prox(u - tau G)`` with the exact prox of the
    sparsity term plus the box.  Steps start at ``1 / b_eff``.  A
    sufficient-decrease test with halving keeps the composite objective
    monotone.  Stops when the stationarity residual of the projection
    formula drops below ``tol``.

    ``method="bb"`` uses Barzilai-Borwein trial steps from the current
    iterate.  ``method="fista"`` takes the step from an extrapolated point
    (monotone FISTA with restart), which is much faster on weakly
    regularized tracking problems.
    """
    if method not in ("bb", "fista"):
        raise ValueError(f"unknown method {method!r}")
    g, tg, bounds = problem.grid, problem.tgrid, problem.bounds
    if cost.kappa > 0 and cost.sparsity != "none":
        if not (bounds.u1_min < 0 < bounds.u1_max and bounds.u2_min < 0 < bounds.u2_max):
            raise ValueError("(A4) sparsity needs lower bounds below 0 and upper bounds above 0")
    spec = PotentialSpec.deep_quench(gamma)
    ev = _Evaluator(problem, spec, cost)
    lo, hi = _bounds_arrays(bounds)
    U = np.clip(_stack(u0).astype(float), lo, hi)
    kind, kap = cost.sparsity, cost.kappa
    wq = tg.weights[None, :, None] * g.weights[None, None, :]

    traj = ev.forward(U)
    adj, d, G = ev.gradient(traj, U)
    U = _fill_slice_zero(g, tg, cost, bounds, U, d.stack())
    j1 = ev.smooth(traj, U)
    F = j1 + kap * sparsity_value(g, tg, kind, U)
    lam, res = _certify(problem, cost, U, d)
    hist = {"objective": [F], "residual": [res], "tau": []}
    tau = 1.0 / cost.b_eff
    converged = res <= tol
    status = "converged" if converged else "max_iter"
    it = 0
    if method == "fista":
        loop = _fista_loop(problem, ev, cost, U, traj, adj, d, G, j1, F, tol, max_iter, tau, tau_max,
                           max_backtracks, hist)
        U, traj, adj, d, G, j1, F, lam, res, it, status = loop
        converged = status == "converged"
        if status == "stalled":
            status = "max_iter"
        tau = hist["tau"][-1] if hist["tau"] else tau
    # fista hands over to bb once it stalls near roundoff level
    while status != "line_search_failed" and not converged and it < max_iter:
        it += 1
        accepted = False
        for _ in range(max_backtracks):
            V = U - tau * G
            Un = prox_composite(g, tg, kind, tau * kap, V, bounds)
            Un[:, 0] = U[:, 0]
            step = Un - U
            try:
                traj_n = ev.forward(Un)
            except SolverError:
                tau *= 0.5
                continue
            j1_n = ev.smooth(traj_n, Un)
            model = j1 + float(np.sum(wq * G * step)) + float(np.sum(wq * step * step)) / (2 * tau)
            if j1_n <= model + 1e-12 * abs(j1):
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            status = "line_search_failed"
            break
        adj_n, d_n, G_n = ev.gradient(traj_n, Un)
        Un = _fill_slice_zero(g, tg, cost, bounds, Un, d_n.stack())
        s = Un - U
        y = G_n - G
        s[:, 0] = 0.0
        y[:, 0] = 0.0
        sy = float(np.sum(wq * s * y))
        ss = float(np.sum(wq * s * s))
        U, traj, adj, d, G, j1 = Un, traj_n, adj_n, d_n, G_n, j1_n
        F = j1 + kap * sparsity_value(g, tg, kind, U)
        lam, res = _certify(problem, cost, U, d)
        hist["objective"].append(F)
        hist["residual"].append(res)
        hist["tau"].append(tau)
        if res <= tol:
            converged = True
            status = "converged"
            break
        tau = ss / sy if sy > 0 and ss > 0 else 1.0 / cost.b_eff
        tau = float(min(max(tau, 1e-12), tau_max))
    u_out = ControlPair(U[0], U[1], bounds)
    Jt, j1_out, gv = eval_cost(g, tg, cost, traj, U)
    report = {
        "gamma": float(gamma),
        "status": status,
        "converged": bool(converged),
        "iterations": it,
        "stationarity_residual": float(res),
        "subgradient_violation": subgradient_violation(g, tg, kind, U, lam.stack()),
        "objective": float(Jt),
        "smooth_cost": float(j1_out),
        "sparsity_value": float(gv),
        "active_slices": list(active_slices(g, U)),
        "separation_margin": traj.separation_margin(),
        "forward_solves": ev.n_forward,
        "adjoint_solves": ev.n_adjoint,
        "history": hist,
    }
    return OptimizationResult(u_out, traj, adj, lam, d, report)


def _fista_loop(problem, ev, cost, U, traj, adj, d, G, j1, F, tol, max_iter, tau, tau_max, max_backtracks, hist,
                stall_limit=30):
    g, tg, bounds = problem.grid, problem.tgrid, problem.bounds
    kind, kap = cost.sparsity, cost.kappa
    wq = tg.weights[None, :, None] * g.weights[None, None, :]
    Y, fy, Gy = U, j1, G
    t = 1.0
    it = 0
    res = _certify(problem, cost, U, d)[1]
    lam = None
    status = "max_iter"
    best, stall = F, 0
    while it < max_iter:
        it += 1
        accepted = False
        for _ in range(max_backtracks):
            Z = prox_composite(g, tg, kind, tau * kap, Y - tau * Gy, bounds)
            Z[:, 0] = U[:, 0]
            step = Z - Y
            try:
                traj_z = ev.forward(Z)
            except SolverError:
                tau *= 0.5
                continue
            j1_z = ev.smooth(traj_z, Z)
            model = fy + float(np.sum(wq * Gy * step)) + float(np.sum(wq * step * step)) / (2 * tau)
            if j1_z <= model + 1e-12 * abs(fy):
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            status = "line_search_failed"
            break
        F_z = j1_z + kap * sparsity_value(g, tg, kind, Z)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # a plain step from U already passed the descent test
        if Y is U or F_z <= F:
            adj_z, d_z, G_z = ev.gradient(traj_z, Z)
            Z = _fill_slice_zero(g, tg, cost, bounds, Z, d_z.stack())
            U_old = U
            U, traj, adj, d, G, j1, F = Z, traj_z, adj_z, d_z, G_z, j1_z, F_z
            if float(np.sum(wq * (Y - U) * (U - U_old))) > 0.0:
                # gradient restart: momentum points uphill
                Y, t = U, 1.0
            else:
                Y = U + ((t - 1.0) / t_new) * (U - U_old)
                t = t_new
        else:
            # restart from the current iterate
            Y, t = U, 1.0
        lam, res = _certify(problem, cost, U, d)
        hist["objective"].append(F)
        hist["residual"].append(res)
        hist["tau"].append(tau)
        if res <= tol:
            status = "converged"
            break
        if F < best - 1e-13 * max(1.0, abs(best)):
            best, stall = F, 0
        else:
            stall += 1
            if stall >= stall_limit:
                status = "stalled"
                break
        if Y is U:
            fy, Gy = j1, G
        else:
            try:
                traj_y = ev.forward(Y)
                fy = ev.smooth(traj_y, Y)
                Gy = ev.gradient(traj_y, Y)[2]
            except SolverError:
                Y, t, fy, Gy = U, 1.0, j1, G
        tau = min(1.25 * tau, tau_max)
    if lam is None:
        lam, res = _certify(problem, cost, U, d)
    return U, traj, adj, d, G, j1, F, lam, res, it, status


def objective_value(problem, spec, cost, u) -> float:
    """Composite objective at ``u`` via one forward solve."""
    pb = problem
    U = _stack(u)
    traj = solve_state(pb.grid, pb.tgrid, pb.params, spec, pb.init, ControlPair(U[0], U[1]), pb.solve_opts)
    return eval_cost(pb.grid, pb.tgrid, cost, traj, U)[0]


# -- continuation -------------------------------------------------------------


def default_schedule(stages: int = 7, gamma0: float = 1.0, ratio: float = 0.5) -> list[float]:
    return [gamma0 * ratio**j for j in range(stages)]


@dataclass
class ContinuationResult:
    u: ControlPair
    stages: list
    records: list
    obstacle_state: StateTrajectory
    limit_residual: float
    stopped_early: bool


def deep_quench_continuation(problem: ControlProblem, schedule, cost: CostSpec, u0,
                             tol: float = 1e-8, max_iter: int = 500, stop_rel: float = 1e-4,
                             anchor_first: bool = False, method: str = "bb") -> ContinuationResult:
    """Solve a decreasing sequence of deep-quench problems with warm starts.

    Stage ``j > 0`` uses the adapted cost anchored at the stage ``j - 1``
    control.  After the last stage the obstacle state at the final control
    is computed and the limit projection residual is evaluated with the
    smallest-gamma adjoint and the obstacle phase field.  This is a
    heuristic realization of the limit passage; it certifies stationarity,
    not global optimality.
    """
    sched = [float(s) for s in schedule]
    if not sched or any(not (0 < s <= 1) for s in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be strictly decreasing in (0, 1]")
    g, tg = problem.grid, problem.tgrid
    stages, records = [], []
    u_prev = ControlPair(*_stack(u0))
    prev = None
    stopped = False
    for j, gam in enumerate(sched):
        if j == 0:
            stage_cost = cost if anchor_first else replace(cost, adapted_anchor=None)
        else:
            stage_cost = replace(cost, adapted_anchor=ControlPair(prev.u.u1, prev.u.u2))
        try:
            res = proximal_gradient_solve(problem, gam, stage_cost, u_prev, tol=tol, max_iter=max_iter,
                                          method=method)
        except SolverError as exc:
            raise SolverError(f"continuation stage {j} (gamma={gam}) failed: {exc}") from exc
        U = res.u.stack()
        plain = replace(cost, adapted_anchor=None)
        J = eval_cost(g, tg, plain, res.state, U)[0]
        Jt = res.report["objective"]
        rec = {"stage": j, "gamma": gam, "J": float(J), "J_adapted": float(Jt),
               "converged": res.report["converged"],
               "stationarity_residual": res.report["stationarity_residual"],
               "separation_margin": res.state.separation_margin()}
        if prev is not None:
            dU = U - prev.u.stack()
            rec["u_change"] = float(np.sqrt(_q_inner(g, tg, dU, dU)))
            rec["phi_change_c0l2"] = sup_norm_c0l2(g, res.state.phi - prev.state.phi)
            Up = prev.u.stack()
            ref = float(np.sqrt(_q_inner(g, tg, Up, Up)))
        records.append(rec)
        stages.append(res)
        if prev is not None and rec["u_change"] < stop_rel * ref:
            stopped = True
            prev = res
            break
        prev = res
        u_prev = res.u
    last = stages[-1]
    obst = solve_state(g, tg, problem.params, PotentialSpec.obstacle(), problem.init, last.u, problem.solve_opts)
    d_lim = np.stack([-h_eval(problem.params, obst.phi) * last.adjoint.p, last.adjoint.r])
    plain = replace(cost, adapted_anchor=None)
    U = last.u.stack()
    lam = recover_subgradient(g, tg, cost.sparsity, U, d_lim, cost.kappa)
    resid = stationarity_residual(plain, problem.bounds, U, d_lim, lam)
    return ContinuationResult(last.u, stages, records, obst, resid, stopped)


# -- derivative verification --------------------------------------------------


def gradient_check(problem: ControlProblem, gamma: float, cost: CostSpec, u, directions: int = 10,
                   eps: float = 1e-5, seed: int = 0) -> dict:
    """Compare the adjoint gradient with central differences of the smooth cost.

    Also checks the duality pairing between the linearized state and the
    adjoint for each direction.  Directions are standard normal in both
    components with slice 0 zeroed (it has no quadrature weight).
    """
    g, tg, pb = problem.grid, problem.tgrid, problem
    spec = PotentialSpec.deep_quench(gamma)
    U = _stack(u)
    up = ControlPair(U[0], U[1])
    base = solve_state(g, tg, pb.params, spec, pb.init, up, pb.solve_opts)
    adj = solve_adjoint(pb.params, cost, base, up, pb.solve_opts)
    d, G = reduced_gradient(pb.params, base, adj, U, cost)
    src_q, src_t = tracking_sources(cost, base)
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((directions,) + U.shape)
    H[:, :, 0] = 0.0

    def j1_at(V):
        tr = solve_state(g, tg, pb.params, spec, pb.init, ControlPair(V[0], V[1]), pb.solve_opts)
        return _smooth_cost(g, tg, cost, tr.phi, V)

    points = [U + s * eps * h for h in H for s in (1.0, -1.0)]
    vals = parallel_map(j1_at, points)
    rows = []
    for i, h in enumerate(H):
        fd = (vals[2 * i] - vals[2 * i + 1]) / (2 * eps)
        ad = _q_inner(g, tg, G, h)
        lin = solve_linearized(pb.params, base, up, ControlPair(h[0], h[1]), pb.solve_opts)
        lhs = inner_product_q(g, tg, src_q, lin.rho) + inner_product(g, src_t, lin.rho[-1])
        rhs = _q_inner(g, tg, d.stack(), h)
        rows.append({
            "adjoint": ad, "finite_difference": fd,
            "rel_err": abs(fd - ad) / max(abs(ad), np.finfo(float).tiny),
            "duality_lhs": lhs, "duality_rhs": rhs,
            "duality_rel_err": abs(lhs - rhs) / max(abs(rhs), abs(lhs), np.finfo(float).tiny),
        })
    return {
        "gamma": float(gamma),
        "eps": float(eps),
        "directions": rows,
        "max_rel_err": max(r["rel_err"] for r in rows),
        "max_duality_rel_err": max(r["duality_rel_err"] for r in rows),
        "separation_margin": base.separation_margin(),
    }
