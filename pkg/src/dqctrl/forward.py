"""Backward-Euler state solver for both potential regimes.

Each step solves the three coupled residuals for ``(mu, phi, sigma)`` at
``t_{k+1}`` with a monolithic Newton method.  Unknowns are interleaved per
node (index ``3 * node + field``) so the Jacobian is banded and each
linear solve is a single LAPACK banded factorization.

Deep quench uses damped Newton with iterates kept strictly inside
``(-1, 1)``.  The obstacle regime uses a primal-dual active set method on
the resolvent form ``phi = clamp(phi + xi / c, -1, 1)`` with ``c = beta/dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .controls import ControlPair
from .grid import SpatialGrid, TimeGrid
from .model import (
    GUARD_BAND,
    InitialData,
    ModelParams,
    PotentialSpec,
    f1_prime,
    f1_second,
    f2_prime,
    f2_second,
    h_eval,
    h_prime,
    p_eval,
    p_prime,
)


class SolverError(RuntimeError):
    pass


class NewtonConvergenceError(SolverError):
    def __init__(self, message, step=None, history=()):
        self.step = step
        self.history = list(history)
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{message}{where}; residual history {self.history}")


class GuardBandError(SolverError):
    def __init__(self, message, step=None):
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{message}{where}")


@dataclass(frozen=True)
class SolveOptions:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    linear_tol: float = 1e-12
    max_halvings: int = 30
    verify_linear: bool = False
    polish: bool = True

    def violations(self) -> list[str]:
        out = []
        if not self.newton_tol > 0:
            out.append("newton_tol must be positive")
        if not self.linear_tol > 0:
            out.append("linear_tol must be positive")
        if self.newton_max_iter < 1:
            out.append("newton_max_iter must be at least 1")
        if self.max_halvings < 0:
            out.append("max_halvings must be nonnegative")
        return out

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class StateTrajectory:
    grid: SpatialGrid
    tgrid: TimeGrid
    spec: PotentialSpec
    mu: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    newton_iterations: np.ndarray = field(default=None)
    final_residuals: np.ndarray = field(default=None)

    def slice(self, k: int):
        return self.mu[k], self.phi[k], self.sigma[k]

    def separation_margin(self) -> float:
        return float(1.0 - np.max(np.abs(self.phi)))


# -- banded Jacobian layout -------------------------------------------------


class BandedLayout:
    """Scatter maps from 3x3 node-block operators to LAPACK banded storage.

    Every block of the step Jacobian has the form ``cL * Lap + diag(d)``.
    The layout precomputes where each entry lands so assembly is a few
    vectorized scatters.
    """

    def __init__(self, g: SpatialGrid):
        lap = g.laplacian.tocoo()
        lap.sum_duplicates()
        self.n = g.size
        self.size = 3 * g.size
        self.lap = g.laplacian
        self.lap_t = g.laplacian.T.tocsr()
        self.bw = 3 * int(np.max(np.abs(lap.row - lap.col))) + 2
        width = self.size
        li, lj, self.lv = lap.row, lap.col, lap.data
        node = np.arange(self.n)
        self._lap_idx = {}
        self._lap_rows = {}
        self._diag_idx = {}
        for a in range(3):
            for b in range(3):
                for tr, (ri, cj) in ((False, (li, lj)), (True, (lj, li))):
                    rows, cols = 3 * ri + a, 3 * cj + b
                    self._lap_idx[a, b, tr] = (self.bw + rows - cols) * width + cols
                    self._lap_rows[a, b, tr] = ri
                rows, cols = 3 * node + a, 3 * node + b
                self._diag_idx[a, b] = (self.bw + rows - cols) * width + cols

    def assemble(self, blocks, transpose=False, replace_rows=None):
        """Banded matrix for ``blocks[(a, b)] = (cL, d)``.

        ``transpose`` builds the transpose.  ``replace_rows`` is a boolean
        node mask; rows of field 1 at those nodes become identity rows.
        """
        ab = np.zeros((2 * self.bw + 1) * self.size)
        for (a, b), (c_lap, d) in blocks.items():
            ta, tb = (b, a) if transpose else (a, b)
            keep = None
            if replace_rows is not None and a == 1 and not transpose:
                keep = ~replace_rows
            if c_lap != 0.0:
                vals = c_lap * self.lv
                if keep is not None:
                    vals = vals * keep[self._lap_rows[a, b, False]]
                ab[self._lap_idx[ta, tb, transpose]] += vals
            d = np.broadcast_to(np.asarray(d, dtype=float), (self.n,))
            if keep is not None:
                d = d * keep
            ab[self._diag_idx[ta, tb]] += d
        if replace_rows is not None and not transpose:
            ab[self._diag_idx[1, 1]] += replace_rows.astype(float)
        return ab.reshape(2 * self.bw + 1, self.size)

    def matvec(self, blocks, x, transpose=False):
        x = x.reshape(self.n, 3)
        out = np.zeros((self.n, 3))
        lap = self.lap_t if transpose else self.lap
        for (a, b), (c_lap, d) in blocks.items():
            ta, tb = (b, a) if transpose else (a, b)
            col = x[:, tb]
            term = np.asarray(d, dtype=float) * col
            if c_lap != 0.0:
                term = term + c_lap * (lap @ col)
            out[:, ta] += term
        return out.ravel()

    def solve(self, ab, rhs, opts: SolveOptions | None = None, blocks=None, transpose=False):
        x = solve_banded((self.bw, self.bw), ab, rhs, check_finite=False)
        if not np.all(np.isfinite(x)):
            raise SolverError("banded solve produced non-finite values")
        if opts is not None and opts.verify_linear and blocks is not None:
            res = self.matvec(blocks, x, transpose) - rhs
            scale = max(np.max(np.abs(rhs)), np.finfo(float).tiny)
            if np.max(np.abs(res)) > opts.linear_tol * scale * self.size:
                raise SolverError("linear solve residual above linear_tol")
        return x


_LAYOUTS: dict = {}


def layout_for(g: SpatialGrid) -> BandedLayout:
    lay = _LAYOUTS.get(g)
    if lay is None:
        lay = _LAYOUTS[g] = BandedLayout(g)
    return lay


# -- residuals and Jacobians -------------------------------------------------


def interleave(a, b, c):
    return np.column_stack([a, b, c]).ravel()


def deinterleave(z):
    z = z.reshape(-1, 3)
    return z[:, 0], z[:, 1], z[:, 2]


def smooth_residuals(g, params, dt, old, new, u1, u2):
    """Step residuals with the convex potential term left out of the second one."""
    mu_o, phi_o, sig_o = old
    mu, phi, sig = new
    lap = g.laplacian
    m = sig + params.chi * (1.0 - phi) - mu
    pm = p_eval(params, phi) * m
    lphi = lap @ phi
    r1 = params.alpha * (mu - mu_o) / dt + (phi - phi_o) / dt - lap @ mu - pm + h_eval(params, phi) * u1
    r2 = params.beta * (phi - phi_o) / dt - lphi + f2_prime(params, phi) - mu - params.chi * sig
    r3 = (sig - sig_o) / dt - lap @ sig + params.chi * lphi + pm - u2
    return r1, r2, r3


def jacobian_blocks(params, dt, mu, phi, sig, u1, f1pp):
    """Blocks ``(cL, diag)`` of the step Jacobian at ``(mu, phi, sig)``.

    ``f1pp`` is the second derivative of the convex potential (zero in the
    obstacle regime, where that row is handled separately).
    """
    a, b, chi = params.alpha, params.beta, params.chi
    p = p_eval(params, phi)
    dp = p_prime(params, phi)
    m = sig + chi * (1.0 - phi) - mu
    one = 1.0
    return {
        (0, 0): (-one, a / dt + p),
        (0, 1): (0.0, 1.0 / dt - dp * m + chi * p + h_prime(params, phi) * u1),
        (0, 2): (0.0, -p),
        (1, 0): (0.0, -one),
        (1, 1): (-one, b / dt + f1pp + f2_second(params, phi)),
        (1, 2): (0.0, -chi),
        (2, 0): (0.0, -p),
        (2, 1): (chi, dp * m - chi * p),
        (2, 2): (-one, 1.0 / dt + p),
    }


def time_matrix(params: ModelParams) -> np.ndarray:
    """Coefficients of the discrete time derivative, ``E y' `` per node."""
    return np.array([[params.alpha, 1.0, 0.0], [0.0, params.beta, 0.0], [0.0, 0.0, 1.0]])


# -- one step ----------------------------------------------------------------


def _polish(lay, params, spec, opts, dt, resid, mu, phi, sig, u1, nrm):
    """One extra full Newton step once the tolerance is met.

    Quadratic convergence puts the polished state at roundoff level, which
    keeps finite-difference quotients of the forward map clean.  The step is
    kept only if it stays in the guard band and within tolerance.
    """
    blocks = jacobian_blocks(params, dt, mu, phi, sig, u1, f1_second(spec, phi))
    dmu, dphi, dsig = deinterleave(lay.solve(lay.assemble(blocks), -resid(mu, phi, sig)))
    phi_c = phi + dphi
    if np.any(np.abs(phi_c) >= 1.0 - GUARD_BAND):
        return mu, phi, sig, nrm
    mu_c, sig_c = mu + dmu, sig + dsig
    nrm_c = float(np.max(np.abs(resid(mu_c, phi_c, sig_c))))
    if nrm_c <= max(nrm, opts.newton_tol, _roundoff_floor(spec, phi_c)):
        return mu_c, phi_c, sig_c, nrm_c
    return mu, phi, sig, nrm


def _roundoff_floor(spec, phi) -> float:
    """Residual level that rounding in ``phi`` alone produces near the pure phases."""
    return float(16 * np.finfo(float).eps * np.max(np.abs(phi) * f1_second(spec, phi) + np.abs(f1_prime(spec, phi))))


def _step_deep_quench(g, params, spec, opts, dt, old, u1, u2, step):
    lay = layout_for(g)
    lo, hi = -1.0 + GUARD_BAND, 1.0 - GUARD_BAND
    mu, phi, sig = (np.array(v, dtype=float) for v in old)
    phi = np.clip(phi, lo, hi)

    def resid(mu, phi, sig):
        r1, r2, r3 = smooth_residuals(g, params, dt, old, (mu, phi, sig), u1, u2)
        return interleave(r1, r2 + f1_prime(spec, phi), r3)

    res = resid(mu, phi, sig)
    nrm = float(np.max(np.abs(res)))
    history = [nrm]
    for it in range(opts.newton_max_iter + 1):
        tol = max(opts.newton_tol, _roundoff_floor(spec, phi))
        if nrm <= tol:
            if opts.polish:
                mu, phi, sig, nrm = _polish(lay, params, spec, opts, dt, resid, mu, phi, sig, u1, nrm)
            if np.any(np.abs(phi) >= hi):
                raise GuardBandError("converged phase field touches the guard band", step)
            return mu, phi, sig, f1_prime(spec, phi), it, nrm
        if it == opts.newton_max_iter:
            break
        blocks = jacobian_blocks(params, dt, mu, phi, sig, u1, f1_second(spec, phi))
        delta = lay.solve(lay.assemble(blocks), -res, opts, blocks)
        dmu, dphi, dsig = deinterleave(delta)
        accepted = False
        interior_seen = False
        for halving in range(opts.max_halvings + 1):
            t = 0.5**halving
            phi_c = phi + t * dphi
            if np.any(np.abs(phi_c) >= 1.0):
                continue
            interior_seen = True
            phi_c = np.clip(phi_c, lo, hi)
            mu_c, sig_c = mu + t * dmu, sig + t * dsig
            res_c = resid(mu_c, phi_c, sig_c)
            nrm_c = float(np.max(np.abs(res_c)))
            if nrm_c < nrm or nrm_c <= tol:
                mu, phi, sig, res, nrm = mu_c, phi_c, sig_c, res_c, nrm_c
                accepted = True
                break
        if not accepted:
            if not interior_seen:
                raise GuardBandError("no damped Newton step stays inside (-1, 1)", step)
            raise NewtonConvergenceError("line search failed", step, history)
        history.append(nrm)
    raise NewtonConvergenceError("Newton did not converge", step, history)


def _step_obstacle(g, params, opts, dt, old, xi_old, u1, u2, step):
    lay = layout_for(g)
    c = params.beta / dt
    mu, phi, sig = (np.array(v, dtype=float) for v in old)
    phi = np.clip(phi, -1.0, 1.0)
    xi = np.array(xi_old, dtype=float)
    prev = None
    history = []
    for it in range(opts.newton_max_iter + 1):
        w = phi + xi / c
        up, dn = w > 1.0, w < -1.0
        act = up | dn
        r1, r2, r3 = smooth_residuals(g, params, dt, old, (mu, phi, sig), u1, u2)
        target = np.where(up, 1.0, -1.0)
        r2row = np.where(act, phi - target, r2)
        nrm = float(max(np.max(np.abs(r1)), np.max(np.abs(r2row)), np.max(np.abs(r3))))
        history.append(nrm)
        if prev is not None and np.array_equal(prev[0], up) and np.array_equal(prev[1], dn):
            if nrm <= opts.newton_tol:
                return mu, phi, sig, xi, it, nrm
        if it == opts.newton_max_iter:
            break
        blocks = jacobian_blocks(params, dt, mu, phi, sig, u1, 0.0)
        ab = lay.assemble(blocks, replace_rows=act)
        delta = lay.solve(ab, -interleave(r1, r2row, r3))
        dmu, dphi, dsig = deinterleave(delta)
        mu, phi, sig = mu + dmu, phi + dphi, sig + dsig
        phi[up] = 1.0
        phi[dn] = -1.0
        _, r2_new, _ = smooth_residuals(g, params, dt, old, (mu, phi, sig), u1, u2)
        xi = np.where(act, -r2_new, 0.0)
        prev = (up, dn)
    raise NewtonConvergenceError("active-set Newton did not converge", step, history)


def step_state(g, params, spec, opts, old, u1, u2, dt, xi_old=None, step=None):
    """Advance ``old = (mu, phi, sigma)`` by one step with control slice ``(u1, u2)``.

    Returns ``(mu, phi, sigma, xi, iterations, residual)``.
    """
    if spec.is_obstacle:
        if xi_old is None:
            xi_old = np.zeros_like(old[1])
        return _step_obstacle(g, params, opts, dt, old, xi_old, u1, u2, step)
    return _step_deep_quench(g, params, spec, opts, dt, old, u1, u2, step)


def solve_state(
    g: SpatialGrid,
    tg: TimeGrid,
    params: ModelParams,
    spec: PotentialSpec,
    init: InitialData,
    u: ControlPair,
    opts: SolveOptions | None = None,
) -> StateTrajectory:
    opts = opts or SolveOptions()
    init.check(g)
    u.check(g, tg)
    if spec.is_obstacle:
        if np.any(np.abs(init.phi0) > 1.0):
            raise ValueError("obstacle solve needs |phi0| <= 1")
        xi0 = np.zeros(g.size)
    else:
        if np.any(np.abs(init.phi0) >= 1.0 - GUARD_BAND):
            raise ValueError("deep-quench solve needs |phi0| < 1 strictly; mollify the data first")
        xi0 = f1_prime(spec, init.phi0)
    nt = tg.steps + 1
    mu = np.empty((nt, g.size))
    phi = np.empty((nt, g.size))
    sig = np.empty((nt, g.size))
    xi = np.empty((nt, g.size))
    iters = np.zeros(nt, dtype=int)
    resid = np.zeros(nt)
    mu[0], phi[0], sig[0], xi[0] = init.mu0, init.phi0, init.sigma0, xi0
    for k in range(tg.steps):
        out = step_state(
            g, params, spec, opts, (mu[k], phi[k], sig[k]), u.u1[k + 1], u.u2[k + 1],
            tg.dt, xi_old=xi[k], step=k + 1,
        )
        mu[k + 1], phi[k + 1], sig[k + 1], xi[k + 1], iters[k + 1], resid[k + 1] = out
    return StateTrajectory(g, tg, spec, mu, phi, sig, xi, iters, resid)


def balance_check(g, tg, params, traj: StateTrajectory, u: ControlPair) -> float:
    """Largest per-step defect of the integrated mass balance.

    Adding the first and third equations kills the proliferation terms and
    the Laplacians integrate to zero, so each step changes
    ``int(alpha mu + phi + sigma)`` by exactly ``dt * int(u2 - h(phi) u1)``.
    """
    w = g.weights
    total = (params.alpha * traj.mu + traj.phi + traj.sigma) @ w
    source = (u.u2 - h_eval(params, traj.phi) * u.u1) @ w
    defect = np.diff(total) - tg.dt * source[1:]
    return float(np.max(np.abs(defect))) if defect.size else 0.0
