"""Acceptance gate: one test per criterion, each recording a pass/fail line."""

import time
from pathlib import Path

import numpy as np
import pytest

from dqctrl.adjoint import TargetData, solve_adjoint
from dqctrl.cli import run
from dqctrl.controls import Bounds, ControlPair
from dqctrl.forward import balance_check, solve_state
from dqctrl.grid import SpatialGrid, TimeGrid, h1_norm, norm, norm_q, slice_norms_space, sup_norm_c0l2
from dqctrl.model import InitialData, ModelParams, PotentialSpec, mollify_initial_data
from dqctrl.optimize import (
    ControlProblem,
    CostSpec,
    active_slices,
    gradient_check,
    proximal_gradient_solve,
    reduced_gradient,
    sparsity_report,
    subgradient_violation,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RAMP = ModelParams(p_shape="ramp")


def _random_case(rng, dim, k_max=10.0):
    n = 32 if dim == 1 else 12
    g, tg = SpatialGrid(dim, n), TimeGrid(1.0, 50)
    prm = ModelParams(alpha=rng.uniform(0.5, 2), beta=rng.uniform(0.5, 2), chi=rng.uniform(0.1, 1),
                      f2_k=rng.uniform(0.5, k_max), p_max=rng.uniform(0, 1),
                      p_shape=str(rng.choice(["constant", "ramp"])))
    mu0, phi0, sig0 = rng.normal(0, 0.2, g.size), rng.uniform(-1.2, 1.2, g.size), rng.uniform(0, 1, g.size)
    u = ControlPair(rng.uniform(-2, 2, (51, g.size)), rng.uniform(-2, 2, (51, g.size)))
    return g, tg, prm, (mu0, phi0, sig0), u


@pytest.fixture(scope="module")
def obstacle_suite():
    rng = np.random.default_rng(123)
    out = []
    for s in range(20):
        g, tg, prm, (mu0, phi0, sig0), u = _random_case(rng, 1 if s < 16 else 2)
        init = InitialData(mu0, np.clip(phi0, -1, 1), sig0)
        out.append((g, tg, prm, u, solve_state(g, tg, prm, PotentialSpec.obstacle(), init, u)))
    return out


@pytest.fixture(scope="module")
def quench_suite():
    rng = np.random.default_rng(321)
    spec = PotentialSpec.deep_quench(0.25)
    out = []
    for s in range(20):
        # the pure-phase pull k r must stay balanced by f1' well above double precision:
        # the equilibrium gap behaves like 2 exp(-2 k / gamma)
        g, tg, prm, (mu0, phi0, sig0), u = _random_case(rng, 1 if s < 16 else 2, k_max=2.5)
        init = mollify_initial_data(g, 0.25, InitialData(mu0, np.clip(phi0, -1, 1), sig0))
        out.append((g, tg, prm, u, solve_state(g, tg, prm, spec, init, u)))
    return out


def _gradcheck_problem(steps=50):
    g, tg = SpatialGrid(1, 32), TimeGrid(1.0, steps)
    x = g.coordinates[:, 0]
    init = InitialData(0 * x, 0.4 * np.cos(np.pi * x), 0.5 + 0 * x)
    tgt = TargetData(np.tile(-0.3 * np.cos(np.pi * x), (steps + 1, 1)), 0.2 * np.cos(2 * np.pi * x))
    return ControlProblem(g, tg, RAMP, init, Bounds()), CostSpec(1e-2, 2.0, 1.0, 0.0, tgt)


@pytest.fixture(scope="module")
def gradient_reports():
    pb, cost = _gradcheck_problem()
    rng = np.random.default_rng(7)
    u = ControlPair(*rng.uniform(-1, 1, (2, pb.tgrid.steps + 1, pb.grid.size)))
    t0 = time.perf_counter()
    reps = [gradient_check(pb, gam, cost, u, directions=10, seed=j) for j, gam in enumerate((1.0, 0.25, 0.05))]
    return reps, time.perf_counter() - t0


def _sparse_problem(steps=20):
    g, tg = SpatialGrid(1, 32), TimeGrid(1.0, steps)
    x = g.coordinates[:, 0]
    init = InitialData(0 * x, 0.3 * np.cos(np.pi * x), 0.5 + 0 * x)
    ph = np.tile(-0.5 * np.cos(np.pi * x), (steps + 1, 1))
    return ControlProblem(g, tg, RAMP, init, Bounds()), TargetData(ph, ph[-1].copy())


def _sparse_solve(pb, tgt, kappa, u0=None):
    cost = CostSpec(1e-2, 10.0, 1.0, kappa, tgt, "time" if kappa > 0 else "none")
    u0 = u0 if u0 is not None else ControlPair.zeros(pb.grid, pb.tgrid)
    return cost, proximal_gradient_solve(pb, 0.25, cost, u0, tol=1e-8, max_iter=400)


def test_criterion_01_gradient_exactness(gradient_reports, verdict):
    reps, elapsed = gradient_reports
    worst = max(r["max_rel_err"] for r in reps)
    ok = worst <= 1e-6 and elapsed <= 30.0
    verdict(1, ok, f"max rel err {worst:.2e} over gamma 1, 0.25, 0.05; {elapsed:.1f} s")
    assert ok


def test_criterion_02_duality(gradient_reports, verdict):
    reps, _ = gradient_reports
    worst = max(r["max_duality_rel_err"] for r in reps)
    ok = worst <= 1e-8
    verdict(2, ok, f"max duality rel err {worst:.2e}")
    assert ok


def test_criterion_03_obstacle_complementarity(obstacle_suite, verdict):
    bad, contacts = 0, 0
    for g, tg, prm, u, tr in obstacle_suite:
        phi, xi = tr.phi, tr.xi
        inner = np.abs(phi) < 1 - 1e-10
        good = (np.max(np.abs(phi)) <= 1.0 and np.all(xi[inner] == 0.0)
                and np.all(xi[phi == 1.0] >= 0.0) and np.all(xi[phi == -1.0] <= 0.0))
        bad += not good
        contacts += int(np.sum(np.abs(phi) == 1.0))
    ok = bad == 0 and contacts > 0
    verdict(3, ok, f"{len(obstacle_suite) - bad}/{len(obstacle_suite)} solves clean, {contacts} contact nodes")
    assert ok


def test_criterion_04_separation(quench_suite, gradient_reports, verdict):
    margins = [tr.separation_margin() for *_, tr in quench_suite]
    reps, _ = gradient_reports
    margins.append(reps[1]["separation_margin"])
    delta = min(margins)
    ok = delta > 0
    verdict(4, ok, f"delta = {delta:.3e} over {len(margins)} solves at gamma 0.25")
    assert ok


def test_criterion_05_mass_balance(obstacle_suite, quench_suite, verdict):
    worst = max(balance_check(g, tg, prm, tr, u) for g, tg, prm, u, tr in obstacle_suite + quench_suite)
    ok = worst <= 1e-8
    verdict(5, ok, f"max balance defect {worst:.2e} over {len(obstacle_suite) + len(quench_suite)} solves")
    assert ok


def test_criterion_06_deep_quench_convergence(verdict):
    t0 = time.perf_counter()
    g, tg = SpatialGrid(1, 32), TimeGrid(1.0, 50)
    prm = ModelParams(f2_k=1.0, p_shape="ramp")
    x = g.coordinates[:, 0]
    init = InitialData(0 * x, 0.9 * np.cos(np.pi * x), 0 * x)
    u = ControlPair(np.tile(-4.0 * np.cos(np.pi * x), (51, 1)), np.zeros((51, 32)))
    gams = [2.0**-j for j in range(1, 8)]
    trs = [solve_state(g, tg, prm, PotentialSpec.deep_quench(s), init, u) for s in gams]
    ob = solve_state(g, tg, prm, PotentialSpec.obstacle(), init, u)
    diffs = [sup_norm_c0l2(g, a.phi - b.phi) for a, b in zip(trs, trs[1:])]
    tail = diffs[-4:]
    dist = sup_norm_c0l2(g, trs[-1].phi - ob.phi)
    elapsed = time.perf_counter() - t0
    ok = all(b < a for a, b in zip(tail, tail[1:])) and dist <= 1e-2 and elapsed <= 120.0
    verdict(6, ok, f"successive diffs {', '.join(f'{v:.2e}' for v in diffs)}; obstacle distance {dist:.2e}; "
                   f"{elapsed:.1f} s")
    assert ok


@pytest.fixture(scope="module")
def kappa_pre_run():
    pb, tgt = _sparse_problem()
    g, tg = pb.grid, pb.tgrid
    z = ControlPair.zeros(g, tg)
    plain = CostSpec(1e-2, 10.0, 1.0, 0.0, tgt)
    base = solve_state(g, tg, RAMP, PotentialSpec.deep_quench(0.25), pb.init, z)
    d, _ = reduced_gradient(RAMP, base, solve_adjoint(RAMP, plain, base, z), z.stack(), plain)
    top = 1.5 * max(slice_norms_space(g, di).max() for di in d.stack())
    half = tg.steps + 1  # half of the 2 * (steps + 1) slices
    lo, hi = 1e-3, top
    runs = []
    for _ in range(12):
        kap = float(np.sqrt(lo * hi))
        cost, res = _sparse_solve(pb, tgt, kap)
        n_act = sum(active_slices(g, res.u))
        runs.append((kap, n_act, cost, res))
        if abs(n_act - half) <= 2:
            break
        lo, hi = (kap, hi) if n_act > half else (lo, kap)
    return pb, tgt, top, runs


def test_criterion_08_sparsity_equivalence(kappa_pre_run, verdict):
    pb, tgt, top, runs = kappa_pre_run
    kap, n_act, cost, res = runs[-1]
    rep = sparsity_report(pb.grid, res.u, res.gradient, kap)
    half = pb.tgrid.steps + 1
    ok = res.report["converged"] and abs(n_act - half) <= 2 and rep["pass_fraction"] == 1.0
    verdict(8, ok, f"kappa {kap:.4g} after {len(runs)} bisection runs, {n_act}/{2 * half} active, "
                   f"pass fraction {rep['pass_fraction']:.3f}")
    assert ok


def test_criterion_09_support_under_kappa(kappa_pre_run, verdict):
    pb, tgt, top, _ = kappa_pre_run
    kappas = np.geomspace(1e-3, top, 12)
    counts, u = [], None
    for kap in kappas:
        cost, res = _sparse_solve(pb, tgt, float(kap), u)
        counts.append(sum(active_slices(pb.grid, res.u)))
        u = res.u
    pairs = list(zip(counts, counts[1:]))
    frac = sum(b <= a for a, b in pairs) / len(pairs)
    ok = frac >= 0.9 and counts[-1] == 0
    verdict(9, ok, f"active counts {counts}; non-increasing in {frac:.0%} of pairs")
    assert ok


def test_criterion_07_kkt_certificate(kappa_pre_run, verdict):
    pb, tgt, top, runs = kappa_pre_run
    pool = [(pb, c, r) for _, _, c, r in runs if r.report["converged"]]
    for kind, kap in (("none", 0.0), ("space", 0.03), ("spacetime", 0.03)):
        cost = CostSpec(1e-2, 10.0, 1.0, kap, tgt, kind)
        res = proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(pb.grid, pb.tgrid), tol=1e-8)
        if res.report["converged"]:
            pool.append((pb, cost, res))
    worst_res, worst_lam, exact = 0.0, 0.0, True
    for p, cost, res in pool:
        g, tg = p.grid, p.tgrid
        U, L = res.u.stack(), res.subgradient.stack()
        worst_res = max(worst_res, res.report["stationarity_residual"])
        worst_lam = max(worst_lam, subgradient_violation(g, tg, cost.sparsity, U, L))
        if cost.sparsity == "time":
            for i in range(2):
                un = slice_norms_space(g, U[i])
                for k in np.flatnonzero(un > 0):
                    exact &= bool(np.array_equal(L[i, k], U[i, k] / un[k]))
    ok = len(pool) >= 4 and worst_res <= 1e-6 and worst_lam <= 1e-14 and exact
    verdict(7, ok, f"{len(pool)} converged runs, max residual {worst_res:.2e}, max lambda violation {worst_lam:.1e}")
    assert ok


def test_criterion_10_inverse_crime(verdict):
    g, tg = SpatialGrid(1, 32), TimeGrid(1.0, 20)
    prm = ModelParams(alpha=0.1, chi=1.0, p_max=1.0, p_shape="ramp")
    x, t = g.coordinates[:, 0], tg.times
    init = InitialData(0 * x, 0.4 * np.cos(np.pi * x), 0.5 + 0 * x)
    u2_star = 0.5 * np.outer(np.sin(np.pi * t), np.cos(np.pi * x) + 0.5)
    u_star = ControlPair(0 * u2_star, u2_star)
    tr = solve_state(g, tg, prm, PotentialSpec.deep_quench(0.25), init, u_star)
    tgt = TargetData(tr.phi.copy(), tr.phi[-1].copy())
    pb = ControlProblem(g, tg, prm, init, Bounds(-1e-3, 1e-3, -2.0, 2.0))
    cost = CostSpec(1e-6, 1.0, 0.0, 0.0, tgt, "none")
    res = proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(g, tg), tol=1e-8, max_iter=400, method="fista")
    err = norm_q(g, tg, res.u.u2 - u2_star) / norm_q(g, tg, u2_star)
    ok = err < 0.05
    verdict(10, ok, f"relative L2 error {err:.2%} after {res.report['iterations']} iterations "
                    f"({res.report['status']})")
    assert ok


def test_criterion_11_mollifier(verdict):
    gams = [1.0, 0.5, 0.1, 0.01]
    ok, worst_band = True, -np.inf
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = SpatialGrid(1 if seed < 3 else 2, 65 if seed < 3 else 17)
        phi0 = np.clip(rng.uniform(-1.3, 1.3, g.size), -1, 1)
        data = InitialData(np.zeros(g.size), phi0, np.zeros(g.size))
        dists = []
        for gam in gams:
            phi = mollify_initial_data(g, gam, data).phi0
            worst_band = max(worst_band, float(np.max(np.abs(phi))) - (1 - gam / 2))
            ok &= bool(np.max(np.abs(phi)) <= 1 - gam / 2)
            ok &= h1_norm(g, phi) <= h1_norm(g, phi0)
            dists.append(norm(g, phi - phi0))
        ok &= all(b < a for a, b in zip(dists, dists[1:]))
    verdict(11, ok, f"band exact (max of |phi| minus band {worst_band:.2e}), H1 contraction and decreasing distance over 5 fields")
    assert ok


def test_criterion_12_determinism(tmp_path, verdict):
    cases = [("forward", "forward.toml"), ("gradcheck", "gradcheck.toml"), ("optimize", "sparse_time.toml"),
             ("mollify", "mollify.toml")]
    same = 0
    for cmd, cfg in cases:
        outs = [tmp_path / f"{cmd}_{j}" for j in range(2)]
        for out in outs:
            assert run([cmd, "--config", str(CONFIGS / cfg), "--out", str(out)]) == 0
        files = sorted(p.name for p in outs[0].iterdir())
        same += all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    ok = same == len(cases)
    verdict(12, ok, f"{same}/{len(cases)} commands byte-identical across repeat runs")
    assert ok
