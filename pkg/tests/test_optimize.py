import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from dqctrl.adjoint import TargetData, solve_adjoint
from dqctrl.controls import Bounds, ControlPair
from dqctrl.forward import solve_state
from dqctrl.grid import SpatialGrid, TimeGrid, inner_product_q, slice_norms_space
from dqctrl.model import InitialData, ModelParams, PotentialSpec
from dqctrl.optimize import (
    ControlProblem,
    CostSpec,
    deep_quench_continuation,
    eval_cost,
    gradient_check,
    prox_composite,
    prox_group_box,
    prox_sparsity,
    proximal_gradient_solve,
    recover_subgradient,
    reduced_gradient,
    sparsity_report,
    stationarity_residual,
    subgradient_violation,
)

PRM = ModelParams(p_shape="ramp")


def _problem(n=16, steps=10, bounds=None):
    g, tg = SpatialGrid(1, n), TimeGrid(1.0, steps)
    x = g.coordinates[:, 0]
    init = InitialData(0 * x, 0.3 * np.cos(np.pi * x), 0.5 + 0 * x)
    ph = np.tile(-0.5 * np.cos(np.pi * x), (steps + 1, 1))
    tgt = TargetData(ph, ph[-1].copy())
    return ControlProblem(g, tg, PRM, init, bounds or Bounds()), tgt


def _q_norm(pb, a):
    g, tg = pb.grid, pb.tgrid
    return np.sqrt(sum(inner_product_q(g, tg, ai, ai) for ai in a))


# -- cost ---------------------------------------------------------------------


def test_cost_of_zero_fields_is_zero():
    pb, _ = _problem()
    g, tg = pb.grid, pb.tgrid
    zero_init = InitialData.zeros(g)
    traj = solve_state(g, tg, ModelParams(p_max=0.0), PotentialSpec.deep_quench(0.5), zero_init,
                       ControlPair.zeros(g, tg))
    cost = CostSpec(1.0, 1.0, 1.0, 1.0, TargetData.zeros(g, tg), "time")
    assert eval_cost(g, tg, cost, traj, ControlPair.zeros(g, tg)) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("c", [0.7, -0.4])
def test_cost_of_constant_control(c):
    g, tg = SpatialGrid(1, 11), TimeGrid(1.0, 8)
    traj = solve_state(g, tg, PRM, PotentialSpec.deep_quench(0.5), InitialData.zeros(g), ControlPair.zeros(g, tg))
    u = np.full((2, 9, 11), 0.0)
    u[0] = c
    b0, kap = 0.3, 0.2
    J, J1, gv = eval_cost(g, tg, CostSpec(b0, 0.0, 0.0, kap, TargetData.zeros(g, tg), "spacetime"), traj, u)
    assert J == pytest.approx(b0 * c * c / 2 + kap * abs(c), rel=1e-13)
    _, _, gt = eval_cost(g, tg, CostSpec(b0, 0.0, 0.0, kap, TargetData.zeros(g, tg), "time"), traj, u)
    assert gt == pytest.approx(abs(c), rel=1e-13)


def test_cost_validation_messages():
    tgt = TargetData.zeros(SpatialGrid(1, 4), TimeGrid(1.0, 2))
    with pytest.raises(ValueError, match=r"\(C4\)"):
        CostSpec(1.0, 1.0, 0.0, 0.0, tgt, "time")
    with pytest.raises(ValueError, match=r"\(C1\) b0"):
        CostSpec(0.0, 1.0, 0.0, 0.0, tgt)
    with pytest.raises(ValueError, match=r"\(C3\)"):
        CostSpec(1.0, 1.0, 0.0, 1.0, tgt, "bogus")


# -- prox ---------------------------------------------------------------------


def test_group_prox_examples():
    g, tg = SpatialGrid(1, 9), TimeGrid(1.0, 3)
    v = np.ones((2, 4, 9))
    w = 0.8
    half = prox_sparsity(g, tg, "time", w, v * (w / 2))
    assert np.all(half == 0.0)
    out = prox_sparsity(g, tg, "time", w, v * 2 * w)
    assert np.allclose(out, v * w, rtol=1e-14, atol=0)


def test_scalar_soft_threshold_examples():
    g, tg = SpatialGrid(1, 2), TimeGrid(1.0, 1)
    v = np.array([3.0, -0.5, -3.0, 0.5]).reshape(2, 2, 1).repeat(2, axis=2)
    out = prox_sparsity(g, tg, "spacetime", 1.0, v)
    assert np.array_equal(out[0, 0], [2.0, 2.0])
    assert np.array_equal(out[0, 1], [0.0, 0.0])
    assert np.array_equal(out[1, 0], [-2.0, -2.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["time", "space", "spacetime"]), st.floats(0.01, 2.0))
def test_prox_firmly_nonexpansive(seed, kind, w):
    g, tg = SpatialGrid(1, 7), TimeGrid(1.0, 5)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 6, 7)) * rng.uniform(0.1, 3)
    pa, pb_ = prox_sparsity(g, tg, kind, w, a), prox_sparsity(g, tg, kind, w, b)
    diff = pa - pb_

    def ip(x, y):
        return sum(float(np.sum(tg.weights[:, None] * g.weights[None, :] * xi * yi)) for xi, yi in zip(x, y))

    assert ip(diff, diff) <= ip(diff, a - b) * (1 + 1e-12) + 1e-15
    bx = Bounds(-0.5, 0.7, -1.0, 0.3)
    ca, cb = prox_composite(g, tg, kind, w, a, bx), prox_composite(g, tg, kind, w, b, bx)
    assert ip(ca - cb, ca - cb) <= ip(a - b, a - b) * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.5))
def test_group_box_prox_is_exact_minimizer(seed, t):
    rng = np.random.default_rng(seed)
    wts = rng.uniform(0.1, 1.0, 5)
    v = rng.standard_normal(5) * 2
    lo, hi = -rng.uniform(0.1, 1.5), rng.uniform(0.1, 1.5)

    def obj(u):
        r = u - v
        return 0.5 * wts @ (r * r) + t * np.sqrt(wts @ (u * u))

    got = prox_group_box(v, wts, t, lo, hi)
    assert np.all(got >= lo) and np.all(got <= hi)
    best = obj(got)
    for start in (np.clip(v, lo, hi), np.zeros(5) + 1e-3, rng.uniform(lo, hi, 5)):
        ref = minimize(obj, start, bounds=[(lo, hi)] * 5, method="L-BFGS-B", options={"ftol": 1e-14, "gtol": 1e-12})
        assert best <= ref.fun + 1e-9
    assert best <= obj(np.zeros(5)) + 1e-15


# -- certificates -------------------------------------------------------------


def test_stationarity_residual_examples():
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    rng = np.random.default_rng(0)
    d = rng.standard_normal((2, tg.steps + 1, g.size))
    cost = CostSpec(0.5, 1.0, 0.0, 0.0, tgt)
    u = np.clip(-d / 0.5, -1, 1)
    lam = np.zeros_like(u)
    assert stationarity_residual(cost, pb.bounds, u, d, lam) == 0.0
    assert stationarity_residual(cost, pb.bounds, np.zeros_like(u), d, lam) == np.max(np.abs(np.clip(-d / 0.5, -1, 1)))
    scost = CostSpec(0.5, 1.0, 0.0, 0.3, tgt, "time")
    lam = recover_subgradient(g, tg, "time", u, d, 0.3).stack()
    built = np.clip(-(d + 0.3 * lam) / 0.5, -1, 1)
    assert stationarity_residual(scost, pb.bounds, built, d, lam) == 0.0


def test_sparsity_report_examples():
    g = SpatialGrid(1, 8)
    z = np.zeros((2, 5, 8))
    rep = sparsity_report(g, z, z, 0.1)
    assert rep["all_pass"] and rep["pass_fraction"] == 1.0
    d = z.copy()
    d[0, 2] = 0.2
    rep = sparsity_report(g, z, d, 0.1)
    assert not rep["all_pass"]
    bad = [r for r in rep["rows"] if not r["pass"]]
    assert [(r["component"], r["k"]) for r in bad] == [(1, 2)]


# -- solver -------------------------------------------------------------------


def test_pure_ridge_converges_to_zero():
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    rng = np.random.default_rng(0)
    u0 = ControlPair(*rng.uniform(-1, 1, (2, tg.steps + 1, g.size)))
    cost = CostSpec(0.1, 0.0, 0.0, 0.0, tgt)
    res = proximal_gradient_solve(pb, 0.5, cost, u0)
    assert res.report["converged"]
    assert np.max(np.abs(res.u.stack())) <= 1e-8
    anchored = CostSpec(0.1, 0.0, 0.0, 0.0, tgt, adapted_anchor=u0)
    res = proximal_gradient_solve(pb, 0.5, anchored, ControlPair.zeros(g, tg))
    assert np.max(np.abs(res.u.stack() - u0.stack() / 1.1)) <= 1e-8


@pytest.mark.parametrize("kind", ["none", "time", "space", "spacetime"])
def test_converged_solution_certificates(kind):
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    cost = CostSpec(1e-2, 10.0, 1.0, 0.0 if kind == "none" else 0.03, tgt, kind)
    res = proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(g, tg))
    rep = res.report
    assert rep["converged"] and rep["stationarity_residual"] <= 1e-8
    U = res.u.stack()
    b = pb.bounds
    assert np.all(U[0] >= b.u1_min) and np.all(U[0] <= b.u1_max)
    assert np.all(U[1] >= b.u2_min) and np.all(U[1] <= b.u2_max)
    obj = rep["history"]["objective"]
    assert all(nxt <= cur + 1e-12 * max(1.0, abs(cur)) for cur, nxt in zip(obj, obj[1:]))
    lam = res.subgradient.stack()
    assert subgradient_violation(g, tg, kind, U, lam) <= 1e-14
    if kind == "time":
        for i in range(2):
            un = slice_norms_space(g, U[i])
            for k in np.flatnonzero(un > 0):
                assert np.array_equal(lam[i, k], U[i, k] / un[k])
        srep = sparsity_report(g, U, res.gradient.stack(), cost.kappa)
        assert srep["all_pass"]


def test_fista_matches_bb_at_convergence():
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    cost = CostSpec(1e-1, 10.0, 1.0, 0.05, tgt, "time")
    a = proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(g, tg), tol=1e-9)
    b = proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(g, tg), tol=1e-9, method="fista", max_iter=2000)
    assert a.report["converged"] and b.report["converged"]
    obj = b.report["history"]["objective"]
    assert all(nxt <= cur + 1e-12 * max(1.0, abs(cur)) for cur, nxt in zip(obj, obj[1:]))
    assert np.max(np.abs(a.u.stack() - b.u.stack())) < 1e-6
    with pytest.raises(ValueError):
        proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(g, tg), method="newton")


def test_large_kappa_switches_controls_off():
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    z = ControlPair.zeros(g, tg)
    base = solve_state(g, tg, PRM, PotentialSpec.deep_quench(0.25), pb.init, z)
    plain = CostSpec(1e-2, 10.0, 1.0, 0.0, tgt)
    d, _ = reduced_gradient(PRM, base, solve_adjoint(PRM, plain, base, z), z.stack(), plain)
    kap = 1.5 * max(slice_norms_space(g, di).max() for di in d.stack())
    res = proximal_gradient_solve(pb, 0.25, CostSpec(1e-2, 10.0, 1.0, kap, tgt, "time"), z)
    assert res.report["converged"]
    assert np.all(res.u.u1 == 0.0) and np.all(res.u.u2 == 0.0)
    assert res.report["active_slices"] == [0, 0]


def test_scaling_invariance_of_stationary_points():
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    cost = CostSpec(1e-2, 10.0, 1.0, 0.03, tgt, "time")
    res = proximal_gradient_solve(pb, 0.25, cost, ControlPair.zeros(g, tg), tol=1e-10)
    c = 7.0
    scaled = CostSpec(c * 1e-2, c * 10.0, c * 1.0, c * 0.03, tgt, "time")
    adj = solve_adjoint(PRM, scaled, res.state, res.u)
    d, _ = reduced_gradient(PRM, res.state, adj, res.u.stack(), scaled)
    U = res.u.stack()
    lam = recover_subgradient(g, tg, "time", U, d.stack(), scaled.kappa)
    assert np.allclose(lam.stack(), res.subgradient.stack(), rtol=0, atol=1e-10)
    assert stationarity_residual(scaled, pb.bounds, U, d.stack(), lam.stack()) <= 1e-9


def test_sparsity_needs_zero_inside_box():
    pb, tgt = _problem(bounds=Bounds(0.1, 1.0, -1.0, 1.0))
    cost = CostSpec(1e-2, 1.0, 0.0, 0.1, tgt, "time")
    with pytest.raises(ValueError):
        proximal_gradient_solve(pb, 0.25, cost, ControlPair(np.full((11, 16), 0.5), np.zeros((11, 16))))


def test_gradient_check_small():
    pb, tgt = _problem(n=12, steps=8)
    g, tg = pb.grid, pb.tgrid
    rng = np.random.default_rng(1)
    u = ControlPair(*rng.uniform(-1, 1, (2, tg.steps + 1, g.size)))
    rep = gradient_check(pb, 0.25, CostSpec(1e-2, 2.0, 1.0, 0.0, tgt), u, directions=4)
    assert rep["max_rel_err"] <= 1e-6
    assert rep["max_duality_rel_err"] <= 1e-8


# -- continuation ---------------------------------------------------------------


def test_single_stage_continuation_equals_solve():
    pb, tgt = _problem()
    g, tg = pb.grid, pb.tgrid
    cost = CostSpec(1e-1, 10.0, 1.0, 0.03, tgt, "time")
    one = deep_quench_continuation(pb, [0.5], cost, ControlPair.zeros(g, tg))
    ref = proximal_gradient_solve(pb, 0.5, cost, ControlPair.zeros(g, tg))
    assert np.array_equal(one.u.stack(), ref.u.stack())
    assert len(one.records) == 1


def test_continuation_rejects_bad_schedule():
    pb, tgt = _problem()
    cost = CostSpec(1e-1, 1.0, 0.0, 0.0, tgt)
    for bad in ([], [0.5, 0.5], [0.25, 0.5], [1.5, 0.5]):
        with pytest.raises(ValueError):
            deep_quench_continuation(pb, bad, cost, ControlPair.zeros(pb.grid, pb.tgrid))


def test_continuation_smoke_tail_and_limit():
    pb, tgt = _problem(n=32, steps=20)
    g, tg = pb.grid, pb.tgrid
    cost = CostSpec(1.0, 10.0, 1.0, 0.03, tgt, "time")
    res = deep_quench_continuation(pb, [2.0**-j for j in range(7)], cost, ControlPair.zeros(g, tg), stop_rel=0.0)
    changes = [r["u_change"] for r in res.records[1:]]
    tail = changes[-4:]
    assert all(b < a for a, b in zip(tail, tail[1:])), changes
    assert all(r["converged"] for r in res.records)
    assert all(r["separation_margin"] > 0 for r in res.records)
    assert np.max(np.abs(res.obstacle_state.phi)) <= 1.0
