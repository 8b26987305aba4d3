"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (7, 8, 10) and the latency ordering (9) take minutes;
everything else runs in well under a minute per criterion.
"""
import time

import numpy as np
import pytest

from caql import net as N
from caql.agent import AgentConfig, MaxQOracle, compute_targets, train
from caql.approx import GaConfig, solve_maxq_ga
from caql.bounds import BoxDomain, interval_propagate, layer_bounds
from caql.cli import bench_maxq, sample_states
from caql.cluster import dynamic_radius
from caql.dualfilter import dual_bound_batch, filter_batch
from caql.env import Pendulum
from caql.mip import solve_maxq_mip
from tests.oracles import (chain_oracle, fd_input_grad, fd_param_grad, grid_maxq,
                           random_nonkink_point, rel_err)

BOX1 = BoxDomain([-2.0], [2.0])
BOX2 = BoxDomain([-1.0, -1.0], [1.0, 1.0])


def _instances(action_dim, count, seed):
    """Random 32x16 nets (weights scaled 1-3x so many neurons straddle zero) and states."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        net = N.init_net(3, action_dim, (32, 16), rng=rng)
        net = net.with_params([(1.0 + k % 3) * p for p in net.params()])
        out.append((net, rng.normal(size=3)))
    return out


INST1 = _instances(1, 100, 2024)
INST2 = _instances(2, 100, 2025)
_mip_values: dict[tuple[int, int], float] = {}


def _mip_value(dim, k):
    if (dim, k) not in _mip_values:
        net, x = (INST1 if dim == 1 else INST2)[k]
        _mip_values[(dim, k)] = solve_maxq_mip(net, x, BOX1 if dim == 1 else BOX2, gap_tol=1e-4).value
    return _mip_values[(dim, k)]


def test_c1_mip_matches_dense_grid(acceptance_report):
    t0 = time.time()
    errs = []
    for k, (net, x) in enumerate(INST1):
        v_grid, a_grid = grid_maxq(net, x, -2.0, 2.0, step=1e-4)
        polish = solve_maxq_ga(net, x, BOX1, GaConfig(step_size=1e-3, max_iters=500, tolerance=1e-14),
                               seed_action=a_grid)
        oracle = max(v_grid, chain_oracle(net, x, polish.action))
        errs.append(abs(_mip_value(1, k) - oracle))
    worst = max(errs)
    ok = worst <= 1e-3
    acceptance_report(1, ok, f"MIP vs grid+polish on 100 nets: max |diff| {worst:.2e} "
                             f"(tol 1e-3), {time.time() - t0:.0f}s")
    assert ok


def test_c2_dual_bound_dominates_mip(acceptance_report):
    violations, margins = 0, []
    for dim, inst in ((1, INST1), (2, INST2)):
        box = BOX1 if dim == 1 else BOX2
        for k, (net, x) in enumerate(inst):
            q_tilde = float(dual_bound_batch(net, x[None], box)[0])
            margin = q_tilde - _mip_value(dim, k)
            margins.append(margin)
            violations += margin < 0.0
    ok = violations == 0
    acceptance_report(2, ok, f"q_tilde >= MIP on 200 instances: {violations} violations, "
                             f"min margin {min(margins):.3g}")
    assert ok


def test_c3_bounds_contain_sampled_preactivations(acceptance_report):
    rng = np.random.default_rng(7)
    violations, checked = 0, 0
    for k in range(50):
        dim = 1 + k % 2
        net, x = (INST1 if dim == 1 else INST2)[k]
        box = BOX1 if dim == 1 else BOX2
        A = box.sample(rng, 10_000)
        ys = N.preactivations(net, np.column_stack([np.repeat(x[None], len(A), axis=0), A]))
        for bounds in (interval_propagate(net, x, box), layer_bounds(net, x, box, tighten=True)):
            for y, lo, hi in zip(ys, bounds.lower, bounds.upper):
                violations += int(np.sum((y < lo) | (y > hi)))
                checked += y.size
    ok = violations == 0
    acceptance_report(3, ok, f"interval + dual-tightened bounds, 50 instances x 1e4 actions: "
                             f"{violations} of {checked} values outside")
    assert ok


def test_c4_gradients_match_finite_differences(acceptance_report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in range(50):
        net = N.init_net(3, 1 + k % 2, (32, 16), rng=rng)
        x, a = random_nonkink_point(net, rng)
        gx, ga = N.grad_input(net, x, a)
        fx, fa = fd_input_grad(net, x, a, h=1e-6)
        worst = max(worst, rel_err(np.append(gx, ga), np.append(fx, fa)))
        z = np.append(x, a)[None]
        analytic = N.grad_params(net, z, np.ones(1))
        numeric = fd_param_grad(net, lambda n: chain_oracle(n, x, a), h=1e-6)
        worst = max(worst, max(rel_err(g, f) for g, f in zip(analytic, numeric)))
    ok = worst < 1e-5
    acceptance_report(4, ok, f"input + parameter gradients on 50 nets: max rel err {worst:.2e} (tol 1e-5)")
    assert ok


def test_c5_filter_certificate(acceptance_report):
    rng = np.random.default_rng(13)
    gamma = 0.9
    fired = hinge_bad = l2_bad = 0
    for k in range(20):
        theta = N.init_net(3, 1, (32, 16), rng=rng)
        target = theta.with_params([p + 0.05 * rng.normal(size=p.shape) for p in theta.params()])
        X, X2 = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
        A = BOX1.sample(rng, 16)
        q = N.q_values(theta, X, A)
        q_tilde = dual_bound_batch(target, X2, BOX1)
        # rewards straddle the certificate threshold (Q - r)/gamma = q_tilde
        R = q - gamma * q_tilde + rng.uniform(-1.0, 1.0, size=16)
        fr = filter_batch(X, A, R, X2, theta, target, gamma, BOX1)
        for i in np.flatnonzero(fr.resolved):
            fired += 1
            q_star = solve_maxq_mip(target, X2[i], BOX1, gap_tol=1e-6).value
            hinge_bad += max(0.0, R[i] + gamma * q_star - q[i]) != 0.0
            l2_bad += (R[i] + gamma * fr.q_tilde[i] - q[i]) ** 2 > (R[i] + gamma * q_star - q[i]) ** 2
    ok = fired > 0 and hinge_bad == 0 and l2_bad == 0
    acceptance_report(5, ok, f"{fired} certified samples over 20 nets: {hinge_bad} nonzero hinge "
                             f"penalties, {l2_bad} l2 inequality violations")
    assert ok


def test_c6_zero_radius_clustering_is_exact(acceptance_report):
    rng = np.random.default_rng(17)
    mismatches, runs = 0, 0
    for k in range(12):
        theta, target = N.init_net(3, 1, (32, 16), rng=rng), N.init_net(3, 1, (32, 16), rng=rng)
        policy = N.init_net(3, 0, (32, 16), rng=rng)
        X, X2 = rng.normal(size=(32, 3)), rng.normal(size=(32, 3))
        X2[16:] = X2[rng.integers(0, 16, size=16)]
        A, R = BOX1.sample(rng, 32), rng.normal(size=32)
        for solver in ("mip", "ga", "cem"):
            plain = AgentConfig(solver=solver, dual_filter=k % 2 == 1)
            clust = AgentConfig(solver=solver, dual_filter=k % 2 == 1, cluster_radius=0.0)
            t0 = compute_targets(X, A, R, X2, theta, target, policy, plain, BOX1, MaxQOracle(plain, BOX1), k)
            t1 = compute_targets(X, A, R, X2, theta, target, policy, clust, BOX1, MaxQOracle(clust, BOX1), k)
            mismatches += int(np.sum(t0.targets != t1.targets))
            runs += 1
    radius_err = 0.0
    for k3, k4 in ((1.0, 0.99), (0.5, 0.9), (2.0, 0.0), (0.3, 0.9995)):
        for t in range(2000):
            radius_err = max(radius_err, abs(dynamic_radius(k3, k4, t) - k3 * k4 ** t))
    ok = mismatches == 0 and radius_err <= 1e-12
    acceptance_report(6, ok, f"b=0 targets over {runs} batches: {mismatches} mismatches; "
                             f"radius schedule max err {radius_err:.1e}")
    assert ok


# ------------------------------------------------------------------ training

TRAINED: dict[str, object] = {}


def _pendulum(seed):
    return Pendulum(2.0, seed=seed)


@pytest.mark.slow
def test_c7_pendulum_ga_training(acceptance_report):
    t0 = time.time()
    best, log = -np.inf, []
    for seed in (0, 1, 2):
        res = train(AgentConfig(solver="ga"), _pendulum, seed, 50_000, eval_interval=1000,
                    eval_episodes=10, stop=lambda recs: recs[-1]["mean_return"] >= -350.0)
        top = max(res.records, key=lambda r: r["mean_return"])
        log.append(f"seed {seed}: {top['mean_return']:.1f} at step {top['step']}")
        if top["mean_return"] > best:
            best = top["mean_return"]
            TRAINED["theta"], TRAINED["policy"] = res.theta, res.policy
        if best >= -350.0:
            break  # best-of-3 is already decided
    ok = best >= -350.0
    acceptance_report(7, ok, f"CAQL-GA best return {best:.1f} (need >= -350); {'; '.join(log)}; "
                             f"{time.time() - t0:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def mip_run():
    k1, k2 = 1.0, 0.9995
    cfg = AgentConfig(solver="mip", dtol=(k1, k2))
    t0 = time.time()
    first = {}

    def stop(recs):
        first.setdefault("v", recs[0]["mean_return"])
        return recs[-1]["mean_return"] >= first["v"] + 200.0

    res = train(cfg, _pendulum, 0, 10_000, eval_interval=250, eval_episodes=10, stop=stop)
    return res, (k1, k2), time.time() - t0


@pytest.mark.slow
def test_c8_pendulum_mip_dynamic_tolerance(acceptance_report, mip_run):
    res, _, secs = mip_run
    recs = res.records
    start = recs[0]["mean_return"]
    top = max(recs, key=lambda r: r["mean_return"])
    gain = top["mean_return"] - start
    ok = gain >= 200.0 and res.steps <= 10_000
    med = np.median([r["maxq_elapsed_median_ms"] for r in recs[1:]])
    acceptance_report(8, ok, f"CAQL-MIP+DTol: {start:.1f} -> {top['mean_return']:.1f} at step {top['step']} "
                             f"(gain {gain:.1f}, need 200) in {res.steps} steps, {secs:.0f}s, "
                             f"median solve {med:.2f} ms")
    assert ok


@pytest.mark.slow
def test_c9_solver_latency_ordering(acceptance_report):
    if "theta" not in TRAINED:
        res = train(AgentConfig(solver="ga"), _pendulum, 0, 10_000, eval_interval=10_000, eval_episodes=1)
        TRAINED["theta"], TRAINED["policy"] = res.theta, res.policy
    theta, policy = TRAINED["theta"], TRAINED["policy"]
    X = sample_states("pendulum", 2.0, 200, 5, policy)
    rep = bench_maxq(theta, X, BOX1, ["mip", "cem", "ga"], policy)
    med = {k: v["median_ms"] for k, v in rep.items()}
    ok = med["mip"] > med["cem"] > med["ga"] and all(
        rep[s]["dominance_violations"] == 0 for s in ("ga", "cem"))
    acceptance_report(9, ok, "median ms " + ", ".join(f"{k} {v:.3f}" for k, v in med.items())
                      + f"; mean gap vs MIP: ga {rep['ga']['mean_gap']:.2e}, cem {rep['cem']['mean_gap']:.2e}")
    assert ok


@pytest.mark.slow
def test_c10_logged_tolerance_respects_schedule(acceptance_report, mip_run):
    res, (k1, k2), _ = mip_run
    logged = [r for r in res.records if r["step"] > 0]
    bad = [r["step"] for r in logged
           if not r["tolerance"] <= k1 * k2 ** r["tolerance_step"] * r["max_residual"]]
    ok = bool(logged) and not bad
    acceptance_report(10, ok, f"{len(logged)} logged steps, {len(bad)} with tau > k1*k2^t*max_residual")
    assert ok
