"""Property suites behind ``caql verify``.

Every suite checks a solver or bound against something computed another way
(dense grids, sampling, finite differences) and counts violations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .agent import AgentConfig, MaxQOracle, compute_targets
from .bounds import BoxDomain, interval_propagate, layer_bounds
from .cluster import dynamic_radius
from .dualfilter import dual_bound_batch
from .mip import solve_maxq_mip
from .net import ReluNet, forward_batch, grad_input, grad_params, init_net, preactivations


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: int
    total: int
    worst: float  # largest violation measure seen (suite specific)

    @property
    def ok(self) -> bool:
        return self.passed == self.total


def random_net(rng: np.random.Generator, state_dim=3, action_dim=1, widths=(32, 16)) -> ReluNet:
    """Random net with weights scaled up so that many neurons are unstable over the box."""
    net = init_net(state_dim, action_dim, widths, rng=rng)
    return net.with_params([1.5 * p for p in net.params()])


def grid_max(net: ReluNet, x, lo: float, hi: float, step: float = 1e-4) -> float:
    """Max over a dense 1-D action grid, refined by golden-section search around the best point."""
    grid = np.clip(np.arange(lo, hi + step / 2, step), lo, hi)
    Z = np.column_stack([np.repeat(np.atleast_2d(x), grid.size, axis=0), grid])
    vals = forward_batch(net, Z)[:, 0]
    i = int(np.argmax(vals))
    best = float(vals[i])

    def q(a):
        return float(forward_batch(net, np.append(x, a)[None])[0, 0])

    g = (np.sqrt(5.0) - 1.0) / 2.0
    for left, right in ((grid[max(i - 1, 0)], grid[i]), (grid[i], grid[min(i + 1, grid.size - 1)])):
        for _ in range(50):
            m1, m2 = right - g * (right - left), left + g * (right - left)
            if q(m1) < q(m2):
                left = m1
            else:
                right = m2
        best = max(best, q(0.5 * (left + right)))
    return best


def suite_mip_oracle(count: int, seed: int, tol: float = 1e-3) -> SuiteResult:
    rng = np.random.default_rng(seed)
    box = BoxDomain([-2.0], [2.0])
    passed, worst = 0, 0.0
    for _ in range(count):
        net = random_net(rng)
        x = rng.normal(size=3)
        err = abs(solve_maxq_mip(net, x, box, gap_tol=1e-4).value - grid_max(net, x, -2.0, 2.0))
        passed += err <= tol
        worst = max(worst, err)
    return SuiteResult("mip-oracle", passed, count, worst)


def suite_dual_soundness(count: int, seed: int) -> SuiteResult:
    rng = np.random.default_rng(seed)
    passed, worst = 0, 0.0
    for k in range(count):
        dim = 1 + k % 2
        net = random_net(rng, action_dim=dim)
        box = BoxDomain.symmetric(2.0 if dim == 1 else 1.0, dim)
        x = rng.normal(size=3)
        q_tilde = float(dual_bound_batch(net, x[None], box)[0])
        sol = solve_maxq_mip(net, x, box, gap_tol=1e-6)
        excess = sol.value - q_tilde
        passed += excess <= 1e-9
        worst = max(worst, excess)
    return SuiteResult("dual-soundness", passed, count, worst)


def suite_bounds(count: int, seed: int, samples: int = 10_000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    passed, worst = 0, 0.0
    for k in range(count):
        dim = 1 + k % 2
        net = random_net(rng, action_dim=dim)
        box = BoxDomain.symmetric(2.0, dim)
        x = rng.normal(size=3)
        A = box.sample(rng, samples)
        ys = preactivations(net, np.column_stack([np.repeat(x[None], samples, axis=0), A]))
        ok = True
        for bounds in (interval_propagate(net, x, box), layer_bounds(net, x, box, tighten=True)):
            for y, lo, hi in zip(ys, bounds.lower, bounds.upper):
                v = max(float(np.max(lo - y)), float(np.max(y - hi)))
                worst = max(worst, v)
                ok &= v <= 1e-9
        passed += ok
    return SuiteResult("bounds-containment", passed, count, worst)


def _nonkink(net: ReluNet, rng, margin=1e-3):
    while True:
        x, a = rng.normal(size=net.state_dim), rng.uniform(-2, 2, size=net.action_dim)
        if all(np.min(np.abs(y)) > margin for y in preactivations(net, np.append(x, a)[None])):
            return x, a


def _rel(g, f):
    g, f = np.ravel(g), np.ravel(f)
    return float(np.max(np.abs(g - f)) / max(np.max(np.abs(g)), np.max(np.abs(f)), 1e-8))


def _f(net: ReluNet, z: np.ndarray) -> float:
    return float(forward_batch(net, z[None])[0, 0])


def suite_grad(count: int, seed: int, tol: float = 1e-5, h: float = 1e-6) -> SuiteResult:
    rng = np.random.default_rng(seed)
    passed, worst = 0, 0.0
    for _ in range(count):
        net = init_net(3, 1, (8, 6), rng=rng)
        x, a = _nonkink(net, rng)
        z = np.append(x, a)
        gx, ga = grad_input(net, x, a)
        fd_in = np.array([(_f(net, z + h * e) - _f(net, z - h * e)) / (2 * h) for e in np.eye(z.size)])
        err = _rel(np.append(gx, ga), fd_in)
        analytic = grad_params(net, z[None], np.ones(1))
        params = net.params()
        for k, p in enumerate(params):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                hi = [q.copy() for q in params]
                lo = [q.copy() for q in params]
                hi[k][idx] += h
                lo[k][idx] -= h
                fd[idx] = (_f(net.with_params(hi), z) - _f(net.with_params(lo), z)) / (2 * h)
            err = max(err, _rel(analytic[k], fd))
        passed += err < tol
        worst = max(worst, err)
    return SuiteResult("gradient-check", passed, count, worst)


def suite_cluster(count: int, seed: int) -> SuiteResult:
    rng = np.random.default_rng(seed)
    box = BoxDomain([-2.0], [2.0])
    passed, worst = 0, 0.0
    for k in range(count):
        theta, target = random_net(rng), random_net(rng)
        policy = init_net(3, 0, (8,), rng=rng)
        X, X2 = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
        X2[8:] = X2[rng.integers(0, 8, size=8)]
        A, R = box.sample(rng, 16), rng.normal(size=16)
        solver = ("ga", "cem", "mip")[k % 3]
        plain = AgentConfig(solver=solver)
        clust = AgentConfig(solver=solver, cluster_radius=0.0)
        t0 = compute_targets(X, A, R, X2, theta, target, policy, plain, box, MaxQOracle(plain, box), k)
        t1 = compute_targets(X, A, R, X2, theta, target, policy, clust, box, MaxQOracle(clust, box), k)
        k3, k4 = rng.uniform(0.1, 2.0), rng.uniform(0.0, 0.999)
        radius_err = max(abs(dynamic_radius(k3, k4, t) - k3 * k4 ** t) for t in range(200))
        diff = float(np.max(np.abs(t0.targets - t1.targets)))
        passed += diff == 0.0 and radius_err <= 1e-12
        worst = max(worst, diff, radius_err)
    return SuiteResult("cluster-exactness", passed, count, worst)


SUITES: dict[str, Callable[[int, int], SuiteResult]] = {
    "mip-oracle": suite_mip_oracle,
    "dual-soundness": suite_dual_soundness,
    "bounds": suite_bounds,
    "grad": suite_grad,
    "cluster": suite_cluster,
}
ALIASES = {"bounds-containment": "bounds", "gradient-check": "grad", "cluster-exactness": "cluster"}
