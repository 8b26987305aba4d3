"""Independent reference computations used by the test suite.

Nothing here calls into the solver code paths it checks: forward passes use
a plain ``@`` matrix chain, gradients come from central differences, LP
optima from vertex enumeration and max-Q values from dense grids.
"""
import itertools

import numpy as np


def chain_oracle(net, x, a):
    z = np.concatenate([np.atleast_1d(x), np.atleast_1d(a)]).astype(float)
    for W, b in zip(net.weights, net.biases):
        z = np.maximum(W @ z + b, 0.0)
    return float((net.out @ z)[0])


def chain_preacts(net, x, a):
    z = np.concatenate([np.atleast_1d(x), np.atleast_1d(a)]).astype(float)
    ys = []
    for W, b in zip(net.weights, net.biases):
        y = W @ z + b
        ys.append(y)
        z = np.maximum(y, 0.0)
    return ys


def rel_err(g, f, floor=1e-8):
    g, f = np.ravel(g), np.ravel(f)
    return float(np.max(np.abs(g - f)) / max(np.max(np.abs(g)), np.max(np.abs(f)), floor))


def _pattern(net, z):
    return np.concatenate([y > 0 for y in chain_preacts(net, z[:net.state_dim], z[net.state_dim:])])


def random_nonkink_point(net, rng, h=1e-5, margin=1e-3):
    """Sample (x, a) whose pre-activations are all at least ``margin`` from zero."""
    for _ in range(1000):
        x = rng.normal(size=net.state_dim)
        a = rng.uniform(-1.5, 1.5, size=net.action_dim)
        ys = chain_preacts(net, x, a)
        if min(np.min(np.abs(y)) for y in ys) > margin:
            return x, a
    raise RuntimeError("no kink-free point found")


def fd_input_grad(net, x, a, h=1e-5):
    z = np.concatenate([x, a])
    g = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (chain_oracle(net, zp[:net.state_dim], zp[net.state_dim:])
                - chain_oracle(net, zm[:net.state_dim], zm[net.state_dim:])) / (2 * h)
    return g[:net.state_dim], g[net.state_dim:]


def fd_param_grad(net, loss, h=1e-5):
    params = [p.copy() for p in net.params()]
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss(net.with_params(params))
            p[idx] = old - h
            lm = loss(net.with_params(params))
            p[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def grid_maxq(net, x, lo, hi, step=1e-4):
    """Dense grid over a 1-D action interval followed by projected-gradient polish."""
    grid = np.arange(lo, hi + step / 2, step)
    grid = np.clip(grid, lo, hi)
    X = np.repeat(np.atleast_2d(x), grid.size, axis=0)
    Z = np.concatenate([X, grid[:, None]], axis=1)
    h = Z.T
    for W, b in zip(net.weights, net.biases):
        h = np.maximum(W @ h + b[:, None], 0.0)
    vals = (net.out @ h)[0]
    i = int(np.argmax(vals))
    best_a, best_v = grid[i], vals[i]
    # exact polish: maximize on each linear piece adjoining the best grid point
    for nb in (max(i - 1, 0), min(i + 1, grid.size - 1)):
        left, right = sorted((grid[i], grid[nb]))
        for _ in range(60):
            m1 = left + (right - left) / 3
            m2 = right - (right - left) / 3
            if chain_oracle(net, x, [m1]) < chain_oracle(net, x, [m2]):
                left = m1
            else:
                right = m2
        v = chain_oracle(net, x, [0.5 * (left + right)])
        if v > best_v:
            best_v, best_a = v, 0.5 * (left + right)
    return best_v, np.array([best_a])


def vertex_enum_lp(c, A, rl, ru, cl, cu):
    """Maximize c.x over {rl <= A x <= ru, cl <= x <= cu} by enumerating vertices.

    Returns (value, x) or None if infeasible. Only for tiny instances.
    """
    n = len(c)
    planes = []
    for i in range(A.shape[0]):
        for bound in (rl[i], ru[i]):
            if np.isfinite(bound):
                planes.append((A[i], bound))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        planes += [(e, cl[j]), (e, cu[j])]
    best = None
    for combo in itertools.combinations(range(len(planes)), n):
        M = np.array([planes[k][0] for k in combo])
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, np.array([planes[k][1] for k in combo]))
        act = A @ x
        if (np.all(act >= rl - 1e-9) and np.all(act <= ru + 1e-9)
                and np.all(x >= cl - 1e-9) and np.all(x <= cu + 1e-9)):
            v = float(c @ x)
            if best is None or v > best[0]:
                best = (v, x)
    return best
