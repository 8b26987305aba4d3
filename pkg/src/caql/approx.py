"""Approximate max-Q solvers and the dynamic tolerance schedule.

Both solvers work on a whole batch of states at once with a per-sample
convergence flag, and a batched call returns exactly what per-sample calls
would. The cross-entropy search draws each sample's noise from a generator
seeded by the run seed and the state's bytes, so equal states get equal
answers regardless of what else is in the batch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from .bounds import BoxDomain
from .mip import CONVERGED, ITER_LIMIT, UNKNOWN_GAP, MaxQSolution
from .net import ReluNet


@dataclass(frozen=True)
class GaConfig:
    step_size: float = 0.1
    tolerance: float = 1e-6
    max_iters: int = 20
    num_seeds: int = 1
    line_search: bool = False

    def __post_init__(self):
        if self.step_size <= 0 or self.tolerance <= 0 or self.max_iters < 1 or self.num_seeds < 1:
            raise ValueError("GaConfig fields must be positive")


@dataclass(frozen=True)
class CemConfig:
    sample_count: int = 64
    elite_count: int = 6
    max_iters: int = 20
    tolerance: float = 1e-6
    initial_stddev: float = 0.5

    def __post_init__(self):
        if not 0 < self.elite_count < self.sample_count:
            raise ValueError("need 0 < elite_count < sample_count")
        if self.max_iters < 1 or self.tolerance <= 0 or self.initial_stddev <= 0:
            raise ValueError("CemConfig fields must be positive")


@dataclass
class BatchResult:
    values: np.ndarray
    actions: np.ndarray
    iters: np.ndarray
    converged: np.ndarray
    elapsed: float

    def solution(self, i: int) -> MaxQSolution:
        status = CONVERGED if self.converged[i] else ITER_LIMIT
        return MaxQSolution(float(self.values[i]), self.actions[i].copy(), UNKNOWN_GAP, status,
                            int(self.iters[i]), self.elapsed / max(len(self.values), 1))


def _tol_vector(tol, n):
    return np.broadcast_to(np.asarray(tol, dtype=np.float64), (n,))


def _pack(net: ReluNet) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a scalar network into (params, dims) for the compiled kernels."""
    if net.n_out != 1:
        raise ValueError("max-Q solvers need a scalar network")
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts += [W.ravel(), b]
    parts.append(net.out[0])
    dims = np.array([net.n_in, *net.widths], dtype=np.int64)
    return np.ascontiguousarray(np.concatenate(parts)), dims


@numba.njit(cache=True)
def _forward(params, dims, z, pre, post):
    """Q at input ``z``; fills per-layer pre- and post-activations (concatenated)."""
    off = 0
    pos = 0
    prev = 0
    for k in range(dims.size - 1):
        n_i, n_o = dims[k], dims[k + 1]
        for i in range(n_o):
            s = params[off + n_i * n_o + i]
            for j in range(n_i):
                x = z[j] if k == 0 else post[prev + j]
                s += params[off + i * n_i + j] * x
            pre[pos + i] = s
            post[pos + i] = s if s > 0.0 else 0.0
        off += n_i * n_o + n_o
        prev = pos
        pos += n_o
    q = 0.0
    for i in range(dims[dims.size - 1]):
        q += params[off + i] * post[prev + i]
    return q


@numba.njit(cache=True)
def _grad_action(params, dims, sd, pre, g, gnext, out):
    """dQ/da into ``out`` using the pre-activations of the last forward pass."""
    K = dims.size - 1
    offs = np.zeros(K + 1, dtype=np.int64)
    pos = np.zeros(K + 1, dtype=np.int64)
    for k in range(K):
        offs[k + 1] = offs[k] + dims[k] * dims[k + 1] + dims[k + 1]
        pos[k + 1] = pos[k] + dims[k + 1]
    for i in range(dims[K]):
        g[i] = params[offs[K] + i] if pre[pos[K - 1] + i] > 0.0 else 0.0
    for k in range(K - 1, 0, -1):
        n_i, n_o = dims[k], dims[k + 1]
        for j in range(n_i):
            s = 0.0
            for i in range(n_o):
                s += g[i] * params[offs[k] + i * n_i + j]
            gnext[j] = s if pre[pos[k - 1] + j] > 0.0 else 0.0
        for j in range(n_i):
            g[j] = gnext[j]
    n_i, n_o = dims[0], dims[1]
    for j in range(sd, n_i):
        s = 0.0
        for i in range(n_o):
            s += g[i] * params[offs[0] + i * n_i + j]
        out[j - sd] = s


@numba.njit(cache=True)
def _ga_kernel(params, dims, X, A0, lo, hi, step_size, eps, max_iters, line_search):
    B, sd = X.shape
    d = lo.size
    n_in = dims[0]
    width = 0
    total = 0
    for k in range(1, dims.size):
        width = max(width, dims[k])
        total += dims[k]
    width = max(width, n_in)
    pre = np.empty(total)
    post = np.empty(total)
    g = np.empty(width)
    gnext = np.empty(width)
    z = np.empty(n_in)
    best_q = np.empty(B)
    best_a = np.empty((B, d))
    iters = np.zeros(B, dtype=np.int64)
    done = np.zeros(B, dtype=np.bool_)
    a = np.empty(d)
    grad = np.empty(d)
    a_new = np.empty(d)
    for b in range(B):
        for j in range(sd):
            z[j] = X[b, j]
        for j in range(d):
            a[j] = min(max(A0[b, j], lo[j]), hi[j])
            z[sd + j] = a[j]
        q = _forward(params, dims, z, pre, post)
        _grad_action(params, dims, sd, pre, g, gnext, grad)
        best_q[b] = q
        best_a[b] = a
        for _ in range(max_iters):
            step = step_size
            for j in range(d):
                a_new[j] = min(max(a[j] + step * grad[j], lo[j]), hi[j])
                z[sd + j] = a_new[j]
            q_new = _forward(params, dims, z, pre, post)
            if line_search:
                for _ in range(10):
                    if q_new >= q:
                        break
                    step *= 0.5
                    for j in range(d):
                        a_new[j] = min(max(a[j] + step * grad[j], lo[j]), hi[j])
                        z[sd + j] = a_new[j]
                    q_new = _forward(params, dims, z, pre, post)
            _grad_action(params, dims, sd, pre, g, gnext, grad)
            iters[b] += 1
            conv = abs(q_new - q) < eps[b]
            for j in range(d):
                a[j] = a_new[j]
            q = q_new
            if q > best_q[b]:
                best_q[b] = q
                best_a[b] = a
            if conv:
                done[b] = True
                break
    return best_q, best_a, iters, done


def ga_batch(net: ReluNet, X, box: BoxDomain, cfg: GaConfig, A0, tolerance=None) -> BatchResult:
    """Projected gradient ascent from ``A0`` for every state in ``X``.

    ``tolerance`` (scalar or per-sample) overrides ``cfg.tolerance``. Each
    state is solved independently, so batching never changes an answer.
    """
    t0 = time.perf_counter()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    A0 = np.asarray(A0, dtype=np.float64).reshape(len(X), -1)
    eps = np.ascontiguousarray(_tol_vector(cfg.tolerance if tolerance is None else tolerance, len(X)))
    params, dims = _pack(net)
    out = _ga_kernel(params, dims, np.ascontiguousarray(X), np.ascontiguousarray(A0), box.lower,
                     box.upper, float(cfg.step_size), eps, int(cfg.max_iters), bool(cfg.line_search))
    return BatchResult(*out, time.perf_counter() - t0)


def solve_maxq_ga(net: ReluNet, x, box: BoxDomain, cfg: GaConfig = GaConfig(), seed_action=None,
                  rng=None, tolerance=None) -> MaxQSolution:
    """Best of ``cfg.num_seeds`` projected-ascent runs; the first starts at ``seed_action``."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if seed_action is None:
        seed_action = box.center
    seed_action = np.asarray(seed_action, dtype=np.float64).reshape(-1)
    if not box.contains(seed_action, tol=1e-12):
        raise ValueError("seed action lies outside the box")
    starts = [seed_action]
    if cfg.num_seeds > 1:
        rng = np.random.default_rng(rng)
        starts += list(box.sample(rng, cfg.num_seeds - 1))
    res = ga_batch(net, np.repeat(x[None], len(starts), axis=0), box, cfg, np.array(starts), tolerance)
    k = int(np.argmax(res.values))
    sol = res.solution(k)
    sol.nodes_or_iters = int(res.iters.sum())
    sol.elapsed = time.perf_counter() - t0
    return sol


def _state_noise(seed: int, x: np.ndarray, shape) -> np.ndarray:
    words = np.frombuffer(np.ascontiguousarray(x, dtype=np.float64).tobytes(), dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words.tolist()])).standard_normal(shape)


@numba.njit(cache=True)
def _cem_kernel(params, dims, X, noise_all, lo, hi, stddev0, n_elite, eps, max_iters):
    B, sd = X.shape
    d = lo.size
    N = noise_all.shape[2]
    total = 0
    for k in range(1, dims.size):
        total += dims[k]
    pre = np.empty(total)
    post = np.empty(total)
    z = np.empty(dims[0])
    S = np.empty((N, d))
    q = np.empty(N)
    mean = np.empty(d)
    std = np.empty(d)
    best_q = np.full(B, -np.inf)
    best_a = np.empty((B, d))
    iters = np.zeros(B, dtype=np.int64)
    done = np.zeros(B, dtype=np.bool_)
    for b in range(B):
        for j in range(sd):
            z[j] = X[b, j]
        for j in range(d):
            mean[j] = 0.5 * (lo[j] + hi[j])
            std[j] = stddev0 * 0.5 * (hi[j] - lo[j])
            best_a[b, j] = mean[j]
        prev = -np.inf
        for it in range(max_iters):
            for s in range(N):
                for j in range(d):
                    S[s, j] = min(max(mean[j] + std[j] * noise_all[b, it, s, j], lo[j]), hi[j])
                    z[sd + j] = S[s, j]
                q[s] = _forward(params, dims, z, pre, post)
            # stable order keeps ties in sample order
            order = np.argsort(-q, kind="mergesort")[:n_elite]
            if q[order[0]] > best_q[b]:
                best_q[b] = q[order[0]]
                for j in range(d):
                    best_a[b, j] = S[order[0], j]
            em = 0.0
            for e in order:
                em += q[e]
            em /= n_elite
            for j in range(d):
                m = 0.0
                for e in order:
                    m += S[e, j]
                m /= n_elite
                v = 0.0
                for e in order:
                    v += (S[e, j] - m) ** 2
                mean[j] = m
                std[j] = np.sqrt(v / n_elite)
            iters[b] += 1
            if abs(em - prev) < eps[b]:
                done[b] = True
                break
            prev = em
    return best_q, best_a, iters, done


def cem_batch(net: ReluNet, X, box: BoxDomain, cfg: CemConfig, seed: int = 0,
              tolerance=None) -> BatchResult:
    """Cross-entropy search with a diagonal Gaussian per state."""
    t0 = time.perf_counter()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    shape = (cfg.max_iters, cfg.sample_count, box.dim)
    noise = np.stack([_state_noise(seed, x, shape) for x in X]) if len(X) else np.zeros((0, *shape))
    eps = np.ascontiguousarray(_tol_vector(cfg.tolerance if tolerance is None else tolerance, len(X)))
    params, dims = _pack(net)
    out = _cem_kernel(params, dims, X, noise, box.lower, box.upper, float(cfg.initial_stddev),
                      int(cfg.elite_count), eps, int(cfg.max_iters))
    return BatchResult(*out, time.perf_counter() - t0)


def solve_maxq_cem(net: ReluNet, x, box: BoxDomain, cfg: CemConfig = CemConfig(), seed: int = 0,
                   tolerance=None) -> MaxQSolution:
    t0 = time.perf_counter()
    res = cem_batch(net, np.asarray(x, dtype=np.float64).reshape(1, -1), box, cfg, seed, tolerance)
    sol = res.solution(0)
    sol.elapsed = time.perf_counter() - t0
    return sol


def dynamic_tolerance(residuals, k1: float, k2: float, t: int) -> float:
    """``mean|residual| * k1 * k2**t`` (with ``k2**0 == 1``)."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("empty residual batch")
    if k1 <= 0 or not 0 <= k2 < 1 or t < 0:
        raise ValueError("need k1 > 0, 0 <= k2 < 1, t >= 0")
    decay = 1.0 if t == 0 else k2 ** t
    return float(np.mean(np.abs(r)) * k1 * decay)
