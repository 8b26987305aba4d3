"""The CAQL training loop.

Each epoch collects one episode with the noisy action function, then runs a
fixed number of training steps. A training step builds double-Q targets with
the configured max-Q solver (optionally sped up by dual filtering,
clustering and a dynamic tolerance), takes one Adam step on the Q-network
loss, one on the action-function regression, and soft-updates the target
network.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approx import CemConfig, GaConfig, cem_batch, dynamic_tolerance, ga_batch
from .bounds import BoxDomain, layer_bounds_batch
from .cluster import cover, dynamic_radius, taylor_targets
from .dualfilter import dual_bound_batch, filter_batch
from .mip import solve_maxq_mip
from .net import (AdamState, ReluNet, ShapeError, act, adam_step, grad_input_batch, grad_params,
                  init_net, join_inputs, q_values, save_checkpoint)

log = logging.getLogger(__name__)

SOLVERS = ("mip", "ga", "cem", "dual")
LOSSES = ("l2", "hinge")
ACTION_LABELS = ("solved", "dual")


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    a: np.ndarray
    r: float
    x2: np.ndarray

    def __post_init__(self):
        for name in ("x", "a", "x2"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(v)):
                raise ValueError(f"transition field {name} is not finite")
            object.__setattr__(self, name, v)
        if not math.isfinite(self.r):
            raise ValueError("reward is not finite")


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.X = np.zeros((capacity, state_dim))
        self.A = np.zeros((capacity, action_dim))
        self.R = np.zeros(capacity)
        self.X2 = np.zeros((capacity, state_dim))
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition) -> None:
        i = self._next
        self.X[i], self.A[i], self.R[i], self.X2[i] = t.x, t.a, t.r, t.x2
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def oldest_first(self) -> list[Transition]:
        start = (self._next - self._size) % self.capacity
        idx = (start + np.arange(self._size)) % self.capacity
        return [Transition(self.X[i], self.A[i], float(self.R[i]), self.X2[i]) for i in idx]

    def sample(self, n: int, rng: np.random.Generator):
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=n)
        return self.X[idx], self.A[idx], self.R[idx], self.X2[idx]


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    tau_soft: float = 0.001
    batch_size: int = 64
    steps_per_epoch: int = 20
    episode_length: int = 200
    sigma: float = 1.0
    noise_decay: float = 0.9995
    sigma_min: float = 0.01
    loss: str = "l2"
    hinge_lambda: float = 1.0
    solver: str = "ga"
    q_lr: float = 1e-3
    action_lr: float = 1e-3
    widths: tuple[int, ...] = (32, 16)
    buffer_capacity: int = 100_000
    dtol: tuple[float, float] | None = None  # (k1, k2)
    dual_filter: bool = False
    cluster_radius: float | None = None  # fixed b
    cluster_decay: tuple[float, float] | None = None  # (k3, k4), overrides cluster_radius
    cluster_norm: float = 2
    action_label: str = "solved"
    tighten_bounds: bool = True
    mip_time_limit: float = 60.0
    mip_gap: float = 1e-4
    ga_step: float = 0.1
    ga_iters: int = 20
    ga_tol: float = 1e-6
    ga_seeds: int = 1
    cem_samples: int = 64
    cem_elites: int = 6
    cem_iters: int = 20
    cem_tol: float = 1e-6
    cem_stddev: float = 0.5
    workers: int = 0

    def __post_init__(self):
        checks = [
            (0.0 < self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (0.0 < self.tau_soft <= 1.0, "tau_soft must lie in (0, 1]"),
            (self.sigma >= 0 and self.sigma_min >= 0, "noise scales must be nonnegative"),
            (0.0 <= self.noise_decay <= 1.0, "noise_decay must lie in [0, 1]"),
            (self.batch_size >= 1 and self.steps_per_epoch >= 1 and self.episode_length >= 1,
             "batch size, steps per epoch and episode length must be positive"),
            (self.loss in LOSSES, f"loss must be one of {LOSSES}"),
            (self.solver in SOLVERS, f"solver must be one of {SOLVERS}"),
            (self.action_label in ACTION_LABELS, f"action_label must be one of {ACTION_LABELS}"),
            (self.hinge_lambda >= 0, "hinge_lambda must be nonnegative"),
            (self.q_lr > 0 and self.action_lr > 0, "learning rates must be positive"),
            (self.mip_gap > 0 and self.mip_time_limit > 0, "MIP limits must be positive"),
            (self.cluster_radius is None or self.cluster_radius >= 0, "cluster radius must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        if self.dtol is not None and (self.dtol[0] <= 0 or not 0 <= self.dtol[1] < 1):
            raise ValueError("dtol needs k1 > 0 and 0 <= k2 < 1")

    @property
    def clustering(self) -> bool:
        return self.cluster_radius is not None or self.cluster_decay is not None

    def ga_config(self) -> GaConfig:
        return GaConfig(self.ga_step, self.ga_tol, self.ga_iters, self.ga_seeds)

    def cem_config(self) -> CemConfig:
        return CemConfig(self.cem_samples, self.cem_elites, self.cem_iters, self.cem_tol, self.cem_stddev)


def collect_episode(env, policy: ReluNet, sigma: float, box: BoxDomain, length: int,
                    buffer: ReplayBuffer | None, rng: np.random.Generator) -> float:
    """Roll out ``clip(pi(x) + N(0, sigma))`` for ``length`` steps; returns the episode return."""
    x = env.reset()
    total = 0.0
    for _ in range(length):
        a = act(policy, x[None])[0]
        if sigma > 0:
            a = a + rng.normal(0.0, sigma, size=a.shape)
        a = box.clip(a)
        x2, r, _ = env.step(a)
        if buffer is not None:
            buffer.push(Transition(x, a, r, x2))
        total += r
        x = x2
    return total


def evaluate(env_factory: Callable[[int], object], policy: ReluNet, box: BoxDomain, episodes: int,
             length: int, seed: int) -> np.ndarray:
    """Noise-free returns, one fresh environment seed per episode. No side effects."""
    rng = np.random.default_rng(0)
    return np.array([collect_episode(env_factory(seed + k), policy, 0.0, box, length, None, rng)
                     for k in range(episodes)])


@dataclass
class TargetResult:
    targets: np.ndarray
    actions: np.ndarray  # a' per sample; NaN where no max-Q action was computed
    solved: np.ndarray  # exact (solver) max-Q computed for this sample
    resolved: np.ndarray  # dual certificate holds
    tolerance: float
    max_residual: float
    filtered_fraction: float
    centroid_fraction: float
    elapsed_ms: list[float] = field(default_factory=list)
    q_tilde: np.ndarray | None = None


def _mip_one(args):
    net, x, box, gap, time_limit, bounds = args
    s = solve_maxq_mip(net, x, box, gap_tol=gap, time_limit=time_limit, bounds=bounds)
    return s.action, s.elapsed


class MaxQOracle:
    """Batched access to the configured max-Q solver."""

    def __init__(self, cfg: AgentConfig, box: BoxDomain, seed: int = 0):
        self.cfg = cfg
        self.box = box
        self.seed = seed
        self.pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 0 and cfg.solver == "mip" else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def solve(self, net: ReluNet, X2: np.ndarray, seeds: np.ndarray, tol: float | None,
              step: int) -> tuple[np.ndarray, list[float]]:
        cfg = self.cfg
        if cfg.solver == "mip":
            gap = cfg.mip_gap if tol is None else max(tol, cfg.mip_gap)
            bounds = layer_bounds_batch(net, X2, self.box, tighten=cfg.tighten_bounds)
            jobs = [(net, X2[i], self.box, gap, cfg.mip_time_limit, bounds.row(i)) for i in range(len(X2))]
            out = list(self.pool.map(_mip_one, jobs)) if self.pool else [_mip_one(j) for j in jobs]
            return np.array([a for a, _ in out]).reshape(len(X2), -1), [1e3 * e for _, e in out]
        if cfg.solver == "ga":
            res = ga_batch(net, X2, self.box, cfg.ga_config(), seeds, tolerance=tol)
        else:
            res = cem_batch(net, X2, self.box, cfg.cem_config(), seed=self.seed * 1_000_003 + step,
                            tolerance=tol)
        per = 1e3 * res.elapsed / max(len(X2), 1)
        return res.actions, [per] * len(X2)


def compute_targets(X, A, R, X2, theta: ReluNet, theta_target: ReluNet, policy: ReluNet,
                    cfg: AgentConfig, box: BoxDomain, oracle: MaxQOracle, step: int) -> TargetResult:
    """Double-Q targets through the dual filter, clustering and solver stages."""
    n = len(R)
    R = np.asarray(R, dtype=np.float64)
    seeds = box.clip(act(policy, X2))
    q_now = q_values(theta, X, A)
    residual = R + cfg.gamma * q_values(theta_target, X2, seeds) - q_now
    max_residual = float(np.max(np.abs(residual)))
    tol = dynamic_tolerance(residual, cfg.dtol[0], cfg.dtol[1], step) if cfg.dtol else None

    targets = np.full(n, np.nan)
    actions = np.full((n, box.dim), np.nan)
    solved = np.zeros(n, dtype=bool)
    resolved = np.zeros(n, dtype=bool)
    q_tilde = None
    if cfg.solver == "dual":
        q_tilde = dual_bound_batch(theta_target, X2, box, tighten=cfg.tighten_bounds)
        return TargetResult(R + cfg.gamma * q_tilde, actions, solved, resolved,
                            math.nan if tol is None else tol, max_residual, 0.0, 0.0, [], q_tilde)

    if cfg.dual_filter:
        fr = filter_batch(X, A, R, X2, theta, theta_target, cfg.gamma, box, cfg.tighten_bounds)
        resolved, q_tilde = fr.resolved, fr.q_tilde
        targets[resolved] = fr.dual_targets[resolved]
    kept = np.flatnonzero(~resolved)

    solve_idx, followers = kept, np.zeros(0, dtype=np.int64)
    if cfg.clustering and kept.size:
        if cfg.cluster_decay is not None:
            b = dynamic_radius(cfg.cluster_decay[0], cfg.cluster_decay[1], step)
        else:
            b = cfg.cluster_radius
        cv = cover(X2[kept], b, cfg.cluster_norm)
        solve_idx = kept[cv.centroids]
        followers = kept[~cv.is_centroid()]
        owner = kept[cv.centroids[cv.assignment]]

    elapsed: list[float] = []
    if solve_idx.size:
        a_star, elapsed = oracle.solve(theta, X2[solve_idx], seeds[solve_idx], tol, step)
        actions[solve_idx] = a_star
        solved[solve_idx] = True
        q_star_target = q_values(theta_target, X2[solve_idx], a_star)
        targets[solve_idx] = R[solve_idx] + cfg.gamma * q_star_target
    if followers.size:
        pos = {int(i): k for k, i in enumerate(solve_idx)}
        own = owner[~cv.is_centroid()]
        cidx = np.array([pos[int(i)] for i in own], dtype=np.int64)
        uniq, local = np.unique(cidx, return_inverse=True)
        centroid_states = X2[solve_idx[uniq]]
        q_hat = taylor_targets(theta_target, centroid_states, q_star_target[uniq], a_star[uniq],
                               X2[followers], local)
        targets[followers] = R[followers] + cfg.gamma * q_hat
    return TargetResult(targets, actions, solved, resolved, math.nan if tol is None else tol,
                        max_residual, float(np.mean(resolved)), float(solve_idx.size / n),
                        elapsed, q_tilde)


def l2_loss(theta: ReluNet, X, A, targets) -> tuple[float, np.ndarray]:
    """Mean squared Bellman error and its per-sample gradient w.r.t. Q."""
    q = q_values(theta, X, A)
    diff = np.asarray(targets, dtype=np.float64) - q
    return float(np.mean(diff ** 2)), -2.0 * diff


def hinge_loss(theta: ReluNet, X, A, targets, lam: float, active=None) -> tuple[float, np.ndarray]:
    """``mean(Q + lam * (target - Q)_+)``; samples with ``active == False`` keep only Q."""
    q = q_values(theta, X, A)
    t = np.asarray(targets, dtype=np.float64)
    mask = np.ones_like(q, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    over = np.where(mask, np.maximum(np.nan_to_num(t - q, nan=0.0), 0.0), 0.0)
    seed = 1.0 - lam * ((over > 0) & mask)
    return float(np.mean(q + lam * over)), seed


def action_fn_step(theta: ReluNet, policy: ReluNet, X2, labels, adam: AdamState):
    """One Adam step on ``mean (label - Q(x', pi(x')))^2`` with theta frozen.

    Returns (new policy, new Adam state, loss, gradient).
    """
    X2 = np.atleast_2d(np.asarray(X2, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    pi = act(policy, X2)
    q = q_values(theta, X2, pi)
    diff = labels - q
    _, dq_da = grad_input_batch(theta, X2, pi)
    seed = -2.0 * diff[:, None] * dq_da
    grads = grad_params(policy, X2, seed)
    params, adam = adam_step(policy.params(), grads, adam)
    return policy.with_params(params), adam, float(np.mean(diff ** 2)), grads


def soft_update(target: ReluNet, theta: ReluNet, tau: float) -> ReluNet:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if tau == 1.0:
        return theta.copy()
    return target.with_params([tau * p + (1.0 - tau) * q for p, q in zip(theta.params(), target.params())])


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    records: list[dict]
    theta: ReluNet
    policy: ReluNet
    steps: int


def _finite(params) -> bool:
    return all(np.all(np.isfinite(p)) for p in params)


def train(cfg: AgentConfig, env_factory: Callable[[int], object], seed: int, total_steps: int,
          out_dir: str | Path | None = None, eval_interval: int = 1000, eval_episodes: int = 10,
          checkpoint_interval: int | None = None,
          stop: Callable[[list[dict]], bool] | None = None) -> TrainResult:
    """Run epochs of one episode plus ``steps_per_epoch`` training steps.

    ``env_factory(seed)`` builds an environment. Metrics go to
    ``out_dir/metrics.jsonl`` (one record per evaluation, the first before any
    training); ``stop(records)`` may end training early after an evaluation.
    """
    rng = np.random.default_rng(seed)
    env = env_factory(seed)
    box = env.box
    theta = init_net(env.state_dim, env.action_dim, cfg.widths, rng=rng)
    policy = init_net(env.state_dim, 0, cfg.widths, n_out=env.action_dim, rng=rng)
    target = theta.copy()
    q_adam = AdamState.zeros_like(theta.params(), cfg.q_lr)
    pi_adam = AdamState.zeros_like(policy.params(), cfg.action_lr)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim)
    oracle = MaxQOracle(cfg, box, seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    records: list[dict] = []
    window: dict[str, list] = {"loss": [], "filtered": [], "centroid": [], "elapsed": []}
    last = {"tolerance": math.nan, "max_residual": math.nan, "tolerance_step": 0}
    eval_seed = 10_000 * (seed + 1)

    def emit(step: int, epoch: int):
        rets = evaluate(env_factory, policy, box, eval_episodes, cfg.episode_length, eval_seed)
        el = np.array(window["elapsed"]) if window["elapsed"] else np.zeros(1)
        rec = {
            "step": step, "epoch": epoch,
            "mean_return": float(rets.mean()), "std_return": float(rets.std()),
            "loss": float(np.mean(window["loss"])) if window["loss"] else math.nan,
            "tolerance": last["tolerance"], "tolerance_step": last["tolerance_step"],
            "max_residual": last["max_residual"],
            "filtered_fraction": float(np.mean(window["filtered"])) if window["filtered"] else 0.0,
            "centroid_fraction": float(np.mean(window["centroid"])) if window["centroid"] else 0.0,
            "maxq_elapsed_median_ms": float(np.median(el)), "maxq_elapsed_sd_ms": float(np.std(el)),
            "solver": cfg.solver, "seed": seed,
        }
        records.append(rec)
        for v in window.values():
            v.clear()
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        log.info("step %d epoch %d return %.1f +- %.1f", step, epoch, rec["mean_return"], rec["std_return"])

    def abort(step, msg, extra):
        if out is not None:
            dump = {"step": step, "reason": msg, **extra,
                    "theta_norms": [float(np.linalg.norm(p)) for p in theta.params()],
                    "policy_norms": [float(np.linalg.norm(p)) for p in policy.params()]}
            (out / "abort.json").write_text(json.dumps(dump, default=float, indent=1))
        raise TrainingAborted(f"step {step}: {msg}")

    step, epoch, sigma = 0, 0, cfg.sigma
    emit(0, 0)
    try:
        while step < total_steps:
            epoch += 1
            collect_episode(env, policy, sigma, box, cfg.episode_length, buffer, rng)
            for _ in range(cfg.steps_per_epoch):
                if step >= total_steps:
                    break
                X, A, R, X2 = buffer.sample(cfg.batch_size, rng)
                tr = compute_targets(X, A, R, X2, theta, target, policy, cfg, box, oracle, step)
                if cfg.loss == "l2":
                    loss, seed_q = l2_loss(theta, X, A, tr.targets)
                else:
                    loss, seed_q = hinge_loss(theta, X, A, tr.targets, cfg.hinge_lambda, ~tr.resolved)
                if not math.isfinite(loss):
                    abort(step, "non-finite loss", {"loss": loss, "targets": tr.targets.tolist()})
                params, q_adam = adam_step(theta.params(), grad_params(theta, join_inputs(theta, X, A), seed_q),
                                           q_adam)
                if not _finite(params):
                    abort(step, "non-finite Q-network parameters", {"loss": loss})
                theta = theta.with_params(params)
                idx = np.flatnonzero(tr.solved)
                labels = q_values(theta, X2[idx], tr.actions[idx]) if idx.size else np.zeros(0)
                if tr.q_tilde is not None and (cfg.action_label == "dual" or cfg.solver == "dual"):
                    extra = np.flatnonzero(tr.resolved) if cfg.solver != "dual" else np.arange(len(R))
                    idx = np.concatenate([idx, extra])
                    labels = np.concatenate([labels, tr.q_tilde[extra]])
                if idx.size:
                    try:
                        policy, pi_adam, _, _ = action_fn_step(theta, policy, X2[idx], labels, pi_adam)
                    except ShapeError:
                        abort(step, "non-finite action-function parameters", {"loss": loss})
                target = soft_update(target, theta, cfg.tau_soft)
                step += 1
                window["loss"].append(loss)
                window["filtered"].append(tr.filtered_fraction)
                window["centroid"].append(tr.centroid_fraction)
                window["elapsed"].extend(tr.elapsed_ms)
                last.update(tolerance=tr.tolerance, max_residual=tr.max_residual, tolerance_step=step - 1)
                if checkpoint_interval and out is not None and step % checkpoint_interval == 0:
                    save_checkpoint(theta, out / f"q_{step}.ckpt")
                    save_checkpoint(policy, out / f"pi_{step}.ckpt")
                if step % eval_interval == 0:
                    emit(step, epoch)
                    if stop is not None and stop(records):
                        return TrainResult(records, theta, policy, step)
            sigma = max(sigma * cfg.noise_decay, cfg.sigma_min)
        if records[-1]["step"] != step:
            emit(step, epoch)
    finally:
        oracle.close()
        if out is not None:
            save_checkpoint(theta, out / "q_final.ckpt")
            save_checkpoint(policy, out / "pi_final.ckpt")
    return TrainResult(records, theta, policy, step)
