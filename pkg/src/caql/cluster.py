"""Next-state clustering with first-order max-Q targets.

Only the centroids of a greedy ball cover get an exact max-Q solve; every
other next state borrows its centroid's answer, corrected by the state
gradient of Q at the centroid's maximizer (envelope theorem).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import ReluNet, grad_input_batch

NORMS = {1: 1, 2: 2, np.inf: np.inf, "inf": np.inf}


@dataclass(frozen=True)
class CoverResult:
    centroids: np.ndarray  # indices into the input states, in creation order
    assignment: np.ndarray  # sample -> position in ``centroids``
    radius: float
    norm: float

    @property
    def n_centroids(self) -> int:
        return len(self.centroids)

    def is_centroid(self) -> np.ndarray:
        mask = np.zeros(len(self.assignment), dtype=bool)
        mask[self.centroids] = True
        return mask


def cover(states, b: float, p=2) -> CoverResult:
    """Greedy online cover in input order.

    A state within ``b`` of an existing centroid joins the nearest one (ties
    go to the lowest centroid index); otherwise it becomes a centroid.
    """
    if b < 0:
        raise ValueError("radius must be nonnegative")
    if p not in NORMS:
        raise ValueError(f"norm must be 1, 2 or inf, got {p!r}")
    ord_ = NORMS[p]
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    centroids: list[int] = []
    assignment = np.empty(len(S), dtype=np.int64)
    for i, s in enumerate(S):
        if centroids:
            dist = np.linalg.norm(S[centroids] - s, ord=ord_, axis=1)
            k = int(np.argmin(dist))  # first minimum wins ties
            if dist[k] <= b:
                assignment[i] = k
                continue
        assignment[i] = len(centroids)
        centroids.append(i)
    return CoverResult(np.array(centroids, dtype=np.int64), assignment, float(b), float(ord_))


def taylor_targets(net_target: ReluNet, centroid_states, centroid_values, centroid_actions,
                   states, assignment) -> np.ndarray:
    """``q*(c) + <grad_x Q_target(c, a*(c)), x - c>`` for each state."""
    C = np.atleast_2d(np.asarray(centroid_states, dtype=np.float64))
    q = np.asarray(centroid_values, dtype=np.float64).reshape(-1)
    A = np.atleast_2d(np.asarray(centroid_actions, dtype=np.float64))
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) and (assignment.min() < 0 or assignment.max() >= len(C)):
        raise IndexError("assignment references a centroid without a solution")
    if not np.all(np.isfinite(q)):
        raise ValueError("unsolved centroid")
    gx, _ = grad_input_batch(net_target, C, A)
    diff = X - C[assignment]
    return q[assignment] + np.einsum("ij,ij->i", gx[assignment], diff)


def dynamic_radius(k3: float, k4: float, t: int) -> float:
    """``k3 * k4**t`` with ``k4**0 == 1``."""
    if k3 <= 0 or not 0 <= k4 < 1 or t < 0:
        raise ValueError("need k3 > 0, 0 <= k4 < 1, t >= 0")
    return float(k3) if t == 0 else float(k3 * k4 ** t)
