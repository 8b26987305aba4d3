"""Dual upper bound on max-Q and the replay-batch filtering certificate.

The max-Q problem over the triangle relaxation has a closed-form
dual-feasible point obtained by running the network backwards (the "dual
network"). Its objective value q~ upper-bounds the relaxed, hence the exact,
max-Q. A sample whose bootstrapped target cannot exceed its current Q even
with q~ in place of the true max has no hinge penalty, so it can skip the
exact solve.

The linear head ``c`` is treated as the final affine map of the network with
objective weight 1, so the recursion starts from ``nu_hat = -c`` on the last
hidden layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import BoxDomain, LayerBounds, backsubstitute, build_D, layer_bounds_batch
from .net import ReluNet, ShapeError, q_values


@dataclass(frozen=True)
class DualVars:
    """Dual-network variables for one bound set.

    ``nu[h]`` and ``nu_hat[h]`` belong to hidden layer ``h``; ``nu_hat_x`` and
    ``nu_hat_a`` split the input-layer variable into state and action parts.
    """

    nu: tuple[np.ndarray, ...]
    nu_hat: tuple[np.ndarray, ...]
    nu_hat_x: np.ndarray
    nu_hat_a: np.ndarray

    @property
    def nu_top(self) -> np.ndarray:
        return self.nu_hat[-1]


def dual_network(net: ReluNet, bounds: LayerBounds) -> DualVars:
    """Backward recursion ``nu_hat = W^T nu``, ``nu = D nu_hat`` from ``-c``."""
    if net.n_out != 1:
        raise ShapeError("dual bound needs a scalar network")
    if len(bounds) != len(net.weights):
        raise ShapeError("bounds do not match the network depth")
    H = len(net.weights)
    nu_hat = [None] * H
    nu = [None] * H
    v_hat = -net.c
    for h in range(H - 1, -1, -1):
        if bounds.lower[h].shape != v_hat.shape:
            raise ShapeError(f"bounds for hidden layer {h + 1} have the wrong width")
        nu_hat[h] = v_hat
        nu[h] = build_D(bounds.lower[h], bounds.upper[h]) * v_hat
        v_hat = net.weights[h].T @ nu[h]
    return DualVars(tuple(nu), tuple(nu_hat), v_hat[:net.state_dim], v_hat[net.state_dim:])


def dual_maxq_bound(net: ReluNet, x, box: BoxDomain, bounds: LayerBounds, dual: DualVars) -> float:
    """Objective of the dual point: an upper bound on ``max_a Q(x, a)`` over ``box``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    q = -dual.nu_hat_a @ box.center + box.radius @ np.abs(dual.nu_hat_a) - dual.nu_hat_x @ x
    for h, (lo, hi) in enumerate(zip(bounds.lower, bounds.upper)):
        unstable = (lo < 0.0) & (hi > 0.0)
        q -= np.sum(lo[unstable] * np.maximum(-dual.nu[h][unstable], 0.0))
        q -= dual.nu[h] @ net.biases[h]
    return float(q)


def dual_bound_batch(net: ReluNet, X, box: BoxDomain, bounds: LayerBounds | None = None,
                     tighten: bool = True) -> np.ndarray:
    """q~ for every state in ``X`` in one vectorized back-substitution."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if bounds is None:
        bounds = layer_bounds_batch(net, X, box, tighten=tighten)
    weights = list(net.weights) + [net.out]
    biases = list(net.biases) + [np.zeros(1)]
    nu_top = np.broadcast_to(-np.ones((1, 1)), (len(X), 1, 1))
    upper, _, _, _ = backsubstitute(weights, biases, X, box, net.state_dim,
                                    bounds.lower, bounds.upper, nu_top)
    return upper[:, 0]


@dataclass
class FilterResult:
    q_tilde: np.ndarray
    resolved: np.ndarray  # certificate holds: hinge term is provably zero
    dual_targets: np.ndarray  # r + gamma * q~

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(~self.resolved)

    @property
    def filtered_fraction(self) -> float:
        return float(np.mean(self.resolved)) if self.resolved.size else 0.0


def filter_batch(X, A, R, X2, theta: ReluNet, theta_target: ReluNet, gamma: float,
                 box: BoxDomain, tighten: bool = True) -> FilterResult:
    """Split a batch by the certificate ``q~(x') <= (Q(x, a) - r) / gamma``.

    ``q~`` is computed on the target network. For the hinge loss a resolved
    sample drops its penalty term; for the l2 loss its target becomes
    ``r + gamma * q~``. Unresolved samples need an exact max-Q solve.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    R = np.asarray(R, dtype=np.float64).reshape(-1)
    q_tilde = dual_bound_batch(theta_target, X2, box, tighten=tighten)
    q_now = q_values(theta, X, A)
    resolved = q_tilde <= (q_now - R) / gamma
    return FilterResult(q_tilde, resolved, R + gamma * q_tilde)
