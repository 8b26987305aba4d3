"""Pre-activation bounds of a ReLU network over an action box.

The state is held fixed (a point interval); only the action ranges over the
box. Two schemes are provided: plain interval arithmetic, and a tighter
layer-by-layer scheme that bounds each neuron with the closed-form dual of
the triangle relaxation (the same back-substitution used for the max-Q dual
bound in :mod:`caql.dualfilter`).

Arrays may carry a leading batch axis: every public function also has a
``*_batch`` form that takes states of shape (B, state_dim).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import ReluNet, ShapeError


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True)
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidBox(f"box bounds must be matching vectors, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidBox("box bounds must be finite")
        if np.any(lo > hi):
            raise InvalidBox("box lower bound exceeds upper bound")

    @classmethod
    def symmetric(cls, radius: float, dim: int) -> "BoxDomain":
        return cls(np.full(dim, -float(radius)), np.full(dim, float(radius)))

    @classmethod
    def from_center(cls, center, radius) -> "BoxDomain":
        center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), center.shape)
        return cls(center - radius, center + radius)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, a, tol: float = 0.0) -> bool:
        a = np.asarray(a, dtype=np.float64)
        return bool(np.all(a >= self.lower - tol) and np.all(a <= self.upper + tol))

    def clip(self, a) -> np.ndarray:
        return np.clip(a, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = self.dim if n is None else (n, self.dim)
        return rng.uniform(self.lower, self.upper, size=size)


@dataclass(frozen=True)
class LayerBounds:
    """Per-hidden-layer pre-activation bounds ``lower[h] <= y_h <= upper[h]``."""

    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]

    def __post_init__(self):
        for lo, hi in zip(self.lower, self.upper):
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("inconsistent layer bounds")

    def __len__(self):
        return len(self.lower)

    def inactive(self, h: int) -> np.ndarray:
        """Mask of I-: neurons that are never active (upper <= 0)."""
        return self.upper[h] <= 0.0

    def active(self, h: int) -> np.ndarray:
        """Mask of I+: neurons that are always active (lower >= 0), excluding I-."""
        return (self.lower[h] >= 0.0) & ~self.inactive(h)

    def unstable(self, h: int) -> np.ndarray:
        """Mask of I: the remaining neurons, lower < 0 < upper."""
        return ~(self.inactive(h) | self.active(h))

    def post_activation(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        return np.maximum(self.lower[h], 0.0), np.maximum(self.upper[h], 0.0)

    def row(self, i: int) -> "LayerBounds":
        """Bounds for one sample of a batched result."""
        return LayerBounds(tuple(lo[i] for lo in self.lower), tuple(hi[i] for hi in self.upper))


def build_D(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Diagonal of the relaxation slope matrix D for one layer.

    0 on I-, 1 on I+, u/(u-l) on the unstable set.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    d = np.where(lower >= 0.0, 1.0, 0.0)
    d = np.where(upper <= 0.0, 0.0, d)
    mid = (lower < 0.0) & (upper > 0.0)
    width = upper - lower
    safe = np.where(mid & (width > 0), width, 1.0)
    return np.where(mid, upper / safe, d)


def _as_states(net: ReluNet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != net.state_dim:
        raise ShapeError(f"state width {X.shape[1]} != {net.state_dim}")
    return X


def _check_box(net: ReluNet, box: BoxDomain):
    if not isinstance(box, BoxDomain):
        raise InvalidBox("box must be a BoxDomain")
    if box.dim != net.action_dim:
        raise InvalidBox(f"box dimension {box.dim} != action dimension {net.action_dim}")


def _first_layer(net: ReluNet, X: np.ndarray, box: BoxDomain):
    W, b = net.weights[0], net.biases[0]
    Wx, Wa = W[:, :net.state_dim], W[:, net.state_dim:]
    base = np.einsum("ij,bj->bi", Wx, X) + b
    pos, neg = np.maximum(Wa, 0.0), np.minimum(Wa, 0.0)
    lo = base + (pos @ box.lower + neg @ box.upper)
    hi = base + (pos @ box.upper + neg @ box.lower)
    return lo, hi


def _interval_step(W, b, lo, hi):
    """Bounds of W relu(y) + b from bounds on y."""
    zl, zu = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    pos, neg = np.maximum(W, 0.0), np.minimum(W, 0.0)
    new_lo = np.einsum("ij,bj->bi", pos, zl) + np.einsum("ij,bj->bi", neg, zu) + b
    new_hi = np.einsum("ij,bj->bi", pos, zu) + np.einsum("ij,bj->bi", neg, zl) + b
    return new_lo, new_hi


def interval_propagate_batch(net: ReluNet, X, box: BoxDomain) -> LayerBounds:
    _check_box(net, box)
    X = _as_states(net, X)
    lo, hi = _first_layer(net, X, box)
    lowers, uppers = [lo], [hi]
    for W, b in zip(net.weights[1:], net.biases[1:]):
        lo, hi = _interval_step(W, b, lo, hi)
        lowers.append(lo)
        uppers.append(hi)
    return LayerBounds(tuple(lowers), tuple(uppers))


def interval_propagate(net: ReluNet, x, box: BoxDomain) -> LayerBounds:
    """Interval-arithmetic bounds for a single state."""
    return interval_propagate_batch(net, x, box).row(0)


def backsubstitute(weights, biases, X, box: BoxDomain, state_dim: int,
                   lowers, uppers, nu_top: np.ndarray):
    """Closed-form dual bounds on linear objectives of a top pre-activation.

    ``weights``/``biases`` list the affine maps up to and including the top
    one; ``lowers``/``uppers`` bound the hidden layers below the top. The
    objective matrix C enters through ``nu_top = -C`` with shape
    (B, n_top, m). Returns ``(upper, lower, nus, nu_hats)`` where
    ``upper >= max C^T y_top`` and ``lower <= min C^T y_top`` over the
    triangle relaxation, each of shape (B, m).
    """
    nu = nu_top
    const = -np.einsum("j,bjm->bm", biases[-1], nu)
    relax_hi = np.zeros_like(const)
    relax_lo = np.zeros_like(const)
    nus, nu_hats = [nu], []
    for t in range(len(weights) - 1, 0, -1):
        nu_hat = np.einsum("ij,bim->bjm", weights[t], nu)
        lo, hi = lowers[t - 1], uppers[t - 1]
        d = build_D(lo, hi)
        nu = d[:, :, None] * nu_hat
        unstable = ((lo < 0.0) & (hi > 0.0))[:, :, None]
        l3 = lo[:, :, None]
        relax_hi -= np.sum(np.where(unstable, l3 * np.maximum(-nu, 0.0), 0.0), axis=1)
        relax_lo += np.sum(np.where(unstable, l3 * np.maximum(nu, 0.0), 0.0), axis=1)
        const -= np.einsum("j,bjm->bm", biases[t - 1], nu)
        nu_hats.append(nu_hat)
        nus.append(nu)
    nu_hat0 = np.einsum("ij,bim->bjm", weights[0], nu)
    nu_hats.append(nu_hat0)
    nx, na = nu_hat0[:, :state_dim], nu_hat0[:, state_dim:]
    const -= np.einsum("bj,bjm->bm", X, nx) + np.einsum("j,bjm->bm", box.center, na)
    spread = np.einsum("j,bjm->bm", box.radius, np.abs(na))
    nus.reverse()
    nu_hats.reverse()
    return const + spread + relax_hi, const - spread + relax_lo, nus, nu_hats


def dual_tighten_batch(net: ReluNet, X, box: BoxDomain) -> LayerBounds:
    _check_box(net, box)
    X = _as_states(net, X)
    B = X.shape[0]
    lo, hi = _first_layer(net, X, box)
    lowers, uppers = [lo], [hi]
    for k in range(1, len(net.weights)):
        n_k = net.weights[k].shape[0]
        nu_top = np.broadcast_to(-np.eye(n_k), (B, n_k, n_k))
        ub, lb, _, _ = backsubstitute(net.weights[:k + 1], net.biases[:k + 1], X, box,
                                      net.state_dim, lowers, uppers, nu_top)
        il, iu = _interval_step(net.weights[k], net.biases[k], lowers[-1], uppers[-1])
        lo, hi = np.maximum(lb, il), np.minimum(ub, iu)
        # both are valid; guard rounding so lo <= hi
        hi = np.maximum(hi, lo)
        lowers.append(lo)
        uppers.append(hi)
    return LayerBounds(tuple(lowers), tuple(uppers))


def dual_tighten(net: ReluNet, x, box: BoxDomain) -> LayerBounds:
    """Dual-relaxation bounds (intersected with interval bounds) for one state."""
    return dual_tighten_batch(net, x, box).row(0)


def layer_bounds(net: ReluNet, x, box: BoxDomain, tighten: bool = True) -> LayerBounds:
    return dual_tighten(net, x, box) if tighten else interval_propagate(net, x, box)


def layer_bounds_batch(net: ReluNet, X, box: BoxDomain, tighten: bool = True) -> LayerBounds:
    return dual_tighten_batch(net, X, box) if tighten else interval_propagate_batch(net, X, box)
