"""Feed-forward ReLU networks in float64 numpy.

Every listed layer is ReLU-activated; the output head is a plain linear map
with no bias and no activation, so a Q-network computes ``c @ relu(...)``.
The same container serves the action network, whose head has ``action_dim``
rows instead of one.

Affine maps go through ``np.einsum`` rather than ``@``: BLAS kernels change
their summation order with the batch size, and the solvers rely on a row's
value not depending on which other rows share the batch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CAQL1"


class ShapeError(ValueError):
    """Input or parameter dimensions violate a network contract."""


@dataclass(frozen=True)
class ReluNet:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    out: np.ndarray
    state_dim: int
    action_dim: int

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need at least one (W, b) layer")
        n_in = self.state_dim + self.action_dim
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[0],) or W.shape[1] != n_in:
                raise ShapeError(f"layer shape {W.shape}/{b.shape} does not chain from width {n_in}")
            n_in = W.shape[0]
        if self.out.ndim != 2 or self.out.shape[1] != n_in:
            raise ShapeError(f"output weights {self.out.shape} do not match last width {n_in}")
        for arr in self.params():
            if not np.all(np.isfinite(arr)):
                raise ShapeError("non-finite parameter")

    @property
    def n_in(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def n_out(self) -> int:
        return self.out.shape[0]

    @property
    def widths(self) -> list[int]:
        return [W.shape[0] for W in self.weights]

    @property
    def c(self) -> np.ndarray:
        """Output weight vector of a scalar (Q) network."""
        if self.n_out != 1:
            raise ShapeError("c is defined only for single-output networks")
        return self.out[0]

    def params(self) -> list[np.ndarray]:
        ps: list[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            ps += [W, b]
        ps.append(self.out)
        return ps

    def with_params(self, params: Sequence[np.ndarray]) -> "ReluNet":
        k = len(self.weights)
        if len(params) != 2 * k + 1:
            raise ShapeError("parameter list length mismatch")
        for old, new in zip(self.params(), params):
            if old.shape != np.shape(new):
                raise ShapeError(f"parameter shape {np.shape(new)} != {old.shape}")
        return ReluNet(
            tuple(np.array(p, dtype=np.float64) for p in params[0:2 * k:2]),
            tuple(np.array(p, dtype=np.float64) for p in params[1:2 * k:2]),
            np.array(params[-1], dtype=np.float64),
            self.state_dim,
            self.action_dim,
        )

    def copy(self) -> "ReluNet":
        return self.with_params(self.params())


def make_net(weights, biases, out, state_dim: int, action_dim: int) -> ReluNet:
    """Build a network from nested lists or arrays (copied to float64)."""
    out = np.atleast_2d(np.asarray(out, dtype=np.float64))
    return ReluNet(
        tuple(np.atleast_2d(np.asarray(W, dtype=np.float64)).copy() for W in weights),
        tuple(np.atleast_1d(np.asarray(b, dtype=np.float64)).copy() for b in biases),
        out.copy(),
        int(state_dim),
        int(action_dim),
    )


def init_net(state_dim: int, action_dim: int, widths: Sequence[int], n_out: int = 1,
             rng: np.random.Generator | int | None = None) -> ReluNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for every weight and bias."""
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    fan_in = state_dim + action_dim
    for w in widths:
        s = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(w, fan_in)))
        biases.append(rng.uniform(-s, s, size=w))
        fan_in = w
    s = 1.0 / np.sqrt(fan_in)
    out = rng.uniform(-s, s, size=(n_out, fan_in))
    return ReluNet(tuple(weights), tuple(biases), out, state_dim, action_dim)


def affine(Z: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``Z @ W.T + b`` with a batch-independent summation order."""
    return np.einsum("ij,bj->bi", W, Z) + b


def join_inputs(net: ReluNet, X, A=None) -> np.ndarray:
    """Stack state and action batches into network inputs of shape (B, n_in)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :] if net.state_dim else X.reshape(-1, 0)
    if net.action_dim:
        if A is None:
            raise ShapeError("action input required")
        A = np.asarray(A, dtype=np.float64)
        if A.ndim == 1:
            A = A[None, :]
        if net.state_dim == 0 and X.shape[0] != A.shape[0]:
            X = np.zeros((A.shape[0], 0))
        Z = np.concatenate([X, A], axis=1)
    else:
        Z = X
    if Z.shape[1] != net.n_in:
        raise ShapeError(f"input width {Z.shape[1]} != {net.n_in}")
    return Z


def preactivations(net: ReluNet, Z: np.ndarray) -> list[np.ndarray]:
    """Pre-activation arrays of every hidden layer for inputs ``Z`` (B, n_in)."""
    ys = []
    h = Z
    for W, b in zip(net.weights, net.biases):
        y = affine(h, W, b)
        ys.append(y)
        h = np.maximum(y, 0.0)
    return ys


def forward_batch(net: ReluNet, Z: np.ndarray) -> np.ndarray:
    """Network outputs (B, n_out) for stacked inputs."""
    h = Z
    for W, b in zip(net.weights, net.biases):
        h = np.maximum(affine(h, W, b), 0.0)
    return np.einsum("ij,bj->bi", net.out, h)


def q_values(net: ReluNet, X, A) -> np.ndarray:
    """Q(x_i, a_i) for a batch; returns shape (B,)."""
    return forward_batch(net, join_inputs(net, X, A))[:, 0]


def forward(net: ReluNet, x, a) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if x.size != net.state_dim or a.size != net.action_dim:
        raise ShapeError(f"expected ({net.state_dim}, {net.action_dim}) inputs, got ({x.size}, {a.size})")
    if net.n_out != 1:
        raise ShapeError("forward() needs a scalar network")
    return float(q_values(net, x[None, :], a[None, :])[0])


def act(net: ReluNet, X) -> np.ndarray:
    """Action-network output; a single state gives a single action vector."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    out = forward_batch(net, join_inputs(net, X))
    return out[0] if single else out


def backward_inputs(net: ReluNet, Z: np.ndarray, seed: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the outputs w.r.t. the inputs.

    ``seed`` has shape (B, n_out); returns (B, n_in). ReLU'(0) is taken as 0.
    """
    ys = preactivations(net, Z)
    g = np.einsum("bk,kj->bj", seed, net.out)
    for W, y in zip(reversed(net.weights), reversed(ys)):
        g = np.einsum("bi,ij->bj", g * (y > 0.0), W)
    return g


def grad_input_batch(net: ReluNet, X, A) -> tuple[np.ndarray, np.ndarray]:
    Z = join_inputs(net, X, A)
    g = backward_inputs(net, Z, np.ones((Z.shape[0], 1)))
    return g[:, :net.state_dim], g[:, net.state_dim:]


def grad_input(net: ReluNet, x, a) -> tuple[np.ndarray, np.ndarray]:
    """(dq/dx, dq/da) at a single point."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if x.size != net.state_dim or a.size != net.action_dim:
        raise ShapeError("input dimension mismatch")
    gx, ga = grad_input_batch(net, x[None, :], a[None, :])
    return gx[0], ga[0]


def grad_params(net: ReluNet, Z: np.ndarray, seed: np.ndarray) -> list[np.ndarray]:
    """Mean over the batch of ``sum_k seed[i, k] * d out_k(Z_i) / d theta``.

    ``seed`` holds per-example loss gradients w.r.t. the outputs, shape (B,)
    or (B, n_out). The result is ordered like ``net.params()``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ShapeError("grad_params needs a non-empty batch")
    seed = np.asarray(seed, dtype=np.float64).reshape(Z.shape[0], -1)
    if seed.shape[1] != net.n_out:
        raise ShapeError("seed width must equal the number of outputs")
    n = Z.shape[0]
    hs = [Z]
    ys = []
    for W, b in zip(net.weights, net.biases):
        y = affine(hs[-1], W, b)
        ys.append(y)
        hs.append(np.maximum(y, 0.0))
    k = len(net.weights)
    gW: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    g_out = np.einsum("bk,bj->kj", seed, hs[-1]) / n
    g = np.einsum("bk,kj->bj", seed, net.out)
    for layer in reversed(range(k)):
        g = g * (ys[layer] > 0.0)
        gb[layer] = g.sum(axis=0) / n
        gW[layer] = np.einsum("bi,bj->ij", g, hs[layer]) / n
        if layer:
            g = np.einsum("bi,ij->bj", g, net.weights[layer])
    grads: list[np.ndarray] = []
    for W_grad, b_grad in zip(gW, gb):
        grads += [W_grad, b_grad]
    grads.append(g_out)
    return grads


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, learning_rate, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam descent step. Returns new params and a new state."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and moments must align")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError("gradient shape mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.eps)


def save_checkpoint(net: ReluNet, path: str | Path) -> None:
    """Write the binary checkpoint format (see README, "Checkpoint format")."""
    k = len(net.weights)
    head = [MAGIC, struct.pack("<I", k)]
    for W in net.weights:
        head.append(struct.pack("<II", *W.shape))
    head.append(struct.pack("<III", net.n_out, net.state_dim, net.action_dim))
    body = []
    for W, b in zip(net.weights, net.biases):
        body.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        body.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body.append(np.ascontiguousarray(net.out, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(head + body))


def load_checkpoint(path: str | Path) -> ReluNet:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a CAQL1 checkpoint")
    pos = 5
    (k,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shapes = []
    for _ in range(k):
        shapes.append(struct.unpack_from("<II", data, pos))
        pos += 8
    n_out, state_dim, action_dim = struct.unpack_from("<III", data, pos)
    pos += 12

    def take(count):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    weights, biases = [], []
    for rows, cols in shapes:
        weights.append(take(rows * cols).reshape(rows, cols))
        biases.append(take(rows))
    width = shapes[-1][0]
    out = take(n_out * width).reshape(n_out, width)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return ReluNet(tuple(weights), tuple(biases), out, state_dim, action_dim)
