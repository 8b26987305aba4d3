"""Exact max-Q by mixed-integer programming over a ReLU network.

Each ReLU ``z = max(0, w.v + k)`` whose pre-activation range straddles zero
is encoded with a binary indicator and four linear inequalities (big-M
form); neurons whose range has a fixed sign are replaced by ``z = 0`` or
``z = w.v + k``. The model is solved by a best-bound branch and bound whose
node relaxations relax the indicators to [0, 1] and go through
:func:`caql.lp.solve_lp`.
"""
from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import BoxDomain, LayerBounds, layer_bounds
from .lp import ERROR, INFEASIBLE, LPError, LPResult, solve_lp
from .net import ReluNet, forward

OPTIMAL = "optimal"
GAP_LIMIT = "gap_limit"
TIME_LIMIT = "time_limit"
ITER_LIMIT = "iter_limit"
CONVERGED = "converged"

UNKNOWN_GAP = float("inf")


@dataclass
class MaxQSolution:
    value: float
    action: np.ndarray
    gap: float
    status: str
    nodes_or_iters: int
    elapsed: float


def big_m(w, b: float, lower, upper) -> tuple[float, float]:
    """Exact (min, max) of ``w.v + b`` over the box ``lower <= v <= upper``."""
    w = np.asarray(w, dtype=np.float64)
    lo_t = w * np.asarray(lower, dtype=np.float64)
    hi_t = w * np.asarray(upper, dtype=np.float64)
    return float(np.minimum(lo_t, hi_t).sum() + b), float(np.maximum(lo_t, hi_t).sum() + b)


@dataclass
class Neuron:
    layer: int
    index: int
    z: int
    zeta: int  # -1 when the neuron needs no indicator
    m_minus: float
    m_plus: float
    kind: str  # "unstable", "inactive" or "active"


@dataclass
class MipModel:
    names: list[str]
    col_lo: np.ndarray
    col_hi: np.ndarray
    A: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    row_names: list[str]
    objective: np.ndarray
    action_vars: np.ndarray
    neurons: list[Neuron] = field(default_factory=list)

    @property
    def binaries(self) -> np.ndarray:
        return np.array([n.zeta for n in self.neurons if n.zeta >= 0], dtype=np.int64)

    @property
    def n_binaries(self) -> int:
        return int(sum(n.zeta >= 0 for n in self.neurons))


def build_mip(net: ReluNet, x, box: BoxDomain, bounds: LayerBounds) -> MipModel:
    """Big-M model of ``max_a Q(x, a)`` over ``box`` using ``bounds`` for the M constants."""
    if net.n_out != 1:
        raise ValueError("max-Q needs a scalar network")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(bounds) != len(net.weights):
        raise ValueError("bounds do not match the network depth")
    for h, (lo, hi) in enumerate(zip(bounds.lower, bounds.upper)):
        if lo.shape != (net.weights[h].shape[0],) or np.any(lo > hi):
            raise ValueError(f"inconsistent bounds for hidden layer {h + 1}")

    ad = net.action_dim
    names = [f"a_{i}" for i in range(ad)]
    col_lo = [np.asarray(box.lower, dtype=np.float64)]
    col_hi = [np.asarray(box.upper, dtype=np.float64)]
    prev_lo, prev_hi = col_lo[0], col_hi[0]
    prev_start = 0
    n_cols = ad
    neurons: list[Neuron] = []
    eq_rows = []  # (layer, neuron indices, z start, prev start, Wv, const)
    unstable = []  # (layer, neuron indices, z start, prev start, Wv, const, m_lo, m_hi)
    layer_vars = []
    for h, (W, b) in enumerate(zip(net.weights, net.biases)):
        if h == 0:
            Wv = W[:, net.state_dim:]
            const = W[:, :net.state_dim] @ x + b
        else:
            Wv, const = W, b
        width = W.shape[0]
        lo_t, hi_t = Wv * prev_lo, Wv * prev_hi
        m_lo = np.maximum(np.minimum(lo_t, hi_t).sum(axis=1) + const, bounds.lower[h])
        m_hi = np.minimum(np.maximum(lo_t, hi_t).sum(axis=1) + const, bounds.upper[h])
        m_hi = np.maximum(m_hi, m_lo)
        inact = m_hi <= 0.0
        act = (m_lo >= 0.0) & ~inact
        unst = ~(inact | act)
        lo_c = np.where(act, m_lo, 0.0)
        hi_c = np.where(inact, 0.0, m_hi)
        names += [f"z_{h + 1}_{i}" for i in range(width)]
        kinds = np.where(inact, "inactive", np.where(act, "active", "unstable"))
        neurons += [Neuron(h, i, n_cols + i, -1, float(m_lo[i]), float(m_hi[i]), str(kinds[i]))
                    for i in range(width)]
        eq_rows.append((np.flatnonzero(act), n_cols, prev_start, Wv, const))
        idx = np.flatnonzero(unst)
        unstable.append((h, idx, n_cols, prev_start, Wv, const, m_lo, m_hi))
        col_lo.append(lo_c)
        col_hi.append(hi_c)
        layer_vars.append(np.arange(n_cols, n_cols + width))
        prev_lo, prev_hi, prev_start = lo_c, hi_c, n_cols
        n_cols += width

    n_z = n_cols
    n_unst = sum(u[1].size for u in unstable)
    n_cols += n_unst
    n_eq = sum(e[0].size for e in eq_rows)
    A = np.zeros((n_eq + 4 * n_unst, n_cols))
    row_lo = np.empty(A.shape[0])
    row_hi = np.empty(A.shape[0])
    row_names: list[str] = []
    r = 0
    for h, (idx, z0, p0, Wv, const) in enumerate(eq_rows):
        rows = r + np.arange(idx.size)
        A[rows, z0 + idx] = 1.0
        A[rows, p0:p0 + Wv.shape[1]] = -Wv[idx]
        row_lo[rows] = row_hi[rows] = const[idx]
        row_names += [f"eq_{h + 1}_{i}" for i in idx]
        r += idx.size
    zeta = n_z
    for h, idx, z0, p0, Wv, const, m_lo, m_hi in unstable:
        for i in idx:
            nrn = neurons[z0 - ad + i]
            nrn.zeta = zeta
            tag = f"{h + 1}_{i}"
            names.append(f"zeta_{tag}")
            zv, k = z0 + i, float(const[i])
            span = slice(p0, p0 + Wv.shape[1])
            A[r:r + 4, zv] = 1.0
            A[r, span] = A[r + 2, span] = -Wv[i]
            A[r + 2, zeta] = -nrn.m_minus
            A[r + 3, zeta] = -nrn.m_plus
            row_lo[r:r + 4] = (k, 0.0, -np.inf, -np.inf)
            row_hi[r:r + 4] = (np.inf, np.inf, k - nrn.m_minus, 0.0)
            row_names += [f"lin_{tag}", f"pos_{tag}", f"off_{tag}", f"on_{tag}"]
            r += 4
            zeta += 1
    objective = np.zeros(n_cols)
    objective[layer_vars[-1]] = net.c
    lo_all = np.concatenate(col_lo + [np.zeros(n_unst)])
    hi_all = np.concatenate(col_hi + [np.ones(n_unst)])
    return MipModel(names, lo_all, hi_all, A, row_lo, row_hi, row_names, objective,
                    np.arange(ad), neurons)


def lp_relaxation(model: MipModel, fixed: dict[int, int] | None = None,
                  col_bounds: tuple[np.ndarray, np.ndarray] | None = None) -> LPResult:
    """LP with every indicator relaxed to [0, 1] except those in ``fixed`` (var -> 0/1)."""
    lo, hi = (model.col_lo, model.col_hi) if col_bounds is None else col_bounds
    lo, hi = lo.copy(), hi.copy()
    for var, v in (fixed or {}).items():
        lo[var] = hi[var] = float(v)
    return solve_lp(model.objective, model.A, model.row_lo, model.row_hi, lo, hi)


class NodeFixer:
    """Column bounds implied by a set of fixed indicators.

    A fixed indicator pins the sign of its pre-activation. First-layer signs
    are linear constraints on the action and shrink the action box; interval
    arithmetic from the shrunk box and the pinned signs then narrows every
    post-activation column and fixes indicators whose neuron became stable.
    Only column bounds change, so the model rows stay valid.
    """

    def __init__(self, net: ReluNet, x, box: BoxDomain, bounds: LayerBounds, model: MipModel):
        self.box = box
        self.model = model
        W0 = net.weights[0]
        self.Wa = W0[:, net.state_dim:]
        self.k0 = W0[:, :net.state_dim] @ x + net.biases[0]
        self.split = [(np.maximum(self.Wa, 0.0), np.minimum(self.Wa, 0.0), self.k0)]
        self.split += [(np.maximum(W, 0.0), np.minimum(W, 0.0), b)
                       for W, b in zip(net.weights[1:], net.biases[1:])]
        self.root_lo = [np.asarray(l, dtype=np.float64) for l in bounds.lower]
        self.root_hi = [np.asarray(u, dtype=np.float64) for u in bounds.upper]
        self.layout = []  # per layer: (z vars, zeta vars or -1)
        per_layer: dict[int, list[Neuron]] = {}
        for n in model.neurons:
            per_layer.setdefault(n.layer, []).append(n)
        for h in sorted(per_layer):
            ns = sorted(per_layer[h], key=lambda n: n.index)
            self.layout.append((np.array([n.z for n in ns]), np.array([n.zeta for n in ns])))

    def _signs(self, fixed: dict[int, int]) -> list[np.ndarray]:
        """Per layer: +1 / -1 where the node pins a neuron's sign, else 0."""
        by_var = np.zeros(len(self.model.col_lo) + 1)  # last slot absorbs zeta == -1
        for var, v in fixed.items():
            by_var[var] = 1.0 if v else -1.0
        return [by_var[zetas] for _, zetas in self.layout]

    def __call__(self, fixed: dict[int, int]):
        """Return (col_lo, col_hi, implied fixings) or None if the node is empty."""
        lo_a, hi_a = self.box.lower.copy(), self.box.upper.copy()
        signs = self._signs(fixed)
        s0 = signs[0]
        rows = np.flatnonzero(s0)
        for _ in range(3):
            changed = False
            for i in rows:
                # s * (Wa a + k) >= 0, tighten each action coordinate
                w, k = s0[i] * self.Wa[i], s0[i] * self.k0[i]
                contrib_hi = np.maximum(w * lo_a, w * hi_a)
                total = contrib_hi.sum() + k
                for j in np.flatnonzero(w):
                    rest = total - contrib_hi[j]
                    bound = -rest / w[j]
                    if w[j] > 0 and bound > lo_a[j] + 1e-12:
                        lo_a[j] = bound
                        changed = True
                    elif w[j] < 0 and bound < hi_a[j] - 1e-12:
                        hi_a[j] = bound
                        changed = True
                if np.any(lo_a > hi_a + 1e-9):
                    return None
                hi_a = np.maximum(hi_a, lo_a)
            if not changed:
                break

        col_lo, col_hi = self.model.col_lo.copy(), self.model.col_hi.copy()
        col_lo[self.model.action_vars] = lo_a
        col_hi[self.model.action_vars] = hi_a
        implied: dict[int, int] = {}
        zl, zu = lo_a, hi_a
        for h, (pw, nw, b) in enumerate(self.split):
            lo = np.maximum(pw @ zl + nw @ zu + b, self.root_lo[h])
            hi = np.minimum(pw @ zu + nw @ zl + b, self.root_hi[h])
            s = signs[h]
            lo = np.where(s > 0, np.maximum(lo, 0.0), lo)
            hi = np.where(s < 0, np.minimum(hi, 0.0), hi)
            if np.any(lo > hi + 1e-9):
                return None
            hi = np.maximum(hi, lo)
            zl, zu = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
            zvars, zetas = self.layout[h]
            col_lo[zvars] = np.maximum(col_lo[zvars], zl)
            col_hi[zvars] = np.maximum(np.minimum(col_hi[zvars], zu), col_lo[zvars])
            free = (zetas >= 0) & (s == 0)
            for v in zetas[free & (hi <= 0.0)]:
                implied[int(v)] = 0
            for v in zetas[free & (lo >= 0.0)]:
                implied[int(v)] = 1
        return col_lo, col_hi, implied


def write_lp(model: MipModel, path: str | Path) -> None:
    """Dump the model in CPLEX-style LP text format."""

    def expr(coefs):
        parts = []
        for j in np.flatnonzero(coefs):
            v = coefs[j]
            parts.append(f"{'-' if v < 0 else '+'} {abs(v):.17g} {model.names[j]}")
        s = " ".join(parts) if parts else "0 " + model.names[0]
        return s[2:] if s.startswith("+ ") else s

    lines = ["\\ max-Q model", "Maximize", f" obj: {expr(model.objective)}", "Subject To"]
    for r, name in enumerate(model.row_names):
        lo, hi, e = model.row_lo[r], model.row_hi[r], expr(model.A[r])
        if lo == hi:
            lines.append(f" {name}: {e} = {lo:.17g}")
            continue
        if np.isfinite(lo):
            lines.append(f" {name}{'_lo' if np.isfinite(hi) else ''}: {e} >= {lo:.17g}")
        if np.isfinite(hi):
            lines.append(f" {name}{'_hi' if np.isfinite(lo) else ''}: {e} <= {hi:.17g}")
    lines.append("Bounds")
    for j, name in enumerate(model.names):
        lines.append(f" {model.col_lo[j]:.17g} <= {name} <= {model.col_hi[j]:.17g}")
    lines.append("Binaries")
    lines += [f" {model.names[j]}" for j in model.binaries]
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")


def _check(res: LPResult) -> LPResult:
    if res.status == ERROR:
        raise LPError("LP relaxation failed numerically")
    return res


def solve_maxq_mip(net: ReluNet, x, box: BoxDomain, gap_tol: float = 1e-4,
                   time_limit: float = 60.0, node_limit: int | None = None,
                   tighten: bool = True, bounds: LayerBounds | None = None,
                   relative_gap: bool = False, node_callback=None) -> MaxQSolution:
    """Globally maximize ``Q(x, .)`` over ``box`` by branch and bound.

    Nodes are expanded best-bound first; the branching variable is the most
    fractional indicator (lowest index on ties). Each node also tries two
    incumbents: the relaxation's action itself, and the LP restricted to the
    rounded activation pattern. With ``relative_gap`` the stopping gap is
    ``gap_tol * max(1, |incumbent|)``. ``node_callback(fixed, col_lo, col_hi,
    result)`` is invoked for every solved node relaxation (for inspection).
    """
    if gap_tol <= 0:
        raise ValueError("gap_tol must be positive")
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if bounds is None:
        bounds = layer_bounds(net, x, box, tighten=tighten)
    model = build_mip(net, x, box, bounds)
    zetas = model.binaries
    acts = model.action_vars

    best_val, best_act = -np.inf, None
    tried: set[bytes] = set()

    def offer(a):
        nonlocal best_val, best_act
        a = box.clip(a)
        v = forward(net, x, a)
        if v > best_val:
            best_val, best_act = v, a

    def tol():
        return gap_tol * max(1.0, abs(best_val)) if relative_gap and np.isfinite(best_val) else gap_tol

    def heuristics(res: LPResult):
        offer(res.x[acts])
        if not len(zetas):
            return
        pattern = np.rint(res.x[zetas]).astype(np.int8)
        key = pattern.tobytes()
        if key in tried:
            return
        tried.add(key)
        r = _check(lp_relaxation(model, {int(v): int(p) for v, p in zip(zetas, pattern)}))
        if r.status != INFEASIBLE:
            offer(r.x[acts])

    fixer = NodeFixer(net, x, box, bounds, model)
    root = _check(lp_relaxation(model))
    if root.status == INFEASIBLE:
        raise LPError("root relaxation infeasible; the box always yields a feasible point")
    if node_callback is not None:
        node_callback({}, model.col_lo, model.col_hi, root)
    heuristics(root)
    nodes = 1
    if not len(zetas):
        return MaxQSolution(best_val, best_act, max(0.0, root.objective - best_val), OPTIMAL, 1,
                            time.perf_counter() - t0)

    counter = 0
    heap = [(-root.objective, counter, {}, root)]
    pruned_max = -np.inf
    status = OPTIMAL
    while heap:
        if heap[0][0] * -1 <= best_val + tol():
            break
        if time.perf_counter() - t0 > time_limit:
            status = TIME_LIMIT
            break
        if node_limit is not None and nodes >= node_limit:
            status = ITER_LIMIT
            break
        neg_bound, _, fixed, res = heapq.heappop(heap)
        frac = np.abs(res.x[zetas] - 0.5)
        free = np.array([int(v) not in fixed for v in zetas])
        frac = np.where(free & (np.abs(res.x[zetas] - np.rint(res.x[zetas])) > 1e-7), frac, np.inf)
        k = int(np.argmin(frac))
        if not np.isfinite(frac[k]):
            # integral relaxation: its action is optimal inside this node
            offer(res.x[acts])
            pruned_max = max(pruned_max, -neg_bound)
            continue
        var = int(zetas[k])
        for v in (0, 1):
            child = {**fixed, var: v}
            nodes += 1
            prop = fixer(child)
            if prop is None:
                continue
            col_lo, col_hi, implied = prop
            child.update(implied)
            r = _check(lp_relaxation(model, child, (col_lo, col_hi)))
            if node_callback is not None:
                node_callback(child, col_lo, col_hi, r)
            if r.status == INFEASIBLE:
                continue
            heuristics(r)
            if r.objective <= best_val + tol():
                pruned_max = max(pruned_max, r.objective)
                continue
            counter += 1
            heapq.heappush(heap, (-r.objective, counter, child, r))

    if best_act is None:
        raise LPError("no feasible incumbent found")
    upper = max([best_val, pruned_max] + [-h[0] for h in heap])
    gap = max(0.0, upper - best_val)
    return MaxQSolution(best_val, best_act, gap, status, nodes, time.perf_counter() - t0)
