"""Gating network, top-k selection, capacity-limited dispatch and combine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from moec.numeric import (
    DimensionError,
    linear_backward,
    linear_forward,
    linear_rowwise,
    relu_backward,
    relu_forward,
    softmax_backward,
    softmax_forward,
)


class FrozenRouterError(RuntimeError):
    pass


@dataclass
class RouterParams:
    """Two ReLU'd ``F -> F`` layers followed by an ``F -> n`` softmax gate."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    frozen: bool = False

    @property
    def n_experts(self) -> int:
        return self.layers[-1][0].shape[1]

    def freeze(self) -> None:
        self.frozen = True

    def is_frozen(self) -> bool:
        return self.frozen

    def unfreeze(self) -> None:
        raise FrozenRouterError("a frozen router cannot be unfrozen")


def freeze(router: RouterParams) -> None:
    router.freeze()


def is_frozen(router: RouterParams) -> bool:
    return router.is_frozen()


@dataclass
class GateTape:
    linear_tapes: list
    relu_tapes: list
    probs: np.ndarray


def gate_forward(features, router: RouterParams) -> tuple[np.ndarray, GateTape]:
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != router.layers[0][0].shape[0]:
        raise DimensionError(f"router expects width {router.layers[0][0].shape[0]}, got {h.shape}")
    lin, rel = [], []
    for W, b in router.layers[:-1]:
        z, t = linear_forward(h, W, b)
        lin.append(t)
        h, r = relu_forward(z)
        rel.append(r)
    W, b = router.layers[-1]
    logits, t = linear_forward(h, W, b)
    lin.append(t)
    probs = softmax_forward(logits)
    return probs, GateTape(lin, rel, probs)


def gate_probs(features, router: RouterParams) -> np.ndarray:
    """Inference path with batch-independent rounding."""
    h = np.asarray(features, dtype=np.float64)
    for W, b in router.layers[:-1]:
        h = np.maximum(linear_rowwise(h, W, b), 0.0)
    W, b = router.layers[-1]
    return softmax_forward(linear_rowwise(h, W, b))


def gate_backward(tape: GateTape, dprobs) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Return ``(dfeatures, [(dW, db), ...])`` in layer order."""
    d = softmax_backward(tape.probs, dprobs)
    grads = []
    d, dW, db = linear_backward(tape.linear_tapes[-1], d)
    grads.append((dW, db))
    for lt, rt in zip(reversed(tape.linear_tapes[:-1]), reversed(tape.relu_tapes)):
        d = relu_backward(rt, d)
        d, dW, db = linear_backward(lt, d)
        grads.append((dW, db))
    grads.reverse()
    return d, grads


@dataclass
class Selection:
    expert_ids: np.ndarray  # (B, k) int
    gates: np.ndarray  # (B, k)
    probs: np.ndarray  # (B, n), kept for the backward pass


def top_k_select(probs, k: int) -> Selection:
    """Pick the ``k`` most probable experts per row.

    Ties go to the lower expert id. With ``k == 1`` the gate is the raw
    softmax value; with ``k > 1`` the selected values are renormalized to sum
    to one.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(probs, order, axis=1)
    if k > 1:
        picked = picked / picked.sum(axis=1, keepdims=True)
    return Selection(order, picked, probs)


def selection_backward(sel: Selection, dgates) -> np.ndarray:
    """Gradient of the selected gate values w.r.t. the full probability matrix."""
    dgates = np.asarray(dgates, dtype=np.float64)
    B, k = sel.expert_ids.shape
    dprobs = np.zeros_like(sel.probs)
    if k == 1:
        dsel = dgates
    else:
        raw = np.take_along_axis(sel.probs, sel.expert_ids, axis=1)
        total = raw.sum(axis=1, keepdims=True)
        dsel = (dgates - (dgates * sel.gates).sum(axis=1, keepdims=True)) / total
    np.put_along_axis(dprobs, sel.expert_ids, dsel, axis=1)
    return dprobs


@dataclass
class DispatchPlan:
    """Routing of one batch.

    ``slot_points[i]`` lists the points held by expert ``i`` in ascending
    point order, followed by ``-1`` padding up to ``capacity``.
    ``slot_choices`` records which of the point's ``k`` choices each slot is.
    """

    expert_ids: np.ndarray
    gates: np.ndarray
    kept: np.ndarray  # (B, k) bool
    capacity: int
    slot_points: np.ndarray  # (n, capacity)
    slot_choices: np.ndarray  # (n, capacity)
    counts: np.ndarray  # (n,) kept points per expert
    selection: Selection | None = field(default=None, repr=False)

    @property
    def batch_size(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def n_experts(self) -> int:
        return self.counts.shape[0]

    @property
    def top_k(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def dropped(self) -> int:
        return int((~self.kept).sum())

    @property
    def drop_fraction(self) -> float:
        return self.dropped / self.kept.size

    def kept_slots(self, expert: int) -> tuple[np.ndarray, np.ndarray]:
        c = int(self.counts[expert])
        return self.slot_points[expert, :c], self.slot_choices[expert, :c]


def expert_capacity(batch_size: int, n_experts: int, capacity_factor: float | None) -> int:
    if capacity_factor is None:
        return batch_size
    if not capacity_factor > 0:
        raise ValueError("capacity factor must be positive")
    # guard against 1.25 * 8 / 2 landing a hair above an integer
    return int(math.ceil(round(capacity_factor * batch_size / n_experts, 9)))


def build_dispatch(selection: Selection, n_experts: int,
                   capacity_factor: float | None = None) -> DispatchPlan:
    """Assign every (point, choice) pair to its expert under a capacity limit.

    ``capacity_factor=None`` means unlimited capacity (nothing dropped).
    Oversubscribed experts keep the largest gate values, ties resolved by
    lower point index then lower choice rank.
    """
    ids = np.asarray(selection.expert_ids)
    gates = np.asarray(selection.gates)
    B, k = ids.shape
    n = int(n_experts)
    cap = expert_capacity(B, n, capacity_factor)

    pts = np.repeat(np.arange(B), k)
    chs = np.tile(np.arange(k), B)
    exp = ids.reshape(-1)
    g = gates.reshape(-1)
    order = np.lexsort((chs, pts, -g, exp))
    exp_sorted = exp[order]
    starts = np.searchsorted(exp_sorted, np.arange(n))
    rank = np.arange(order.size) - starts[exp_sorted]
    keep_sorted = rank < cap

    kept = np.zeros(B * k, dtype=bool)
    kept[order[keep_sorted]] = True
    kept = kept.reshape(B, k)

    counts = np.bincount(exp[kept.reshape(-1)], minlength=n).astype(np.int64)
    slot_points = np.full((n, cap), -1, dtype=np.int64)
    slot_choices = np.full((n, cap), -1, dtype=np.int64)
    kp = kept.reshape(-1)
    # stable sort by expert keeps ascending point order within each expert
    flat = np.flatnonzero(kp)
    by_exp = flat[np.argsort(exp[flat], kind="stable")]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for e in range(n):
        sel = by_exp[offsets[e] : offsets[e + 1]]
        slot_points[e, : sel.size] = pts[sel]
        slot_choices[e, : sel.size] = chs[sel]
    return DispatchPlan(ids, gates, kept, cap, slot_points, slot_choices, counts, selection)


def dispatch(features, plan: DispatchPlan, expert: int, pad: bool = False) -> np.ndarray:
    """Gather the rows routed to ``expert``; ``pad=True`` zero-fills to capacity."""
    features = np.asarray(features, dtype=np.float64)
    pts, _ = plan.kept_slots(expert)
    rows = features[pts]
    if not pad:
        return rows
    out = np.zeros((plan.capacity, features.shape[1]))
    out[: rows.shape[0]] = rows
    return out


def combine(expert_outputs, plan: DispatchPlan) -> np.ndarray:
    """Gate-weighted sum of expert outputs per point.

    ``expert_outputs[i]`` holds one row per kept slot of expert ``i`` (extra
    padding rows are ignored). Contributions are summed in choice order; a
    point whose choices were all dropped gets a zero vector.
    """
    n = plan.n_experts
    if len(expert_outputs) != n:
        raise DimensionError(f"expected {n} expert outputs, got {len(expert_outputs)}")
    width = next((np.shape(y)[1] for y in expert_outputs if np.ndim(y) == 2), None)
    if width is None:
        raise DimensionError("expert outputs must be 2-D")
    B, k = plan.expert_ids.shape
    per_choice = np.zeros((k, B, width))
    weights = np.zeros((k, B))
    for e in range(n):
        pts, chs = plan.kept_slots(e)
        y = np.asarray(expert_outputs[e], dtype=np.float64)
        if y.shape[0] < pts.size or y.shape[1] != width:
            raise DimensionError(f"expert {e} output {y.shape} misaligned with {pts.size} slots")
        per_choice[chs, pts] = y[: pts.size]
        weights[chs, pts] = plan.gates[pts, chs]
    out = np.zeros((B, width))
    for j in range(k):
        out += weights[j][:, None] * per_choice[j]
    return out


def combine_backward(dout, expert_outputs, plan: DispatchPlan) -> tuple[list[np.ndarray], np.ndarray]:
    """Return per-expert output gradients and ``dgates`` of shape ``(B, k)``."""
    dout = np.asarray(dout, dtype=np.float64)
    dgates = np.zeros_like(plan.gates)
    dys = []
    for e in range(plan.n_experts):
        pts, chs = plan.kept_slots(e)
        y = np.asarray(expert_outputs[e], dtype=np.float64)[: pts.size]
        rows = dout[pts]
        dys.append(plan.gates[pts, chs][:, None] * rows)
        dgates[pts, chs] = (rows * y).sum(axis=1)
    return dys, dgates


def balancing_loss(plan: DispatchPlan, probs) -> tuple[float, np.ndarray]:
    """``n / B^2 * sum_i c_i * sum_x G(x)_i`` with counts held constant.

    Returns the loss and its gradient w.r.t. ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    B, n = probs.shape
    if B < 1:
        raise ValueError("empty batch")
    c = plan.counts.astype(np.float64)
    coef = n / (B * B)
    loss = coef * float(np.dot(c, probs.sum(axis=0)))
    return loss, np.broadcast_to(coef * c, probs.shape).copy()
