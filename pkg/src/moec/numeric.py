"""Dense layer primitives with hand-written forward/backward passes.

Every forward returns ``(output, tape)``; the matching backward consumes the
tape. Arrays are float64 row-major numpy arrays (a "Matrix" is just a 2-D
ndarray here).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from moec._sincos import sincos


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


@dataclass
class LinearTape:
    x: np.ndarray
    W: np.ndarray


@dataclass
class SineTape:
    x: np.ndarray
    omega: float
    dsin: np.ndarray  # omega * cos(omega * x), cached for the backward pass


@dataclass
class ReluTape:
    x: np.ndarray


def _as2d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def linear_forward(x, W, b) -> tuple[np.ndarray, LinearTape]:
    x = _as2d(x, "x")
    W = _as2d(W, "W")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"x is {x.shape}, W is {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match W {W.shape}")
    y = x @ W
    y += b
    return y, LinearTape(x, W)


def linear_rowwise(x, W, b) -> np.ndarray:
    """``x @ W + b`` with a fixed per-row summation order.

    BLAS picks different kernels for different batch heights, so the same row
    can round differently depending on how many rows travel with it. This
    accumulates input columns one at a time, which makes every output row a
    function of its input row alone. Used for inference.
    """
    x = _as2d(x, "x")
    W = _as2d(W, "W")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"x is {x.shape}, W is {W.shape}")
    y = np.broadcast_to(np.asarray(b, dtype=np.float64), (x.shape[0], W.shape[1])).copy()
    for i in range(W.shape[0]):
        y += x[:, i : i + 1] * W[i]
    return y


def linear_backward(tape: LinearTape, dy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dW, db)``."""
    dy = _as2d(dy, "dy")
    if dy.shape != (tape.x.shape[0], tape.W.shape[1]):
        raise DimensionError(
            f"dy is {dy.shape}, expected {(tape.x.shape[0], tape.W.shape[1])}"
        )
    return dy @ tape.W.T, tape.x.T @ dy, dy.sum(axis=0)


def sine_forward(x, omega: float) -> tuple[np.ndarray, SineTape]:
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    x = np.asarray(x, dtype=np.float64)
    s, d = sincos(x, omega)
    return s, SineTape(x, float(omega), d)


def sine_backward(tape: SineTape, dy) -> np.ndarray:
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != tape.x.shape:
        raise DimensionError(f"dy is {dy.shape}, expected {tape.x.shape}")
    return dy * tape.dsin


def relu_forward(x) -> tuple[np.ndarray, ReluTape]:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), ReluTape(x)


def relu_backward(tape: ReluTape, dy) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != tape.x.shape:
        raise DimensionError(f"dy is {dy.shape}, expected {tape.x.shape}")
    return np.where(tape.x > 0, dy, 0.0)


def softmax_forward(logits) -> np.ndarray:
    z = _as2d(logits, "logits")
    if z.shape[1] < 1:
        raise DimensionError("softmax needs at least one column")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs, dy) -> np.ndarray:
    """Exact Jacobian-vector product of the row-wise softmax."""
    probs = _as2d(probs, "probs")
    dy = _as2d(dy, "dy")
    if dy.shape != probs.shape:
        raise DimensionError(f"dy is {dy.shape}, expected {probs.shape}")
    return probs * (dy - (dy * probs).sum(axis=1, keepdims=True))


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("mse_loss on an empty batch")
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / pred.size) * diff


def grad_check(
    f: Callable[[Sequence[np.ndarray]], float],
    grads: Callable[[Sequence[np.ndarray]], Sequence[np.ndarray]],
    point: Sequence[np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Compare analytic gradients against central differences.

    ``f`` maps a list of arrays to a scalar, ``grads`` maps the same list to
    the analytic gradient of each array. Every entry of every array is
    perturbed. Returns the worst per-array relative error
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``; the
    per-array scale keeps near-zero entries from dominating.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    point = [np.array(p, dtype=np.float64, copy=True) for p in point]
    analytic = [np.asarray(g, dtype=np.float64) for g in grads(point)]
    worst = 0.0
    for arr, ga in zip(point, analytic):
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(point)
            flat[i] = orig - epsilon
            fm = f(point)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * epsilon)
        scale = max(np.abs(ga).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ga - numeric).max(initial=0.0) / scale))
    return worst
