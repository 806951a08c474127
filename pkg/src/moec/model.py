"""Shared encoder -> routed sine experts -> shared decoder, and its size budget."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from moec import router as rt
from moec._sincos import sin as fast_sin
from moec.numeric import (
    linear_backward,
    linear_forward,
    linear_rowwise,
    mse_loss,
    sine_backward,
    sine_forward,
)

BYTES_PER_WEIGHT = 4


class BudgetError(ValueError):
    """The requested ratio leaves no room for even a width-1 network."""


@dataclass
class ModelConfig:
    n_experts: int = 2
    top_k: int = 1
    width: int = 8
    expert_depth: int = 5
    encoder_depth: int = 2
    decoder_depth: int = 1
    omega: float = 30.0
    lambda_balance: float = 10.0
    capacity_factor: float | None = 1.25
    norm: tuple[float, float] = (0.0, 1.0)
    dims: tuple[int, int, int] = (1, 1, 1)
    voxel_bits: int = 8
    # fixed affine map from the last linear layer to the [0, 100] training range
    output_scale: float = 50.0
    output_shift: float = 50.0
    preset: str = "default"

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must be in [1, n_experts]")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.encoder_depth < 1 or self.expert_depth < 0 or self.decoder_depth < 0:
            raise ValueError("invalid depths")
        self.norm = tuple(float(v) for v in self.norm)
        self.dims = tuple(int(v) for v in self.dims)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["norm"] = list(self.norm)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# Expert depth: 5 hidden sine layers + final linear is the default; the
# "seven_fc" preset uses 6 sine layers + final linear (7 fully connected).
PRESETS = {
    "default": dict(expert_depth=5, encoder_depth=2, decoder_depth=1),
    "seven_fc": dict(expert_depth=6, encoder_depth=2, decoder_depth=1),
}

Layer = tuple[np.ndarray, np.ndarray]


@dataclass
class ModelParams:
    encoder: list[Layer]
    router: rt.RouterParams
    experts: list[list[Layer]]
    decoder: list[Layer]

    def layers(self) -> Iterator[tuple[str, Layer]]:
        """All layers in canonical (serialization) order."""
        for i, l in enumerate(self.encoder):
            yield f"enc.{i}", l
        for i, l in enumerate(self.router.layers):
            yield f"gate.{i}", l
        for e, ex in enumerate(self.experts):
            for i, l in enumerate(ex):
                yield f"exp{e}.{i}", l
        for i, l in enumerate(self.decoder):
            yield f"dec.{i}", l

    def tensors(self) -> list[np.ndarray]:
        out = []
        for _, (W, b) in self.layers():
            out.extend((W, b))
        return out

    def router_tensor_mask(self) -> list[bool]:
        return [name.startswith("gate.") for name, _ in self.layers() for _ in range(2)]

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "ModelParams":
        cp = lambda ls: [(W.copy(), b.copy()) for W, b in ls]
        return ModelParams(
            cp(self.encoder),
            rt.RouterParams(cp(self.router.layers), self.router.frozen),
            [cp(ex) for ex in self.experts],
            cp(self.decoder),
        )

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: list[np.ndarray]) -> "ModelParams":
        shapes = layer_shapes(config)
        if len(tensors) != 2 * len(shapes):
            raise ValueError(f"expected {2 * len(shapes)} tensors, got {len(tensors)}")
        layers = []
        for i, (_, (fi, fo)) in enumerate(shapes):
            W = np.asarray(tensors[2 * i], dtype=np.float64).reshape(fi, fo)
            b = np.asarray(tensors[2 * i + 1], dtype=np.float64).reshape(fo)
            layers.append((W, b))
        return _assemble(config, layers)


def layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    F, n = config.width, config.n_experts
    shapes = [("enc.0", (3, F))]
    shapes += [(f"enc.{i}", (F, F)) for i in range(1, config.encoder_depth)]
    shapes += [("gate.0", (F, F)), ("gate.1", (F, F)), ("gate.2", (F, n))]
    for e in range(n):
        shapes += [(f"exp{e}.{i}", (F, F)) for i in range(config.expert_depth + 1)]
    shapes += [(f"dec.{i}", (F, F)) for i in range(config.decoder_depth)]
    shapes += [(f"dec.{config.decoder_depth}", (F, 1))]
    return shapes


def _assemble(config: ModelConfig, layers: list[Layer]) -> ModelParams:
    it = iter(layers)
    take = lambda m: [next(it) for _ in range(m)]
    enc = take(config.encoder_depth)
    gate = rt.RouterParams(take(3))
    experts = [take(config.expert_depth + 1) for _ in range(config.n_experts)]
    dec = take(config.decoder_depth + 1)
    return ModelParams(enc, gate, experts, dec)


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count."""
    return sum(fi * fo + fo for _, (fi, fo) in layer_shapes(config))


def budget_params(dims, voxel_bits: int, ratio: float) -> int:
    """Largest weight count whose 4-byte serialization meets ``ratio``.

    Header bytes are not charged against the budget.
    """
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    total_bytes = int(np.prod([int(d) for d in dims])) * voxel_bits // 8
    budget = int(total_bytes / ratio / BYTES_PER_WEIGHT)
    if budget < 1:
        raise BudgetError(f"ratio {ratio} leaves {total_bytes / ratio:.1f} bytes, below one weight")
    return budget


def solve_width(max_params: int, config: ModelConfig) -> int:
    """Largest width whose parameter count fits ``max_params`` (integer bisection)."""
    count = lambda F: param_count(config.replace(width=F))
    if count(1) > max_params:
        raise BudgetError(f"budget {max_params} is below the width-1 network ({count(1)} params)")
    lo, hi = 1, 2
    while count(hi) <= max_params:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) <= max_params:
            lo = mid
        else:
            hi = mid
    return lo


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Sinusoidal-network initialization, zero biases.

    The first encoder layer draws from ``U(-1/in, 1/in)``; every layer fed by a
    sine activation draws from ``U(-sqrt(6/in)/omega, sqrt(6/in)/omega)``.
    Router layers use ``U(-1/sqrt(in), 1/sqrt(in))``.
    """
    layers = []
    for name, (fi, fo) in layer_shapes(config):
        if name == "enc.0":
            bound = 1.0 / fi
        elif name.startswith("gate."):
            bound = 1.0 / np.sqrt(fi)
        else:
            bound = np.sqrt(6.0 / fi) / config.omega
        layers.append((rng.uniform(-bound, bound, size=(fi, fo)), np.zeros(fo)))
    return _assemble(config, layers)


def build_model(dims, voxel_bits: int, ratio: float, norm=(0.0, 1.0), preset: str = "default",
                **overrides) -> ModelConfig:
    """Config whose width is solved from the compression ratio."""
    base = ModelConfig(dims=tuple(dims), voxel_bits=voxel_bits, norm=tuple(norm), preset=preset,
                       **PRESETS[preset], **overrides)
    width = solve_width(budget_params(dims, voxel_bits, ratio), base)
    return base.replace(width=width)


# --------------------------------------------------------------------------
# forward / backward


def _sine_stack_forward(h, layers, omega, tapes):
    for W, b in layers:
        z, lt = linear_forward(h, W, b)
        h, st = sine_forward(z, omega)
        tapes.append((lt, st))
    return h


def _sine_stack_backward(d, tapes, grads):
    for lt, st in reversed(tapes):
        d = sine_backward(st, d)
        d, dW, db = linear_backward(lt, d)
        grads.append((dW, db))
    grads.reverse()
    return d


def _expert_forward(x, layers, omega):
    tapes = []
    h = _sine_stack_forward(x, layers[:-1], omega, tapes)
    y, lt = linear_forward(h, *layers[-1])
    return y, (tapes, lt)


def _expert_backward(dy, tape):
    tapes, lt = tape
    d, dW, db = linear_backward(lt, dy)
    grads = []
    d = _sine_stack_backward(d, tapes, grads)
    return d, grads + [(dW, db)]


@dataclass
class Taps:
    enc_tapes: list
    gate_tape: rt.GateTape
    plan: rt.DispatchPlan
    expert_tapes: list
    expert_outputs: list
    dec_tapes: list
    out_tape: object
    features: np.ndarray


def forward(coords, params: ModelParams, config: ModelConfig,
            training: bool = True) -> tuple[np.ndarray, Taps]:
    """Differentiable forward pass.

    ``training=True`` enforces expert capacity; ``training=False`` routes every
    point to its dense top-k choice. Returns predictions on the normalized
    [0, 100] scale.
    """
    coords = np.asarray(coords, dtype=np.float64)
    enc_tapes = []
    feat = _sine_stack_forward(coords, params.encoder, config.omega, enc_tapes)
    probs, gtape = rt.gate_forward(feat, params.router)
    sel = rt.top_k_select(probs, config.top_k)
    plan = rt.build_dispatch(sel, config.n_experts, config.capacity_factor if training else None)
    ys, etapes = [], []
    for e, layers in enumerate(params.experts):
        x = rt.dispatch(feat, plan, e)
        y, t = _expert_forward(x, layers, config.omega)
        ys.append(y)
        etapes.append(t)
    mixed = rt.combine(ys, plan)
    dec_tapes = []
    h = _sine_stack_forward(mixed, params.decoder[:-1], config.omega, dec_tapes)
    out, otape = linear_forward(h, *params.decoder[-1])
    pred = config.output_shift + config.output_scale * out[:, 0]
    return pred, Taps(enc_tapes, gtape, plan, etapes, ys, dec_tapes, otape, feat)


def backward(taps: Taps, dpred, params: ModelParams, config: ModelConfig,
             lambda_balance: float | None = None) -> tuple[ModelParams, float]:
    """Gradients of ``L_d + lambda * L_b`` given ``dL_d/dpred``.

    Returns ``(grads, L_b)``; ``grads`` mirrors ``params``. A frozen router
    gets all-zero gradients (its gate values still pass gradient to the
    encoder).
    """
    lam = config.lambda_balance if lambda_balance is None else lambda_balance
    plan = taps.plan
    dpred = np.asarray(dpred, dtype=np.float64).reshape(-1, 1)
    dh, dWo, dbo = linear_backward(taps.out_tape, config.output_scale * dpred)
    dec_grads = []
    dmixed = _sine_stack_backward(dh, taps.dec_tapes, dec_grads)
    dec_grads.append((dWo, dbo))

    dys, dgates = rt.combine_backward(dmixed, taps.expert_outputs, plan)
    dfeat = np.zeros_like(taps.features)
    exp_grads = []
    for e in range(config.n_experts):
        dx, g = _expert_backward(dys[e], taps.expert_tapes[e])
        pts, _ = plan.kept_slots(e)
        dfeat[pts] += dx
        exp_grads.append(g)

    lb, dlb = rt.balancing_loss(plan, taps.gate_tape.probs)
    dprobs = rt.selection_backward(plan.selection, dgates) + lam * dlb
    dfeat_gate, gate_grads = rt.gate_backward(taps.gate_tape, dprobs)
    dfeat += dfeat_gate
    if params.router.frozen:
        gate_grads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.router.layers]

    enc_grads = []
    _sine_stack_backward(dfeat, taps.enc_tapes, enc_grads)
    grads = ModelParams(enc_grads, rt.RouterParams(gate_grads), exp_grads, dec_grads)
    return grads, lb


@dataclass
class StepResult:
    loss_d: float
    loss_b: float
    grads: ModelParams
    plan: rt.DispatchPlan = field(repr=False)


def loss_and_grads(params: ModelParams, config: ModelConfig, coords, targets,
                   lambda_balance: float | None = None) -> StepResult:
    pred, taps = forward(coords, params, config, training=True)
    ld, dpred = mse_loss(pred, targets)
    grads, lb = backward(taps, dpred, params, config, lambda_balance)
    return StepResult(ld, lb, grads, taps.plan)


def total_loss(params: ModelParams, config: ModelConfig, coords, targets,
               lambda_balance: float | None = None) -> float:
    """``L_d + lambda * L_b`` with routing decided by the current parameters."""
    lam = config.lambda_balance if lambda_balance is None else lambda_balance
    pred, taps = forward(coords, params, config, training=True)
    ld, _ = mse_loss(pred, targets)
    lb, _ = rt.balancing_loss(taps.plan, taps.gate_tape.probs)
    return ld + lam * lb


def _sine_stack_rowwise(h, layers, omega):
    for W, b in layers:
        h = fast_sin(linear_rowwise(h, W, b), omega)
    return h


def encode(coords, params: ModelParams, config: ModelConfig) -> np.ndarray:
    return _sine_stack_rowwise(np.asarray(coords, dtype=np.float64), params.encoder, config.omega)


def route(coords, params: ModelParams, config: ModelConfig) -> rt.DispatchPlan:
    """Inference routing (dense top-k, no capacity limit)."""
    feat = encode(coords, params, config)
    sel = rt.top_k_select(rt.gate_probs(feat, params.router), config.top_k)
    return rt.build_dispatch(sel, config.n_experts, None)


def predict(coords, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Deterministic inference; each output row depends only on its input row."""
    feat = encode(coords, params, config)
    sel = rt.top_k_select(rt.gate_probs(feat, params.router), config.top_k)
    plan = rt.build_dispatch(sel, config.n_experts, None)
    ys = []
    for e, layers in enumerate(params.experts):
        h = _sine_stack_rowwise(rt.dispatch(feat, plan, e), layers[:-1], config.omega)
        ys.append(linear_rowwise(h, *layers[-1]))
    mixed = rt.combine(ys, plan)
    h = _sine_stack_rowwise(mixed, params.decoder[:-1], config.omega)
    out = linear_rowwise(h, *params.decoder[-1])
    return config.output_shift + config.output_scale * out[:, 0]
