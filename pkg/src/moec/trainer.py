"""Adam training loop with exponential LR decay and a one-shot router freeze."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from moec import codec
from moec import model as mdl
from moec.volume import Volume, grid_coord

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 8192
    lr0: float = 5e-4
    # lr(steps) = lr0 * final_lr_ratio
    final_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_balance: float | None = None  # None -> ModelConfig.lambda_balance
    freeze_step: int | None = None  # None -> 75% of steps
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 1000

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.freeze_step is None:
            self.freeze_step = int(0.75 * self.steps)
        if not 0 <= self.freeze_step <= self.steps:
            raise ValueError("freeze_step must lie in [0, steps]")
        if not 0 < self.gamma <= 1:
            raise ValueError("decay factor must lie in (0, 1]")

    @property
    def gamma(self) -> float:
        return float(self.final_lr_ratio ** (1.0 / self.steps))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    # desk scale: 64^3 volumes
    "desk": dict(steps=20000, batch_size=8192),
    # 256^3 volumes
    "full": dict(steps=80000, batch_size=200000),
}


def lr_at(step: int, config: TrainConfig) -> float:
    if not 0 <= step <= config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    return config.lr0 * config.gamma ** step


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors) -> "AdamState":
        return cls([np.zeros_like(p) for p in tensors], [np.zeros_like(p) for p in tensors])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              skip: list[bool] | None = None) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place.

    Entries flagged in ``skip`` are left untouched, moments included.
    """
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient in tensor {i} (shape {g.shape}, "
                f"{int((~np.isfinite(g)).sum())} bad entries) at Adam step {state.t + 1}"
            )
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if skip is not None and skip[i]:
            continue
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    params: mdl.ModelParams
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    best_loss: float = float("inf")
    initial_loss: float | None = None
    bad_steps: int = 0
    log: list[dict] = field(default_factory=list)
    elapsed: float = 0.0


def new_state(model_config: mdl.ModelConfig, train_config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(train_config.seed)
    params = mdl.init_params(model_config, rng)
    return TrainState(params, AdamState.zeros_like(params.tensors()), rng)


def train(volume: Volume, model_config: mdl.ModelConfig, train_config: TrainConfig,
          state: TrainState | None = None, until: int | None = None,
          log_every: int = 1) -> TrainState:
    """Optimize ``L_d + lambda * L_b`` on batches sampled from ``volume``.

    Runs until ``until`` (default: ``train_config.steps``) and returns the
    state, which can be checkpointed and handed back to continue the run.
    One step is one Adam update on one freshly sampled batch.
    """
    if state is None:
        state = new_state(model_config, train_config)
    stop = train_config.steps if until is None else min(until, train_config.steps)
    lam = model_config.lambda_balance if train_config.lambda_balance is None else train_config.lambda_balance
    targets = volume.flat_normalized()
    params = state.params
    tensors = params.tensors()
    router_mask = params.router_tensor_mask()
    t0 = time.perf_counter()

    while state.step < stop:
        if state.step >= train_config.freeze_step and not params.router.frozen:
            params.router.freeze()
            log.info("router frozen at step %d", state.step)
        lr = lr_at(state.step, train_config)
        idx = state.rng.integers(0, volume.size, size=train_config.batch_size)
        coords = grid_coord(idx, volume.dims)
        res = mdl.loss_and_grads(params, model_config, coords, targets[idx], lam)
        if not np.isfinite(res.loss_d):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        adam_step(tensors, res.grads.tensors(), state.adam, lr, train_config.beta1,
                  train_config.beta2, train_config.eps,
                  skip=router_mask if params.router.frozen else None)

        if state.initial_loss is None:
            state.initial_loss = res.loss_d
        if res.loss_d > train_config.divergence_factor * state.initial_loss:
            state.bad_steps += 1
            if state.bad_steps >= train_config.divergence_patience:
                raise DivergenceError(
                    f"L_d above {train_config.divergence_factor}x its initial value for "
                    f"{state.bad_steps} consecutive steps (step {state.step})"
                )
        else:
            state.bad_steps = 0
        state.best_loss = min(state.best_loss, res.loss_d)

        if state.step % log_every == 0 or state.step == train_config.steps - 1:
            state.log.append({
                "step": state.step,
                "L_d": res.loss_d,
                "L_b": res.loss_b,
                "lr": lr,
                "drop_fraction": res.plan.drop_fraction,
                "counts": res.plan.counts.tolist(),
            })
        state.step += 1

    state.elapsed += time.perf_counter() - t0
    return state


def write_log(records: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1
_CK_HEAD = struct.Struct("<4sHII")


def save_checkpoint(state: TrainState, model_config: mdl.ModelConfig,
                    train_config: TrainConfig, path=None) -> bytes:
    """Serialize a resumable training state.

    The file is a raw-mode artifact (usable on its own for decompression)
    followed by an appendix holding float64 weights, Adam moments, the RNG
    state and the loss log, closed by a CRC32 over the whole file.
    """
    artifact = codec.pack_artifact(state.params, model_config, "raw",
                                   extra={"train": train_config.to_dict()})
    meta = {
        "train": train_config.to_dict(),
        "step": state.step,
        "adam_t": state.adam.t,
        "rng": state.rng.bit_generator.state,
        "best_loss": state.best_loss if np.isfinite(state.best_loss) else None,
        "initial_loss": state.initial_loss,
        "bad_steps": state.bad_steps,
        "frozen": state.params.router.frozen,
        "elapsed": state.elapsed,
        "log": state.log,
    }
    meta_b = json.dumps(meta, sort_keys=True).encode()
    arrays = state.params.tensors() + state.adam.m + state.adam.v
    blob = bytearray(artifact)
    blob += _CK_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(artifact), len(meta_b))
    blob += meta_b
    for a in arrays:
        blob += np.ascontiguousarray(a, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(blob))
    blob = bytes(blob)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_checkpoint(source, train_config: TrainConfig | None = None
                    ) -> tuple[TrainState, mdl.ModelConfig, TrainConfig]:
    """Restore a checkpoint written by :func:`save_checkpoint`.

    If ``train_config`` is given it must match the stored one (same seed in
    particular); resuming under different settings is refused.
    """
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    blob = bytes(blob)
    if len(blob) < 4 or zlib.crc32(blob[:-4]) != struct.unpack_from("<I", blob, len(blob) - 4)[0]:
        raise CheckpointError("checkpoint checksum mismatch")
    # the embedded artifact has no idea about the appendix, so find it first
    tail = _CK_HEAD.size
    idx = blob.rfind(CHECKPOINT_MAGIC)
    while idx >= 0:
        magic, version, art_len, meta_len = _CK_HEAD.unpack_from(blob, idx)
        if art_len == idx:
            break
        idx = blob.rfind(CHECKPOINT_MAGIC, 0, idx)
    if idx < 0:
        raise CheckpointError("not a checkpoint (no appendix)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        unpacked = codec.unpack_artifact(blob[:art_len])
    except codec.ArtifactError as exc:
        raise CheckpointError(f"embedded artifact is invalid: {exc}") from exc
    pos = idx + tail
    meta = json.loads(blob[pos : pos + meta_len])
    pos += meta_len

    stored = TrainConfig.from_dict(meta["train"])
    if train_config is not None:
        if train_config.seed != stored.seed:
            raise CheckpointError(
                f"seed mismatch: checkpoint has {stored.seed}, requested {train_config.seed}")
        if train_config.to_dict() != stored.to_dict():
            raise CheckpointError("training settings differ from the checkpoint")
    config = unpacked.config
    shapes = [t.shape for t in unpacked.params.tensors()]
    arrays = []
    for _ in range(3):
        for shp in shapes:
            n = int(np.prod(shp))
            arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
                          .astype(np.float64).reshape(shp))
            pos += 8 * n
    if pos != len(blob) - 4:
        raise CheckpointError("checkpoint length mismatch")
    k = len(shapes)
    params = mdl.ModelParams.from_tensors(config, arrays[:k])
    if meta["frozen"]:
        params.router.freeze()
    adam = AdamState(arrays[k : 2 * k], arrays[2 * k :], meta["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(
        params, adam, rng, meta["step"],
        float("inf") if meta["best_loss"] is None else meta["best_loss"],
        meta["initial_loss"], meta["bad_steps"], meta["log"], meta["elapsed"],
    )
    return state, config, stored
