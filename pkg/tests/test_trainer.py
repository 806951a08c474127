from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest

from moec import codec
from moec import model as mdl
from moec import trainer as tr
from moec import volume as vl


@pytest.fixture(scope="module")
def tiny():
    v = vl.make_synthetic("two_material_sphere", (12, 12, 12))
    cfg = mdl.ModelConfig(width=6, dims=v.dims, norm=v.norm)
    return v, cfg


def test_lr_schedule_endpoints():
    cfg = tr.TrainConfig(steps=1000, lr0=5e-4)
    assert tr.lr_at(0, cfg) == 5e-4
    assert tr.lr_at(1000, cfg) == pytest.approx(5e-5, rel=1e-12)
    assert tr.lr_at(500, cfg) == pytest.approx(5e-4 * np.sqrt(0.1), rel=1e-12)
    with pytest.raises(ValueError):
        tr.lr_at(1001, cfg)


def test_freeze_defaults_to_three_quarters():
    assert tr.TrainConfig(steps=20000).freeze_step == 15000
    assert tr.TrainConfig(steps=10, freeze_step=0).freeze_step == 0
    with pytest.raises(ValueError):
        tr.TrainConfig(steps=10, freeze_step=11)


def naive_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_adam_matches_scalar_reference(rng):
    grads = rng.normal(size=5)
    p = [np.array([0.3])]
    state = tr.AdamState.zeros_like(p)
    ref = naive_adam(0.3, grads, 1e-2)
    for g, expect in zip(grads, ref):
        tr.adam_step(p, [np.array([g])], state, 1e-2)
        assert p[0][0] == pytest.approx(expect, rel=1e-14)
    # first step moves every coordinate by ~lr regardless of gradient scale
    q = [np.zeros(3)]
    tr.adam_step(q, [np.array([1e-3, 5.0, -200.0])], tr.AdamState.zeros_like(q), 0.1)
    np.testing.assert_allclose(q[0], [-0.1, -0.1, 0.1], rtol=1e-4)


def test_adam_skip_leaves_tensor_and_moments(rng):
    p = [np.ones(2), np.ones(2)]
    state = tr.AdamState.zeros_like(p)
    tr.adam_step(p, [np.ones(2), np.ones(2)], state, 0.1, skip=[True, False])
    np.testing.assert_array_equal(p[0], 1.0)
    np.testing.assert_array_equal(state.m[0], 0.0)
    assert np.all(p[1] < 1.0)


def test_adam_rejects_nan_gradient():
    p = [np.zeros(2)]
    with pytest.raises(FloatingPointError, match="tensor 0"):
        tr.adam_step(p, [np.array([0.0, np.nan])], tr.AdamState.zeros_like(p), 0.1)


def test_training_reduces_loss(tiny):
    v, cfg = tiny
    st = tr.train(v, cfg, tr.TrainConfig(steps=300, batch_size=512), log_every=50)
    assert st.log[-1]["L_d"] < 0.5 * st.log[0]["L_d"]
    assert [r["step"] for r in st.log] == [0, 50, 100, 150, 200, 250, 299]
    assert set(st.log[0]) == {"step", "L_d", "L_b", "lr", "drop_fraction", "counts"}


def test_router_freezes_and_stops_moving(tiny):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=60, batch_size=128, freeze_step=30)
    st = tr.train(v, cfg, tc, until=30)
    assert not st.params.router.frozen
    before = [a.copy() for W, b in st.params.router.layers for a in (W, b)]
    st = tr.train(v, cfg, tc, state=st)
    assert st.params.router.frozen
    after = [a for W, b in st.params.router.layers for a in (W, b)]
    assert all(np.array_equal(x, y) for x, y in zip(before, after))


def test_training_is_deterministic(tiny):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=40, batch_size=256)
    a = tr.train(v, cfg, tc)
    b = tr.train(v, cfg, tc)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.tensors(), b.params.tensors()))


def test_divergence_guard(tiny):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=200, batch_size=64, lr0=50.0, divergence_factor=1.5,
                        divergence_patience=5)
    with pytest.raises((tr.DivergenceError, FloatingPointError)):
        tr.train(v, cfg, tc)


def test_checkpoint_resume_is_bit_identical(tiny, tmp_path):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=80, batch_size=256, freeze_step=50)
    straight = tr.train(v, cfg, tc, log_every=7)
    part = tr.train(v, cfg, tc, until=60, log_every=7)
    path = tmp_path / "run.ckpt"
    tr.save_checkpoint(part, cfg, tc, path)
    state, cfg2, tc2 = tr.load_checkpoint(path, tc)
    assert cfg2 == cfg and tc2 == tc and state.params.router.frozen
    resumed = tr.train(v, cfg2, tc2, state=state, log_every=7)
    assert all(np.array_equal(x, y) for x, y in zip(straight.params.tensors(), resumed.params.tensors()))
    assert straight.log == resumed.log


def test_checkpoint_rejects_other_seed_and_corruption(tiny):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=10, batch_size=32)
    blob = tr.save_checkpoint(tr.train(v, cfg, tc, until=5), cfg, tc)
    with pytest.raises(tr.CheckpointError, match="seed"):
        tr.load_checkpoint(blob, tr.TrainConfig(steps=10, batch_size=32, seed=1))
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 0xFF
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(bytes(bad))


def test_checkpoint_version_is_checked(tiny):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=4, batch_size=16)
    blob = bytearray(tr.save_checkpoint(tr.train(v, cfg, tc, until=2), cfg, tc))
    idx = blob.rfind(tr.CHECKPOINT_MAGIC)
    blob[idx + 4] = 99
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    with pytest.raises(tr.CheckpointError, match="version"):
        tr.load_checkpoint(bytes(blob))


def test_checkpoint_is_a_valid_artifact_prefix(tiny):
    v, cfg = tiny
    tc = tr.TrainConfig(steps=4, batch_size=16)
    st = tr.train(v, cfg, tc)
    blob = tr.save_checkpoint(st, cfg, tc)
    art = codec.pack_artifact(st.params, cfg, "raw", extra={"train": tc.to_dict()})
    assert blob.startswith(art)


def test_log_round_trip(tmp_path):
    recs = [{"step": 0, "L_d": 1.5, "counts": [1, 2]}, {"step": 1, "L_d": 1.25, "counts": [2, 1]}]
    assert tr.read_log(tr.write_log(recs, tmp_path / "log.jsonl")) == recs
