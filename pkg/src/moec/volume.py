"""Volumes: raw brick I/O, normalization, coordinate grids and sampling."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRAIN_RANGE = 100.0

SYNTHETIC_KINDS = ("two_material_sphere", "smooth_gradient", "band_limited")


class VolumeFormatError(ValueError):
    """Raw data does not match its sidecar description."""


@dataclass
class Volume:
    """A dense 3-D scalar grid.

    ``data`` holds intensities on the original scale, shape ``dims``.
    ``norm = (lo, hi)`` is the original range mapped onto ``[0, 100]``.
    """

    data: np.ndarray
    voxel_bits: int = 8
    norm: tuple[float, float] = field(default=(0.0, 1.0))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeFormatError(f"volume must be 3-D and non-empty, got {self.data.shape}")
        if self.voxel_bits not in (8, 16):
            raise VolumeFormatError(f"voxel_bits must be 8 or 16, got {self.voxel_bits}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        """Size of the source brick on disk."""
        return self.size * self.voxel_bits // 8

    @property
    def peak(self) -> float:
        lo, hi = self.norm
        return hi - lo

    def normalized(self) -> np.ndarray:
        lo, hi = self.norm
        return (self.data - lo) * (TRAIN_RANGE / (hi - lo))

    def flat_normalized(self) -> np.ndarray:
        return self.normalized().reshape(-1)


def norm_range(data: np.ndarray) -> tuple[float, float]:
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        log.warning("constant volume (value %g); normalization range forced to width 1", lo)
        hi = lo + 1.0
    return lo, hi


def from_array(data, voxel_bits: int = 8) -> Volume:
    data = np.asarray(data, dtype=np.float64)
    return Volume(data, voxel_bits, norm_range(data))


def denormalize(values: np.ndarray, norm: tuple[float, float]) -> np.ndarray:
    lo, hi = norm
    return np.asarray(values, dtype=np.float64) * ((hi - lo) / TRAIN_RANGE) + lo


def _dtype(voxel_bits: int, endianness: str) -> np.dtype:
    if endianness not in ("little", "big"):
        raise VolumeFormatError(f"unknown endianness {endianness!r}")
    order = "<" if endianness == "little" else ">"
    if voxel_bits == 8:
        return np.dtype(np.uint8)
    if voxel_bits == 16:
        return np.dtype(order + "u2")
    raise VolumeFormatError(f"voxel_bits must be 8 or 16, got {voxel_bits}")


def load_raw(path, dims, voxel_bits: int = 8, endianness: str = "little") -> Volume:
    dims = tuple(int(d) for d in dims)
    dt = _dtype(voxel_bits, endianness)
    raw = Path(path).read_bytes()
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"{path}: {len(raw)} bytes, expected {expected} for {dims}")
    data = np.frombuffer(raw, dtype=dt).reshape(dims).astype(np.float64)
    return Volume(data, voxel_bits, norm_range(data))


def to_integers(data: np.ndarray, voxel_bits: int) -> np.ndarray:
    top = (1 << voxel_bits) - 1
    return np.clip(np.rint(data), 0, top)


def save_raw(volume: Volume, path, endianness: str = "little") -> Path:
    """Write ``<path>`` (raw bytes) and the ``.json`` sidecar next to it."""
    path = Path(path)
    dt = _dtype(volume.voxel_bits, endianness)
    path.write_bytes(to_integers(volume.data, volume.voxel_bits).astype(dt).tobytes())
    sidecar = {"dims": list(volume.dims), "voxel_bits": volume.voxel_bits, "endianness": endianness}
    sidecar_path(path).write_text(json.dumps(sidecar))
    return path


def sidecar_path(raw_path) -> Path:
    return Path(raw_path).with_suffix(".json")


def load_with_sidecar(raw_path) -> Volume:
    meta = json.loads(sidecar_path(raw_path).read_text())
    return load_raw(raw_path, meta["dims"], meta.get("voxel_bits", 8), meta.get("endianness", "little"))


def _axis_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def grid_coord(flat_index, dims) -> np.ndarray:
    """Map flat (C-order) voxel indices to coordinates in ``[-1, 1]^3``.

    Accepts a scalar or an array of indices; returns shape ``(3,)`` or
    ``(len, 3)`` accordingly.
    """
    dims = tuple(int(d) for d in dims)
    idx = np.asarray(flat_index, dtype=np.int64)
    total = int(np.prod(dims))
    if np.any(idx < 0) or np.any(idx >= total):
        raise IndexError(f"flat index out of range for dims {dims}")
    ijk = np.unravel_index(idx, dims)
    out = np.stack(
        [
            (-1.0 + 2.0 * k / (n - 1)) if n > 1 else np.zeros_like(k, dtype=np.float64)
            for k, n in zip(ijk, dims)
        ],
        axis=-1,
    ).astype(np.float64)
    return out


def full_grid(dims) -> np.ndarray:
    """All grid coordinates in flat-index order, shape ``(H*W*D, 3)``."""
    axes = [_axis_coords(int(n)) for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass
class CoordBatch:
    coords: np.ndarray
    targets: np.ndarray
    flat_indices: np.ndarray


def sample_batch(volume: Volume, batch_size: int, rng: np.random.Generator,
                 targets: np.ndarray | None = None) -> CoordBatch:
    """Uniform sampling with replacement over the full grid.

    ``targets`` may carry the precomputed flat normalized intensities to avoid
    renormalizing every step.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(0, volume.size, size=batch_size)
    if targets is None:
        targets = volume.flat_normalized()
    return CoordBatch(grid_coord(idx, volume.dims), targets[idx], idx)


def _grid(dims):
    axes = [_axis_coords(int(n)) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def make_synthetic(kind: str, dims=(64, 64, 64), seed: int = 0, voxel_bits: int = 8,
                   components: int = 1) -> Volume:
    """Deterministic desk-scale test volumes.

    * ``two_material_sphere``: two intensity plateaus joined by a smooth shell.
    * ``smooth_gradient``: a monotone ramp along the first axis with a gentle
      cross-axis bend.
    * ``band_limited``: a mean level plus ``components`` low-frequency periodic
      cosines (integer wave vectors, so the DFT support is exactly
      ``2*components + 1`` bins before rounding).

    The sphere and the gradient span the middle 60% of the integer range. The
    band-limited field is a small (5%) modulation about mid-range, so its DC
    term dominates the spectrum.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 4:
        raise ValueError("synthetic volumes need every dim >= 4")
    rng = np.random.default_rng(seed)
    top = float((1 << voxel_bits) - 1)
    lo, hi = 0.2 * top, 0.8 * top
    x, y, z = _grid(dims)

    if kind == "two_material_sphere":
        center = rng.uniform(-0.15, 0.15, size=3)
        radius = rng.uniform(0.45, 0.55)
        r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
        shell = 0.12  # boundary width in normalized coordinates
        inside = 0.5 * (1.0 - np.tanh((r - radius) / (0.5 * shell)))
        data = lo + (hi - lo) * inside
    elif kind == "smooth_gradient":
        tilt = rng.uniform(0.05, 0.1)
        t = (x + 1.0) / 2.0 + tilt * (y * y + z * z) / 2.0
        t = (t - t.min()) / (t.max() - t.min())
        data = lo + (hi - lo) * t
    elif kind == "band_limited":
        if components < 1:
            raise ValueError("band_limited needs components >= 1")
        idx = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
        field_ = np.zeros(dims)
        for m in range(components):
            k = rng.integers(0, 3, size=3)
            k[rng.integers(0, 3)] = m + 1
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(2 * np.pi * kk * ii / n for kk, ii, n in zip(k, idx, dims))
            field_ += np.cos(arg + phase)
        field_ /= np.abs(field_).max()
        mid = 0.5 * (lo + hi)
        amp = 0.05 * (hi - lo)
        data = mid + amp * field_
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")

    data = to_integers(data, voxel_bits)
    return Volume(data, voxel_bits, norm_range(data))


def reconstruct_grid(predict, dims, norm, voxel_bits: int = 8, chunk_size: int = 65536,
                     threads: int | None = None) -> Volume:
    """Evaluate ``predict(coords) -> normalized values`` over every voxel.

    Chunks are evaluated in flat-index order (optionally on a thread pool) and
    concatenated in that order, so the result does not depend on chunking.
    """
    dims = tuple(int(d) for d in dims)
    total = int(np.prod(dims))
    chunk_size = max(1, int(chunk_size))
    starts = range(0, total, chunk_size)

    def run(start):
        idx = np.arange(start, min(start + chunk_size, total))
        return np.asarray(predict(grid_coord(idx, dims)), dtype=np.float64).reshape(-1)

    if threads is None:
        threads = int(os.environ.get("MOEC_THREADS", "1"))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    values = np.concatenate(parts).reshape(dims)
    return Volume(denormalize(values, norm), voxel_bits, tuple(norm))
