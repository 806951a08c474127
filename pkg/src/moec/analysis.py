"""Fidelity metrics, spectrum concentration and run reports.

Metrics take arrays on the original intensity scale; ``peak`` is the
intensity range of the source (``Volume.peak``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from moec import model as mdl
from moec.volume import Volume, full_grid


class ShapeMismatchError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, Volume) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Volume) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a, b, peak: float = 100.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _box_sum(x: np.ndarray, w: int) -> np.ndarray:
    # separable sliding-window sum over valid positions
    for axis in range(x.ndim):
        c = np.cumsum(x, axis=axis)
        zero = np.zeros_like(np.take(c, [0], axis=axis))
        c = np.concatenate([zero, c], axis=axis)
        n = x.shape[axis]
        x = np.take(c, np.arange(w, n + 1), axis=axis) - np.take(c, np.arange(0, n - w + 1), axis=axis)
    return x


def ssim3d(a, b, window: int = 7, K1: float = 0.01, K2: float = 0.03,
           peak: float = 100.0) -> float:
    """Mean SSIM over every fully contained ``window``-cube.

    Local statistics use uniform weights and population (1/N) moments.
    """
    a, b = _pair(a, b)
    if a.ndim != 3:
        raise ShapeMismatchError("ssim3d expects 3-D inputs")
    if min(a.shape) < window:
        raise ShapeMismatchError(f"every dim must be >= window ({window}), got {a.shape}")
    # centering keeps the second moments well conditioned
    shift = 0.5 * (a.mean() + b.mean())
    a = a - shift
    b = b - shift
    n = float(window ** 3)
    mu_a = _box_sum(a, window) / n
    mu_b = _box_sum(b, window) / n
    var_a = _box_sum(a * a, window) / n - mu_a * mu_a
    var_b = _box_sum(b * b, window) / n - mu_b * mu_b
    cov = _box_sum(a * b, window) / n - mu_a * mu_b
    # the luminance term needs the uncentered means
    ma, mb = mu_a + shift, mu_b + shift
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
    return float(s.mean())


# --------------------------------------------------------------------------
# spectrum


@dataclass
class Spectrum:
    """Unnormalized forward DFT of a volume."""

    values: np.ndarray
    magnitudes: np.ndarray = field(init=False, repr=False)  # sorted descending

    def __post_init__(self):
        self.magnitudes = np.sort(np.abs(self.values).ravel())[::-1]

    @property
    def size(self) -> int:
        return int(self.values.size)


def _dft_last(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n)
    W = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ W


def _fft_last(x: np.ndarray) -> np.ndarray:
    """Transform along the last axis; radix-2 splits, direct DFT on odd lengths."""
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    if n % 2:
        return _dft_last(x)
    even = _fft_last(x[..., 0::2])
    odd = _fft_last(x[..., 1::2])
    tw = np.exp(-2j * np.pi * np.arange(n // 2) / n) * odd
    return np.concatenate([even + tw, even - tw], axis=-1)


def fft3(volume) -> Spectrum:
    x = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if x.ndim != 3:
        raise ShapeMismatchError("fft3 expects a 3-D array")
    out = x.astype(np.complex128)
    for axis in range(3):
        out = np.moveaxis(_fft_last(np.moveaxis(out, axis, -1)), -1, axis)
    return Spectrum(out)


def default_top_m(n_components: int, fraction: float = 0.01) -> int:
    return max(1, int(round(fraction * n_components)))


def spectrum_concentration(volume, M: int | None = None) -> float:
    """Share of total spectral magnitude held by the ``M`` largest components.

    ``volume`` may be a :class:`Spectrum`. ``M`` defaults to 1% of the
    component count.
    """
    sp = volume if isinstance(volume, Spectrum) else fft3(volume)
    if M is None:
        M = default_top_m(sp.size)
    if not 1 <= M <= sp.size:
        raise ValueError(f"M must lie in [1, {sp.size}], got {M}")
    mags = sp.magnitudes
    total = mags.sum()
    if total == 0.0:
        return 1.0
    # sum the tail rather than the head so that D(total) is exactly 1
    return float(1.0 - mags[M:].sum() / total)


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    ratio: float | None = None
    artifact_bytes: int | None = None
    drop_fraction: float | None = None
    per_expert_share: list[float] | None = None
    d_of_x: dict[int, float] = field(default_factory=dict)
    compress_seconds: float | None = None
    decompress_seconds: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr_db"] = None if math.isinf(self.psnr_db) else self.psnr_db
        d["psnr_infinite"] = math.isinf(self.psnr_db)
        d["d_of_x"] = {str(k): v for k, v in self.d_of_x.items()}
        return d


def evaluate(original, reconstructed, peak: float, M: list[int] | None = None,
             **extra) -> MetricsReport:
    """PSNR, SSIM and D(x) of ``original`` for each requested ``M``."""
    sp = fft3(original)
    Ms = M if M else [default_top_m(sp.size)]
    d = {int(m): spectrum_concentration(sp, int(m)) for m in Ms}
    return MetricsReport(psnr(original, reconstructed, peak), ssim3d(original, reconstructed, peak=peak),
                         d_of_x=d, **extra)


def mutual_information(x, y) -> float:
    """Mutual information in nats between two discrete label arrays."""
    x = np.asarray(x).ravel()
    y = np.asarray(y).ravel()
    if x.shape != y.shape:
        raise ShapeMismatchError("label arrays differ in size")
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / (px @ py)[nz])).sum())


def write_pgm(image: np.ndarray, path) -> Path:
    """Binary (P5) 8-bit greyscale image."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    path = Path(path)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


@dataclass
class ExpertReport:
    shares: list[float]
    assignment: np.ndarray  # expert id of the top choice at every voxel
    mutual_information: float | None = None
    slices: list[Path] = field(default_factory=list)
    final_counts: list[int] | None = None  # last logged per-batch counts


def expert_report(volume: Volume, params: mdl.ModelParams, config: mdl.ModelConfig,
                  train_log: list[dict] | None = None, labels=None, out_dir=None,
                  chunk_size: int = 65536) -> ExpertReport:
    """Route every voxel (inference mode) and tally the chosen experts.

    ``labels`` (same shape as the volume) enables the mutual-information
    score between expert id and label. With ``out_dir`` one PGM per slice
    along the first axis is written, grey level proportional to expert id.
    """
    coords = full_grid(volume.dims)
    ids = np.empty(coords.shape[0], dtype=np.int64)
    for s in range(0, coords.shape[0], chunk_size):
        plan = mdl.route(coords[s : s + chunk_size], params, config)
        ids[s : s + chunk_size] = plan.expert_ids[:, 0]
    counts = np.bincount(ids, minlength=config.n_experts).astype(np.float64)
    shares = (counts / counts.sum()).tolist()
    assignment = ids.reshape(volume.dims)
    mi = None if labels is None else mutual_information(assignment, labels)
    paths = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        step = 255 // max(1, config.n_experts - 1)
        for i in range(volume.dims[0]):
            paths.append(write_pgm(assignment[i] * step, out / f"experts_{i:04d}.pgm"))
    final = train_log[-1].get("counts") if train_log else None
    return ExpertReport(shares, assignment, mi, paths, final)


def material_labels(volume: Volume) -> np.ndarray:
    """Two-class label by thresholding at the middle of the intensity range."""
    lo, hi = volume.norm
    return (volume.data > 0.5 * (lo + hi)).astype(np.int64)


RD_FIELDS = ("ratio", "bytes", "psnr", "ssim", "time")


@dataclass
class RDTable:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.columns), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in self.columns})
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = list(self.columns)
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for row in self.rows:
            lines.append("| " + " | ".join(_fmt(row.get(k)) for k in cols) + " |")
        return "\n".join(lines) + "\n"

    @property
    def columns(self) -> tuple[str, ...]:
        extra = sorted({k for r in self.rows for k in r} - set(RD_FIELDS))
        return RD_FIELDS + tuple(extra)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_markdown() if path.suffix == ".md" else self.to_csv())
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def rate_distortion_table(results: list[dict]) -> RDTable:
    """Rows sorted by ratio (ties keep input order)."""
    if not results:
        raise ValueError("need at least one result")
    for r in results:
        missing = [k for k in ("ratio",) if k not in r]
        if missing:
            raise ValueError(f"result row lacks {missing}")
    return RDTable(sorted((dict(r) for r in results), key=lambda r: float(r["ratio"])))


def load_rd_csv(source) -> RDTable:
    text = source if "\n" in str(source) else Path(source).read_text()
    reader = csv.DictReader(io.StringIO(text))
    return RDTable([{k: _parse(v) for k, v in row.items()} for row in reader])

