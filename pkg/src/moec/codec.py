"""Compressed artifact format, int8 weight quantization and Huffman coding.

Artifact layout (little-endian)::

    b"MOEC" | u16 version | u32 header_len | JSON header
    | records: (u16 tensor_id, u8 mode, u32 byte_len, payload) ...
    | u32 CRC32 of everything before it

One record per tensor, in ``ModelParams.tensors()`` order (each layer's
weight matrix, then its bias). Record payloads by mode:

* ``MODE_RAW``: float32 values.
* ``MODE_QUANT``: float32 scale, then int8 values.
* ``MODE_HUFFMAN``: float32 scale, then a Huffman block of the int8 bytes.

Quantized artifacts quantize weight matrices with one symmetric scale per
tensor. Biases are few and sensitive, so they always stay float32.
"""

from __future__ import annotations

import heapq
import json
import struct
import zlib
from dataclasses import dataclass
from itertools import count

import numpy as np

from moec.model import ModelConfig, ModelParams, layer_shapes

MAGIC = b"MOEC"
VERSION = 1

MODE_RAW = 0
MODE_QUANT = 1
MODE_HUFFMAN = 2

# artifact-level encoding requested by the caller
ARTIFACT_MODES = {"raw": MODE_RAW, "quant": MODE_QUANT, "quant+huffman": MODE_HUFFMAN}

_RECORD = struct.Struct("<HBI")
_PREAMBLE = struct.Struct("<4sHI")


class ArtifactError(ValueError):
    """Bad magic, unsupported version, checksum failure or truncated data."""


class HuffmanError(ValueError):
    pass


# --------------------------------------------------------------------------
# quantization


def quantize_tensor(weights) -> tuple[np.ndarray, np.float32]:
    """Symmetric per-tensor int8: ``scale = max|w| / 127``, ``q = round(w/scale)``.

    An all-zero tensor gets ``scale = 1``.
    """
    w = np.asarray(weights, dtype=np.float32).astype(np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    peak = float(np.abs(w).max())
    if peak == 0.0:
        return np.zeros(w.shape, dtype=np.int8), np.float32(1.0)
    scale = peak / 127.0
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return q, np.float32(scale)


def dequantize_tensor(q, scale) -> np.ndarray:
    scale = np.float32(scale)
    if not scale > 0:
        raise ValueError("scale must be positive")
    return np.asarray(q, dtype=np.float32) * scale


# --------------------------------------------------------------------------
# Huffman coding


@dataclass
class HuffmanTree:
    """Code lengths (indexed by byte value, 0 = unused) and canonical codes."""

    root: object
    lengths: np.ndarray  # (256,) uint8
    codes: dict[int, str]


class _Node:
    __slots__ = ("freq", "symbol", "left", "right")

    def __init__(self, freq, symbol=None, left=None, right=None):
        self.freq = freq
        self.symbol = symbol
        self.left = left
        self.right = right


def huffman_build(frequencies: dict[int, int]) -> HuffmanTree:
    """Build the tree by repeated extract-min/merge on a priority queue.

    Queue order is (frequency, smallest symbol under the node), which makes
    the construction deterministic. A lone symbol gets the one-bit code "0".
    """
    items = sorted((int(s), int(f)) for s, f in frequencies.items() if f > 0)
    if not items:
        raise HuffmanError("no symbols to code")
    for s, _ in items:
        if not 0 <= s <= 255:
            raise HuffmanError(f"symbol {s} is not a byte value")
    tie = count()
    heap = [(f, s, next(tie), _Node(f, s)) for s, f in items]
    heapq.heapify(heap)
    for _ in range(len(items) - 1):
        fx, sx, _, x = heapq.heappop(heap)
        fy, sy, _, y = heapq.heappop(heap)
        z = _Node(fx + fy, None, x, y)
        heapq.heappush(heap, (z.freq, min(sx, sy), next(tie), z))
    root = heap[0][3]

    lengths = np.zeros(256, dtype=np.uint8)
    if root.symbol is not None:
        lengths[root.symbol] = 1
    else:
        stack = [(root, 0)]
        while stack:
            node, depth = stack.pop()
            if node.symbol is not None:
                if depth > 255:
                    raise HuffmanError("code length exceeds 255 bits")
                lengths[node.symbol] = depth
            else:
                stack.append((node.left, depth + 1))
                stack.append((node.right, depth + 1))
    return HuffmanTree(root, lengths, canonical_codes(lengths))


def canonical_codes(lengths) -> dict[int, str]:
    """Canonical prefix codes from per-symbol code lengths."""
    syms = sorted((int(l), s) for s, l in enumerate(lengths) if l > 0)
    codes = {}
    code = 0
    prev = syms[0][0] if syms else 0
    for length, s in syms:
        code <<= length - prev
        codes[s] = format(code, f"0{length}b")
        code += 1
        prev = length
    return codes


def _code_ints(lengths) -> np.ndarray:
    ints = np.zeros(256, dtype=np.uint64)
    for s, bits in canonical_codes(lengths).items():
        ints[s] = int(bits, 2)
    return ints


def huffman_encode(data: bytes) -> tuple[bytes, np.ndarray]:
    """Return ``(bitstream, code_lengths)``; bits are packed MSB first.

    A stream with a single distinct byte needs no bits at all.
    """
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    if arr.size == 0:
        raise HuffmanError("cannot encode an empty stream")
    freq = np.bincount(arr, minlength=256)
    tree = huffman_build({s: int(f) for s, f in enumerate(freq) if f})
    if np.count_nonzero(freq) == 1:
        return b"", tree.lengths
    lens = tree.lengths.astype(np.int64)[arr]
    codes = _code_ints(tree.lengths)[arr]
    maxlen = int(lens.max())
    if maxlen > 63:
        raise HuffmanError("code length above 63 bits is not supported by the encoder")
    pos = np.arange(maxlen, dtype=np.int64)
    shift = lens[:, None] - 1 - pos[None, :]
    valid = shift >= 0
    bits = (codes[:, None] >> np.where(valid, shift, 0).astype(np.uint64)) & np.uint64(1)
    return np.packbits(bits[valid].astype(np.uint8)).tobytes(), tree.lengths


def huffman_decode(bitstream: bytes, lengths, n_symbols: int) -> bytes:
    lengths = np.asarray(lengths, dtype=np.int64)
    used = np.flatnonzero(lengths)
    if used.size == 0:
        raise HuffmanError("empty code table")
    if used.size == 1:
        if bitstream:
            raise HuffmanError("unexpected bits for a single-symbol stream")
        return bytes([int(used[0])]) * n_symbols
    kraft = sum(2.0 ** -int(lengths[s]) for s in used)
    if kraft > 1.0 + 1e-12:
        raise HuffmanError("code lengths violate the Kraft inequality")

    maxlen = int(lengths.max())
    order = sorted(used, key=lambda s: (lengths[s], s))
    first = [0] * (maxlen + 2)
    cnt = [0] * (maxlen + 2)
    offset = [0] * (maxlen + 2)
    for s in order:
        cnt[lengths[s]] += 1
    code = 0
    idx = 0
    for l in range(1, maxlen + 1):
        first[l] = code
        offset[l] = idx
        code = (code + cnt[l]) << 1
        idx += cnt[l]
    syms = [int(s) for s in order]

    bits = np.unpackbits(np.frombuffer(bitstream, dtype=np.uint8))
    nbits = bits.size
    if maxlen <= _TABLE_BITS:
        out, pos = _decode_table(bits, lengths, syms, maxlen, n_symbols)
    else:
        out, pos = _decode_bitwise(bits.tolist(), first, cnt, offset, syms, maxlen, n_symbols)
    if nbits - pos >= 8 or bits[pos:].any():
        raise HuffmanError("trailing data after the last symbol")
    return bytes(out)


_TABLE_BITS = 16


def _decode_table(bits, lengths, syms, maxlen, n_symbols):
    # lookup on a maxlen-bit window starting at every bit position
    nbits = bits.size
    padded = np.concatenate([bits, np.zeros(maxlen, dtype=np.uint8)]).astype(np.int64)
    window = np.zeros(nbits + 1, dtype=np.int64)
    for j in range(maxlen):
        window = (window << 1) | padded[j : j + nbits + 1]
    table_sym = np.full(1 << maxlen, -1, dtype=np.int64)
    table_len = np.zeros(1 << maxlen, dtype=np.int64)
    codes = canonical_codes(lengths)
    for s in syms:
        c = codes[s]
        lo = int(c, 2) << (maxlen - len(c))
        hi = lo + (1 << (maxlen - len(c)))
        table_sym[lo:hi] = s
        table_len[lo:hi] = len(c)
    wsym = table_sym[window].tolist()
    wlen = table_len[window].tolist()
    out = bytearray(n_symbols)
    pos = 0
    for i in range(n_symbols):
        if pos >= nbits:
            raise HuffmanError("bitstream ended mid-symbol")
        s = wsym[pos]
        if s < 0:
            raise HuffmanError("invalid code in bitstream")
        out[i] = s
        pos += wlen[pos]
    if pos > nbits:
        raise HuffmanError("bitstream ended mid-symbol")
    return out, pos


def _decode_bitwise(bits, first, cnt, offset, syms, maxlen, n_symbols):
    out = bytearray()
    pos = 0
    nbits = len(bits)
    for _ in range(n_symbols):
        code = 0
        l = 0
        while True:
            if pos >= nbits:
                raise HuffmanError("bitstream ended mid-symbol")
            code = (code << 1) | bits[pos]
            pos += 1
            l += 1
            if l > maxlen:
                raise HuffmanError("invalid code in bitstream")
            k = code - first[l]
            if 0 <= k < cnt[l]:
                out.append(syms[offset[l] + k])
                break
    return out, pos


_HUFF_HEAD = struct.Struct("<I")


def huffman_pack(data: bytes) -> bytes:
    """Self-contained block: u32 symbol count, 256 code-length bytes, bits."""
    bits, lengths = huffman_encode(data)
    return _HUFF_HEAD.pack(len(data)) + lengths.astype(np.uint8).tobytes() + bits


def huffman_unpack(block: bytes) -> bytes:
    if len(block) < _HUFF_HEAD.size + 256:
        raise HuffmanError("truncated Huffman block")
    (n,) = _HUFF_HEAD.unpack_from(block)
    lengths = np.frombuffer(block, dtype=np.uint8, count=256, offset=_HUFF_HEAD.size)
    return huffman_decode(block[_HUFF_HEAD.size + 256 :], lengths, n)


# --------------------------------------------------------------------------
# artifact


def _encode_tensor(values: np.ndarray, mode: int) -> tuple[int, bytes]:
    values = np.asarray(values).reshape(-1)
    if mode == MODE_RAW:
        return MODE_RAW, values.astype("<f4").tobytes()
    q, scale = quantize_tensor(values)
    quant = struct.pack("<f", scale) + q.tobytes()
    if mode == MODE_QUANT:
        return MODE_QUANT, quant
    huff = struct.pack("<f", scale) + huffman_pack(q.tobytes())
    # entropy coding can inflate small tensors; the mode byte records the fallback
    if len(huff) >= len(quant):
        return MODE_QUANT, quant
    return MODE_HUFFMAN, huff


def _decode_tensor(mode: int, payload: bytes, size: int) -> np.ndarray:
    if mode == MODE_RAW:
        if len(payload) != 4 * size:
            raise ArtifactError("raw record length mismatch")
        return np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if len(payload) < 4:
        raise ArtifactError("truncated quantized record")
    (scale,) = struct.unpack_from("<f", payload)
    if mode == MODE_QUANT:
        raw = payload[4:]
    elif mode == MODE_HUFFMAN:
        try:
            raw = huffman_unpack(payload[4:])
        except HuffmanError as exc:
            raise ArtifactError(f"corrupt Huffman record: {exc}") from exc
    else:
        raise ArtifactError(f"unknown record mode {mode}")
    if len(raw) != size:
        raise ArtifactError("quantized record length mismatch")
    return dequantize_tensor(np.frombuffer(raw, dtype=np.int8), scale)


def pack_artifact(params: ModelParams, config: ModelConfig, mode: str = "raw",
                  extra: dict | None = None) -> bytes:
    """Serialize ``params`` and ``config`` into artifact bytes.

    ``extra`` is merged into the JSON header (seed, presets, timings...).
    """
    if mode not in ARTIFACT_MODES:
        raise ValueError(f"mode must be one of {sorted(ARTIFACT_MODES)}")
    layers = list(params.layers())
    for name, (W, b) in layers:
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError(f"non-finite values in layer {name}")
    header = {
        "model": config.to_dict(),
        "mode": ARTIFACT_MODES[mode],
        "layers": [[name, list(W.shape)] for name, (W, _) in layers],
        "init": "sine",
        "quantization": {"granularity": "per-tensor", "bits": 8, "symmetric": True,
                         "biases_quantized": False},
    }
    if extra:
        header.update(extra)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(_PREAMBLE.pack(MAGIC, VERSION, len(head)))
    out += head
    for i, t in enumerate(params.tensors()):
        # even ids are weight matrices, odd ids are biases
        rec_mode, payload = _encode_tensor(t, ARTIFACT_MODES[mode] if i % 2 == 0 else MODE_RAW)
        out += _RECORD.pack(i, rec_mode, len(payload))
        out += payload
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


@dataclass
class Unpacked:
    params: ModelParams
    config: ModelConfig
    header: dict
    record_modes: list[int]
    header_bytes: int
    payload_bytes: int


def read_header(blob: bytes) -> tuple[dict, int]:
    """Validate magic, version and checksum; return ``(header, records_offset)``."""
    if len(blob) < _PREAMBLE.size + 4:
        raise ArtifactError("artifact truncated")
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise ArtifactError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ArtifactError(f"unsupported artifact version {version}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ArtifactError("checksum mismatch")
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start : start + hlen])
    except ValueError as exc:
        raise ArtifactError("unreadable header") from exc
    return header, start + hlen


def unpack_artifact(blob: bytes) -> Unpacked:
    blob = bytes(blob)
    header, pos = read_header(blob)
    records_start = pos
    config = ModelConfig.from_dict(header["model"])
    end = len(blob) - 4
    tensors, modes = [], []
    shapes = [s for _, (fi, fo) in layer_shapes(config) for s in ((fi, fo), (fo,))]
    for i, shape in enumerate(shapes):
        if pos + _RECORD.size > end:
            raise ArtifactError("artifact truncated inside records")
        tid, mode, blen = _RECORD.unpack_from(blob, pos)
        pos += _RECORD.size
        if tid != i or pos + blen > end:
            raise ArtifactError(f"malformed record {i}")
        values = _decode_tensor(mode, blob[pos : pos + blen], int(np.prod(shape)))
        pos += blen
        tensors.append(values.reshape(shape))
        modes.append(mode)
    if pos != end:
        raise ArtifactError("trailing bytes after records")
    params = ModelParams.from_tensors(config, tensors)
    payload = end - records_start
    return Unpacked(params, config, header, modes, len(blob) - payload, payload)


def payload_size(blob: bytes) -> int:
    """Bytes taken by tensor records (everything except preamble, header, CRC)."""
    _, pos = read_header(bytes(blob))
    return len(blob) - 4 - pos


def compression_ratio(original_bytes: int, blob: bytes) -> float:
    return original_bytes / len(blob)
