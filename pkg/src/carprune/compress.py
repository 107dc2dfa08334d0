"""Weight-level compression: magnitude pruning, codebook quantization, sparse storage.

A :class:`CompressedLayerStore` keeps the non-zero weights of one tensor as a
stream of ``(delta, code)`` entries. ``delta`` counts the zeros skipped since
the previous stored position; the largest representable delta
(``2**idx_bits - 1``) is an escape that skips that many zeros and stores no
value (its code slot is written as 0). Serialized layout, little-endian::

    header  u32 entries | u32 codebook_len | u8 idx_bits | u8 code_bits | u16 0 | u32 size
    codebook  codebook_len x f32
    entries   bit stream, each entry = delta (idx_bits) then code (code_bits), LSB first,
              zero-padded to a whole byte

so ``storage_bytes = 16 + 4*codebook_len + ceil(entries*(idx_bits+code_bits)/8)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE

HEADER = struct.Struct("<IIBBHI")
MAX_LLOYD_ITERS = 100


@dataclass(eq=False)
class CompressedLayerStore:
    layer_id: str
    shape: tuple
    deltas: np.ndarray
    codes: np.ndarray
    codebook: np.ndarray
    idx_bits: int = 8
    code_bits: int = 8

    @property
    def entries(self) -> int:
        return len(self.deltas)

    @property
    def escape(self) -> int:
        return (1 << self.idx_bits) - 1

    def decode(self) -> np.ndarray:
        size = math.prod(self.shape)
        out = np.zeros(size, DTYPE)
        real = self.deltas != self.escape
        # each real entry advances past itself; each escape advances by its delta
        step = np.where(real, self.deltas.astype(np.int64) + 1, self.deltas.astype(np.int64))
        pos = np.cumsum(step) - 1
        out[pos[real]] = self.codebook[self.codes[real]]
        return out.reshape(self.shape)

    def to_bytes(self) -> bytes:
        head = HEADER.pack(self.entries, len(self.codebook), self.idx_bits, self.code_bits,
                           0, math.prod(self.shape))
        book = np.asarray(self.codebook, "<f4").tobytes()
        return head + book + _pack(self.deltas, self.codes, self.idx_bits, self.code_bits)

    @classmethod
    def from_bytes(cls, data: bytes, layer_id: str, shape: tuple) -> "CompressedLayerStore":
        entries, k, ib, cb, _, size = HEADER.unpack_from(data, 0)
        if size != math.prod(shape):
            raise ValueError(f"store for {layer_id} holds {size} elements, shape {shape} needs "
                             f"{math.prod(shape)}")
        off = HEADER.size
        book = np.frombuffer(data, "<f4", k, off).astype(DTYPE)
        off += 4 * k
        deltas, codes = _unpack(data[off:], entries, ib, cb)
        return cls(layer_id, tuple(shape), deltas, codes, book, ib, cb)


def _pack(deltas, codes, idx_bits, code_bits) -> bytes:
    width = idx_bits + code_bits
    if len(deltas) == 0:
        return b""
    fields = (deltas.astype(np.uint64) | (codes.astype(np.uint64) << np.uint64(idx_bits)))
    bits = (fields[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def _unpack(data: bytes, entries: int, idx_bits: int, code_bits: int):
    width = idx_bits + code_bits
    nbytes = math.ceil(entries * width / 8)
    if len(data) < nbytes:
        raise ValueError(f"entry stream truncated: {len(data)} of {nbytes} bytes")
    bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes), bitorder="little")
    bits = bits[: entries * width].reshape(entries, width).astype(np.uint64)
    fields = (bits << np.arange(width, dtype=np.uint64)).sum(axis=1)
    deltas = (fields & np.uint64((1 << idx_bits) - 1)).astype(np.uint32)
    codes = (fields >> np.uint64(idx_bits)).astype(np.uint32)
    return deltas, codes


def storage_bytes(obj) -> int:
    """Bytes needed to store a dense tensor (4 per float) or a compressed store."""
    if isinstance(obj, CompressedLayerStore):
        return (HEADER.size + 4 * len(obj.codebook)
                + math.ceil(obj.entries * (obj.idx_bits + obj.code_bits) / 8))
    return 4 * int(np.asarray(obj).size)


def magnitude_prune(weights: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the ``floor(sparsity * N)`` smallest-magnitude weights (ties: lower flat index)."""
    if not 0 <= sparsity < 1:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    w = np.array(weights, dtype=DTYPE)
    n_zero = math.floor(sparsity * w.size)
    order = np.argsort(np.abs(w).ravel(), kind="stable")
    w.ravel()[order[:n_zero]] = 0
    return w


def _nearest(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin keeps the lower centroid index on equidistant values
    return np.abs(values[:, None] - centroids[None, :]).argmin(axis=1)


def kmeans_codebook(values: np.ndarray, k: int) -> np.ndarray:
    """1-D Lloyd iterations from linearly spaced centroids; returns the centroids."""
    v = np.asarray(values, np.float64)
    centroids = np.linspace(v.min(), v.max(), k)
    assign = _nearest(v, centroids)
    for _ in range(MAX_LLOYD_ITERS):
        sums = np.bincount(assign, weights=v, minlength=k)
        counts = np.bincount(assign, minlength=k)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled]
        new = _nearest(v, centroids)
        if np.array_equal(new, assign):
            break
        assign = new
    return centroids[np.bincount(assign, minlength=k) > 0]


def encode(weights: np.ndarray, codebook: np.ndarray, layer_id: str = "",
           idx_bits: int = 8, code_bits: int = 8) -> CompressedLayerStore:
    """Encode the non-zeros of ``weights`` against a fixed codebook (nearest entry)."""
    w = np.asarray(weights, DTYPE)
    flat = w.ravel()
    pos = np.flatnonzero(flat)
    book = np.asarray(codebook, DTYPE)
    if len(book) > (1 << code_bits):
        raise ValueError(f"codebook of {len(book)} entries does not fit in {code_bits} bits")
    codes = _nearest(flat[pos].astype(np.float64), book.astype(np.float64))
    escape = (1 << idx_bits) - 1
    gaps = np.diff(pos, prepend=-1) - 1
    n_esc = gaps // escape
    rest = gaps - n_esc * escape
    total = len(pos) + int(n_esc.sum())
    deltas = np.full(total, escape, np.uint32)
    out_codes = np.zeros(total, np.uint32)
    real_slot = np.cumsum(n_esc + 1) - 1
    deltas[real_slot] = rest
    out_codes[real_slot] = codes
    return CompressedLayerStore(layer_id, w.shape, deltas, out_codes, book, idx_bits, code_bits)


def kmeans_quantize(weights: np.ndarray, code_bits: int, layer_id: str = "",
                    idx_bits: int = 8) -> CompressedLayerStore:
    """Share the non-zero weights among at most ``2**code_bits`` k-means centroids."""
    if code_bits < 1:
        raise ValueError("code_bits must be at least 1")
    w = np.asarray(weights, DTYPE)
    nz = w[w != 0]
    if nz.size == 0:
        raise ValueError(f"layer {layer_id or '?'}: all-zero tensor, nothing to quantize")
    distinct = np.unique(nz)
    if len(distinct) <= (1 << code_bits):
        book = distinct
    else:
        book = np.unique(kmeans_codebook(nz, 1 << code_bits).astype(DTYPE))
        # float32 rounding can strand an entry; drop it and reassign until every entry is used
        while True:
            used = np.bincount(_nearest(nz.astype(np.float64), book.astype(np.float64)),
                               minlength=len(book)) > 0
            if used.all():
                break
            book = book[used]
    return encode(w, book, layer_id, idx_bits, code_bits)


def quantization_error(weights: np.ndarray, store: CompressedLayerStore) -> float:
    diff = np.asarray(weights, np.float64) - store.decode().astype(np.float64)
    return float(np.sqrt((diff ** 2).sum()))


def combined_ratio(original_net, layer_id: str, compressed) -> float:
    """Dense bytes of the original layer's weights over the bytes of ``compressed``."""
    return storage_bytes(original_net.layer(layer_id).weights) / storage_bytes(compressed)
