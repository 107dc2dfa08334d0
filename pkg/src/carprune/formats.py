"""Binary model containers (PKM1, PKC1) and report files.

PKM1, little-endian::

    b"PKM1" | u32 len | architecture text (utf-8)
    u32 layer_count, then per parameterized layer:
        u16 len | layer id | u32 tensor_count, then per tensor:
            u32 ndim | u32 extents... | f32 values...
    u32 crc32 of every preceding byte

PKC1 stores the same layers, each weight tensor either dense or as a
:class:`~carprune.compress.CompressedLayerStore`, followed by a JSON manifest::

    b"PKC1" | u32 len | architecture text
    u32 layer_count, then per layer:
        u16 len | layer id | u8 encoding (0 dense, 1 store)
        u32 ndim | u32 extents...            weight shape
        dense: f32 values...   store: u32 len | store bytes
        u32 ndim | u32 extents... | f32 values...   bias (always dense)
    u32 len | manifest JSON (utf-8)
    u32 crc32
"""
from __future__ import annotations

import io
import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .compress import CompressedLayerStore, storage_bytes
from .network import Network, parse_architecture
from .tensor import DTYPE

REPORT_SCHEMA = "carprune-report/1"
MANIFEST_SCHEMA = "carprune-manifest/1"


class FormatError(ValueError):
    pass


class MagicError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def _u32(buf, v):
    buf.write(struct.pack("<I", v))


def _str(buf, s: str, width="<H"):
    b = s.encode()
    buf.write(struct.pack(width, len(b)))
    buf.write(b)


def _tensor(buf, a: np.ndarray):
    _u32(buf, a.ndim)
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.asarray(a, "<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("unexpected end of data")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def str(self, fmt="<H") -> str:
        return self.take(self.u(fmt)).decode()

    def shape(self) -> tuple:
        ndim = self.u("<I")
        return struct.unpack(f"<{ndim}I", self.take(4 * ndim))

    def tensor(self) -> np.ndarray:
        shape = self.shape()
        n = math.prod(shape)
        return np.frombuffer(self.take(4 * n), "<f4").astype(DTYPE).reshape(shape)


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _open(data: bytes, magic: bytes) -> _Reader:
    if data[:4] != magic:
        raise MagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < 8:
        raise FormatError("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch: file is corrupt")
    r = _Reader(body)
    r.pos = 4
    return r


def _restore(net: Network, tensors: dict) -> Network:
    layers = net.parameterized()
    if set(tensors) != {l.id for l in layers}:
        raise FormatError(f"tensor layers {sorted(tensors)} do not match architecture")
    for layer in layers:
        w, b = tensors[layer.id]
        if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
            raise FormatError(f"layer {layer.id}: stored shapes {w.shape}/{b.shape} do not match "
                              f"architecture {layer.weights.shape}/{layer.bias.shape}")
        layer.weights, layer.bias = w, b
    return net


# --------------------------------------------------------------------------- PKM1


def model_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(b"PKM1")
    _str(buf, net.architecture().to_text(), "<I")
    layers = net.parameterized()
    _u32(buf, len(layers))
    for layer in layers:
        _str(buf, layer.id)
        _u32(buf, 2)
        _tensor(buf, layer.weights)
        _tensor(buf, layer.bias)
    return _seal(buf.getvalue())


def model_from_bytes(data: bytes) -> Network:
    r = _open(data, b"PKM1")
    arch = parse_architecture(r.str("<I"))
    tensors = {}
    for _ in range(r.u("<I")):
        lid = r.str()
        count = r.u("<I")
        if count != 2:
            raise FormatError(f"layer {lid}: expected 2 tensors, found {count}")
        tensors[lid] = (r.tensor(), r.tensor())
    return _restore(arch.build(0), tensors)


def save_model(path, net: Network) -> None:
    Path(path).write_bytes(model_bytes(net))


def load_model(path) -> Network:
    return model_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- PKC1


def compressed_bytes(net: Network, stores: dict, original: Network | None = None) -> bytes:
    """Serialize ``net`` with the weights of ``stores``' layers in compressed form.

    ``original`` (the uncompressed, unpruned network) adds per-layer ratios
    against its dense weights to the manifest.
    """
    buf = io.BytesIO()
    buf.write(b"PKC1")
    _str(buf, net.architecture().to_text(), "<I")
    layers = net.parameterized()
    _u32(buf, len(layers))
    manifest = {"schema": MANIFEST_SCHEMA, "layers": {}}
    for layer in layers:
        _str(buf, layer.id)
        store = stores.get(layer.id)
        buf.write(struct.pack("<B", 0 if store is None else 1))
        _u32(buf, layer.weights.ndim)
        buf.write(struct.pack(f"<{layer.weights.ndim}I", *layer.weights.shape))
        if store is None:
            buf.write(np.asarray(layer.weights, "<f4").tobytes())
            stored = storage_bytes(layer.weights)
        else:
            if tuple(store.shape) != layer.weights.shape:
                raise FormatError(f"store for {layer.id} has shape {store.shape}, "
                                  f"layer has {layer.weights.shape}")
            blob = store.to_bytes()
            _u32(buf, len(blob))
            buf.write(blob)
            stored = len(blob)
        _tensor(buf, layer.bias)
        entry = {
            "encoding": "dense" if store is None else "store",
            "dense_bytes": storage_bytes(layer.weights),
            "stored_bytes": stored,
            "ratio": storage_bytes(layer.weights) / stored,
        }
        if original is not None:
            base = storage_bytes(original.layer(layer.id).weights)
            entry["original_dense_bytes"] = base
            entry["combined_ratio"] = base / stored
        manifest["layers"][layer.id] = entry
    _str(buf, json.dumps(manifest, sort_keys=True), "<I")
    return _seal(buf.getvalue())


def compressed_from_bytes(data: bytes) -> tuple[Network, dict, dict]:
    """Returns ``(network with decoded weights, stores by layer id, manifest)``."""
    r = _open(data, b"PKC1")
    arch = parse_architecture(r.str("<I"))
    tensors, stores = {}, {}
    for _ in range(r.u("<I")):
        lid = r.str()
        encoding = r.u("<B")
        shape = r.shape()
        if encoding == 0:
            w = np.frombuffer(r.take(4 * math.prod(shape)), "<f4").astype(DTYPE).reshape(shape)
        elif encoding == 1:
            store = CompressedLayerStore.from_bytes(r.take(r.u("<I")), lid, shape)
            stores[lid] = store
            w = store.decode()
        else:
            raise FormatError(f"layer {lid}: unknown encoding {encoding}")
        tensors[lid] = (w, r.tensor())
    manifest = json.loads(r.str("<I"))
    return _restore(arch.build(0), tensors), stores, manifest


def save_compressed(path, net: Network, stores: dict, original: Network | None = None) -> None:
    Path(path).write_bytes(compressed_bytes(net, stores, original))


def load_compressed(path) -> tuple[Network, dict, dict]:
    return compressed_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- reports


def write_trace_csv(path, trace) -> None:
    trace.write_csv(path)


def write_report_json(path, report: dict) -> None:
    Path(path).write_text(json.dumps({"schema": REPORT_SCHEMA, **report}, indent=2,
                                     sort_keys=True) + "\n")


def build_report(original: Network, final: Network, accuracy: dict, per_class: dict | None = None,
                 stores: dict | None = None, trace_path: str | None = None) -> dict:
    """Per-layer filter counts, structural and byte ratios, and accuracies."""
    from .pruner import format_ratio, structural_ratio

    stores = stores or {}
    layers = {}
    for layer in original.parameterized():
        after = final.layer(layer.id)
        entry = {"kind": layer.kind, "units_before": layer.weights.shape[0],
                 "units_after": after.weights.shape[0]}
        if layer.kind == "conv":
            ratio = structural_ratio(layer.weights.shape[0], after.weights.shape[0])
            entry["structural_ratio"] = format_ratio(ratio)
        stored = storage_bytes(stores.get(layer.id, after.weights))
        entry["dense_bytes_before"] = storage_bytes(layer.weights)
        entry["stored_bytes_after"] = stored
        entry["byte_ratio"] = f"{round(storage_bytes(layer.weights) / stored)}x"
        layers[layer.id] = entry
    return {
        "layers": layers,
        "accuracy": accuracy,
        "per_class_accuracy": {str(k): v for k, v in (per_class or {}).items()},
        "trace": trace_path,
    }
