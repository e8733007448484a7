"""NNCM binary model container and the DEFLATE size metric.

Layout (all integers little-endian)::

    b"NNCM"  u16 version
    u32 descriptor length, descriptor (UTF-8 JSON, keys sorted)
    u32 record count
    per record:
        u16 name length, name (UTF-8)
        u8 encoding tag   0 = DENSE_F32, 1 = CLUSTERED8, 2 = QUANT8
        u8 ndim, ndim x u32 dims
        u32 payload length, payload

Payloads:
    DENSE_F32   float32 values, row-major
    CLUSTERED8  u8 centroid count n (0 encodes 256), n float32 centroids, one u8 index per weight
    QUANT8      float32 scale, i8 zero point, one i8 value per weight

The descriptor holds ``{"architecture": <Model.to_config()>, "metadata": {...}}``.
Pruned models are written as DENSE_F32 with explicit zeros; any size saving
comes from DEFLATE alone.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusteredWeights, Codebook
from .errors import FormatError
from .network import Model
from .quantization import QuantizedModel, QuantizedTensor

MAGIC = b"NNCM"
VERSION = 1
DENSE_F32, CLUSTERED8, QUANT8 = 0, 1, 2
ENCODING_NAMES = {DENSE_F32: "DENSE_F32", CLUSTERED8: "CLUSTERED8", QUANT8: "QUANT8"}

# raw DEFLATE (RFC 1951): maximum level, default window and memory settings
DEFLATE_LEVEL = 9
DEFLATE_WBITS = -15
DEFLATE_MEMLEVEL = 8


def _descriptor(model: Model) -> bytes:
    doc = {"architecture": model.to_config(), "metadata": dict(model.metadata)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_dense(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_clustered(book: Codebook) -> bytes:
    n = book.n_clusters
    if not 1 <= n <= 256:
        raise FormatError(f"cannot store {n} centroids in a CLUSTERED8 record")
    return (
        struct.pack("<B", n % 256)
        + np.ascontiguousarray(book.centroids, dtype="<f4").tobytes()
        + np.ascontiguousarray(book.indices, dtype=np.uint8).tobytes()
    )


def encode_quant(qt: QuantizedTensor) -> bytes:
    return struct.pack("<fb", qt.scale, qt.zero_point) + np.ascontiguousarray(qt.values, dtype=np.int8).tobytes()


def _record(name: str, tag: int, shape, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    return head + struct.pack("<I", len(payload)) + payload


def to_bytes(obj: Model | QuantizedModel, clusters: ClusteredWeights | None = None) -> bytes:
    """Canonical serialization: the same model always yields the same bytes."""
    if isinstance(obj, QuantizedModel):
        model, quant = obj.base, obj.tensors
    else:
        model, quant = obj, {}
    records = []
    for name, arr in model.named_tensors():
        if name in quant:
            records.append(_record(name, QUANT8, arr.shape, encode_quant(quant[name])))
        elif clusters is not None and name in clusters:
            records.append(_record(name, CLUSTERED8, arr.shape, encode_clustered(clusters[name])))
        else:
            records.append(_record(name, DENSE_F32, arr.shape, encode_dense(arr)))
    desc = _descriptor(model)
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<H", VERSION))
    out.write(struct.pack("<I", len(desc)) + desc)
    out.write(struct.pack("<I", len(records)))
    for rec in records:
        out.write(rec)
    return out.getvalue()


def save(obj: Model | QuantizedModel, path: str | Path, clusters: ClusteredWeights | None = None) -> int:
    """Write ``obj`` to ``path``; returns the number of bytes written."""
    data = to_bytes(obj, clusters)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


@dataclass
class Record:
    name: str
    encoding: int
    shape: tuple[int, ...]
    payload: bytes

    def decode(self):
        """Return an ndarray, a :class:`Codebook` or a :class:`QuantizedTensor`."""
        count = int(np.prod(self.shape, dtype=np.int64))
        if self.encoding == DENSE_F32:
            return np.frombuffer(self.payload, dtype="<f4").astype(np.float32).reshape(self.shape)
        if self.encoding == CLUSTERED8:
            n = self.payload[0] or 256
            centroids = np.frombuffer(self.payload, dtype="<f4", count=n, offset=1).astype(np.float32)
            idx = np.frombuffer(self.payload, dtype=np.uint8, count=count, offset=1 + 4 * n).reshape(self.shape)
            return Codebook(centroids, idx.copy())
        if self.encoding == QUANT8:
            scale, zp = struct.unpack_from("<fb", self.payload)
            vals = np.frombuffer(self.payload, dtype=np.int8, count=count, offset=5).reshape(self.shape)
            return QuantizedTensor(vals.copy(), float(scale), int(zp))
        raise FormatError(f"{self.name}: unknown encoding tag {self.encoding}")


def parse(data: bytes) -> tuple[dict, list[Record]]:
    """Split an NNCM byte string into its descriptor and records."""
    if data[:4] != MAGIC:
        raise FormatError("not an NNCM file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported NNCM version {version}")
    pos = 6
    try:
        (dlen,) = struct.unpack_from("<I", data, pos)
        desc = json.loads(data[pos + 4 : pos + 4 + dlen].decode("utf-8"))
        pos += 4 + dlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        records = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            tag, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            (plen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            payload = data[pos : pos + plen]
            if len(payload) != plen:
                raise FormatError(f"{name}: truncated payload")
            pos += plen
            records.append(Record(name, tag, tuple(shape), payload))
    except struct.error as exc:
        raise FormatError(f"truncated NNCM file: {exc}") from None
    return desc, records


def read_records(path: str | Path) -> tuple[dict, list[Record]]:
    with open(path, "rb") as fh:
        return parse(fh.read())


def from_bytes(data: bytes) -> tuple[Model | QuantizedModel, ClusteredWeights | None]:
    desc, records = parse(data)
    model = Model.from_config(desc["architecture"])
    model.metadata = dict(desc.get("metadata", {}))
    quant, books = {}, {}
    for rec in records:
        value = rec.decode()
        if isinstance(value, QuantizedTensor):
            quant[rec.name] = value
            model.set_tensor(rec.name, value.dequantize().astype(np.float32))
        elif isinstance(value, Codebook):
            books[rec.name] = value
            model.set_tensor(rec.name, value.reconstruct())
        else:
            model.set_tensor(rec.name, value)
    obj = QuantizedModel(model, quant) if quant else model
    return obj, (ClusteredWeights(books) if books else None)


def load(path: str | Path) -> Model | QuantizedModel:
    """Load a model file. Clustered tensors come back reconstructed from their centroids."""
    return load_with_codebooks(path)[0]


def load_with_codebooks(path: str | Path) -> tuple[Model | QuantizedModel, ClusteredWeights | None]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def deflate(data: bytes) -> bytes:
    c = zlib.compressobj(DEFLATE_LEVEL, zlib.DEFLATED, DEFLATE_WBITS, DEFLATE_MEMLEVEL)
    return c.compress(data) + c.flush()


@dataclass(frozen=True)
class SizeReport:
    raw_bytes: int
    deflated_bytes: int

    @property
    def raw_mb(self) -> float:
        return self.raw_bytes / 1e6

    @property
    def deflated_mb(self) -> float:
        return self.deflated_bytes / 1e6


def measure_size(path: str | Path) -> SizeReport:
    """Raw file size and its raw-DEFLATE compressed size (the headline metric)."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such model file: {path}")
    data = Path(path).read_bytes()
    return SizeReport(len(data), len(deflate(data)))
