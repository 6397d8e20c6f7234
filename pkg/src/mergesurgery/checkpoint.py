"""ParameterMap and its binary checkpoint format.

Layout (all integers little-endian)::

    b"MSRG" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header maps each tensor name, in serialization order, to
``{"dtype": "f32", "shape": [...], "offset": o, "nbytes": n}`` where ``offset``
is relative to the start of the payload. A reserved ``"__metadata__"`` entry
holds the map's metadata (string values only).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

MAGIC = b"MSRG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_META_KEY = "__metadata__"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class OverlapError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ConsistencyError(CheckpointError):
    pass


class IncompatibleError(ValueError):
    pass


class ParameterMap(Mapping[str, np.ndarray]):
    """Ordered name -> float32 tensor mapping with string metadata.

    Tensors are stored read-only so maps can be shared freely.
    """

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | Mapping[str, np.ndarray] = (), metadata: Mapping[str, str] | None = None):
        if isinstance(items, Mapping):
            items = items.items()
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in items:
            if name in self._tensors:
                raise ValueError(f"duplicate layer name {name!r}")
            if name == _META_KEY:
                raise ValueError(f"{_META_KEY!r} is reserved")
            a = np.array(arr, dtype=np.float32, order="C", copy=True)
            a.setflags(write=False)
            self._tensors[name] = a
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParameterMap({shapes})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._tensors.items()}

    def replace(self, tensors: Mapping[str, np.ndarray], **metadata: str) -> "ParameterMap":
        """Same names and order, new values; metadata updated with ``metadata``."""
        return ParameterMap([(k, tensors[k]) for k in self], {**self.metadata, **metadata})

    def bit_equal(self, other: "ParameterMap") -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self._tensors.items():
            h.update(k.encode())
            h.update(repr(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()


def _encode(pmap: ParameterMap) -> bytes:
    header: dict = {}
    if pmap.metadata:
        header[_META_KEY] = pmap.metadata
    offset = 0
    chunks = []
    for name, arr in pmap.items():
        raw = arr.astype("<f4").tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save(pmap: ParameterMap, path: str | os.PathLike) -> None:
    Path(path).write_bytes(_encode(pmap))


def _decode(buf: bytes) -> ParameterMap:
    if len(buf) < _PREFIX.size:
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise TruncatedError(f"header claims {hlen} bytes but only {len(buf) - _PREFIX.size} remain")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConsistencyError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ConsistencyError("header must be a JSON object")
    metadata = header.pop(_META_KEY, {})
    payload = memoryview(buf)[start:]
    spans = []
    items = []
    for name, info in header.items():
        try:
            dtype, shape, off, nbytes = info["dtype"], [int(s) for s in info["shape"]], int(info["offset"]), int(info["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConsistencyError(f"malformed header entry for {name!r}") from exc
        if dtype != "f32":
            raise ConsistencyError(f"{name!r}: unsupported dtype {dtype!r}")
        if any(s < 0 for s in shape) or off < 0:
            raise ConsistencyError(f"{name!r}: negative shape or offset")
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise ConsistencyError(f"{name!r}: shape {shape} needs {int(np.prod(shape)) * 4} bytes, header says {nbytes}")
        spans.append((off, off + nbytes, name))
        items.append((name, shape, off, nbytes))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OverlapError(f"tensors {an!r} and {bn!r} overlap in the payload")
    if spans and spans[-1][1] > len(payload):
        raise TruncatedError(f"payload is {len(payload)} bytes, tensor {spans[-1][2]!r} ends at {spans[-1][1]}")
    tensors = [
        (name, np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape).astype(np.float32))
        for name, shape, off, nbytes in items
    ]
    return ParameterMap(tensors, metadata)


def load(path: str | os.PathLike) -> ParameterMap:
    return _decode(Path(path).read_bytes())


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def compatible(a: ParameterMap, b: ParameterMap) -> bool:
    return a.shapes() == b.shapes() and set(a) == set(b)


def assert_compatible(maps: list[ParameterMap]) -> None:
    """Raise :class:`IncompatibleError` unless all maps share names and shapes."""
    if len(maps) < 2:
        raise ValueError("assert_compatible needs at least two maps")
    ref = maps[0]
    for i, other in enumerate(maps[1:], start=1):
        missing = sorted(set(ref) ^ set(other))
        if missing:
            raise IncompatibleError(f"map 0 and map {i} differ in layer names: {missing}")
        bad = sorted(k for k in ref if ref[k].shape != other[k].shape)
        if bad:
            detail = ", ".join(f"{k} {ref[k].shape} vs {other[k].shape}" for k in bad)
            raise IncompatibleError(f"map 0 and map {i} differ in layer shapes: {detail}")
