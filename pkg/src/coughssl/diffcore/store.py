"""Named parameter collections and their on-disk container.

Container layout (all integers little-endian)::

    magic   b"CSWT"
    u16     format version
    u32     record count
    records, each:
        u32  name length, then UTF-8 name
        u8   dtype tag (1 = float32, 2 = float64)
        u8   rank, then rank x u32 dims
        payload, little-endian, C order
    trailer:
        b"HASH", u32 length, UTF-8 JSON {config_hash, encoder_hash, phase, config}

The trailer is what lets a loader refuse weights trained for a different
encoder architecture.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import ConfigMismatch, ContainerFormatError
from .tensor import Tensor

MAGIC = b"CSWT"
VERSION = 1
_TRAILER = b"HASH"
_DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_TAG_DTYPES = {v: k.newbyteorder("<") for k, v in _DTYPE_TAGS.items()}


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class ParameterStore:
    """Ordered map from qualified parameter name to a trainable leaf tensor."""

    def __init__(self, params: Mapping[str, Tensor] | None = None, metadata: dict | None = None):
        self._params: dict[str, Tensor] = {}
        self.metadata: dict = dict(metadata or {})
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str, strip: bool = False) -> ParameterStore:
        """Parameters whose names start with ``prefix``, sharing the same tensors."""
        out = ParameterStore(metadata=self.metadata)
        for name, t in self._params.items():
            if name.startswith(prefix):
                out._params[name[len(prefix):] if strip else name] = t
        return out

    def merge(self, other: ParameterStore, prefix: str = "") -> None:
        for name, t in other.items():
            self.add(prefix + name, t)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Deep copy of the parameter values."""
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            t.data[...] = state[k]

    def copy(self, prefix: str = "") -> ParameterStore:
        """Independent copy (fresh tensors), optionally re-prefixed."""
        out = ParameterStore(metadata=dict(self.metadata))
        for k, t in self._params.items():
            out.add(prefix + k, Tensor(t.data, requires_grad=True, dtype=t.dtype))
        return out

    def astype(self, dtype) -> ParameterStore:
        out = ParameterStore(metadata=dict(self.metadata))
        for k, t in self._params.items():
            out.add(k, Tensor(t.data.astype(dtype), requires_grad=True))
        return out


def save_store(store: ParameterStore, path: str | Path) -> None:
    meta = {
        "config_hash": store.metadata.get("config_hash", ""),
        "encoder_hash": store.metadata.get("encoder_hash", ""),
        "phase": store.metadata.get("phase", ""),
        "config": store.metadata.get("config", {}),
    }
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(store))]
    for name, t in store.items():
        arr = t.data
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise ContainerFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks += [_TRAILER, struct.pack("<I", len(blob)), blob]
    Path(path).write_bytes(b"".join(chunks))


def load_store(path: str | Path, expect_encoder_hash: str | None = None) -> ParameterStore:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: not a weight container")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported container version {version}")
    pos = 10
    tensors: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            pos += nbytes
            tensors[name] = Tensor(arr.reshape(dims).astype(dtype.newbyteorder("=")), requires_grad=True)
        if buf[pos:pos + 4] != _TRAILER:
            raise ContainerFormatError(f"{path}: missing config-hash trailer")
        (mlen,) = struct.unpack_from("<I", buf, pos + 4)
        meta = json.loads(buf[pos + 8:pos + 8 + mlen].decode("utf-8"))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: corrupt container ({exc})") from exc
    if expect_encoder_hash is not None and meta.get("encoder_hash") != expect_encoder_hash:
        raise ConfigMismatch(
            f"{path}: weights were built for encoder {meta.get('encoder_hash')!r}, "
            f"configuration expects {expect_encoder_hash!r}"
        )
    return ParameterStore(tensors, metadata=meta)
