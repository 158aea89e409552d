"""Binary checkpoints: parameters plus Adam state behind a magic/version header.

Layout (all integers little-endian)::

    b"SPRD" | u32 version | str digest | str config text | u32 count
    count x ( str name | u8 dtype | u8 ndim | ndim x u32 | u32 step
              | value bytes | m bytes | v bytes )

where ``str`` is a u32 byte length followed by UTF-8.  The whole file is parsed
before any parameter is touched, so a bad file never leaves a half-loaded store.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"SPRD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    digest: str
    config_text: str
    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(store: ParamStore, path, digest: str, config_text: str = "") -> Path:
    out = [MAGIC, struct.pack("<I", VERSION), _str(digest), _str(config_text), struct.pack("<I", len(store))]
    for name in store.names():
        data = store[name].data
        dt = np.dtype(data.dtype).newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {data.dtype} for {name}")
        out += [_str(name), struct.pack("<BB", _CODES[dt], data.ndim),
                struct.pack(f"<{data.ndim}I", *data.shape), struct.pack("<I", store.steps[name])]
        for arr in (data, store.m[name], store.v[name]):
            out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path = Path(path)
    path.write_bytes(b"".join(out))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (need {n} more, file has "
                                  f"{len(self.buf)})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (this build reads {VERSION})")
    ck = Checkpoint(r.string(), r.string())
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.string()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I")
        (ck.steps[name],) = r.unpack("<I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        for target in (ck.params, ck.m, ck.v):
            target[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return ck


def load_checkpoint(store: ParamStore, path, digest: str | None = None, force: bool = False) -> Checkpoint:
    """Copy a checkpoint into ``store`` (creating missing parameters).

    A config digest different from ``digest`` is refused unless ``force``.
    """
    ck = read_checkpoint(path)
    if digest is not None and ck.digest != digest and not force:
        raise CheckpointError(f"{path}: config digest {ck.digest[:12]} does not match run config {digest[:12]} "
                              "(use --force to load anyway)")
    for name, value in ck.params.items():
        if name in store and store[name].shape != value.shape:
            raise CheckpointError(f"{path}: {name} has shape {value.shape}, model expects {store[name].shape}")
    for name, value in ck.params.items():
        if name in store:
            store[name].data = value.astype(store.dtype)
        else:
            store.add(name, value)
        store.m[name] = ck.m[name].astype(store.dtype)
        store.v[name] = ck.v[name].astype(store.dtype)
        store.steps[name] = ck.steps[name]
    return ck
