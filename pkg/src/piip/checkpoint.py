"""Little-endian binary checkpoints with CRC32 integrity checks.

Layout (all integers little-endian)::

    magic        4 bytes  b"PIIP"
    version      u32
    config_len   u32
    config       config_len bytes, canonical JSON of the model config
    count        u32      number of tensor records
    record*      u16 name_len | name (utf-8) | u8 dtype tag | u8 rank |
                 u32 dim * rank | payload | u32 crc32(record bytes before it)
    trailer      u32      crc32 over all record bytes

The whole file is validated (magic, version, lengths, every record CRC and
the trailer) before any array is built.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PiipConfig
from .config_io import model_from_dict, model_to_dict
from .errors import DimensionError, IntegrityError, VersionError
from .model import PiipModel, build_model

MAGIC = b"PIIP"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def encode_record(name: str, array: np.ndarray) -> bytes:
    dt = np.dtype(array.dtype).newbyteorder("<")
    if dt not in DTYPE_TAGS:
        raise TypeError(f"unsupported dtype {array.dtype} for tensor {name}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_TAGS[dt], array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    body = head + np.ascontiguousarray(array, dtype=dt).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def encode(cfg: PiipConfig, state: dict[str, np.ndarray]) -> bytes:
    cfg_bytes = json.dumps(model_to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    records = b"".join(encode_record(k, v) for k, v in state.items())
    return (MAGIC + struct.pack("<II", VERSION, len(cfg_bytes)) + cfg_bytes
            + struct.pack("<I", len(state)) + records + struct.pack("<I", zlib.crc32(records)))


@dataclass(frozen=True)
class _Span:
    name: str
    tag: int
    shape: tuple[int, ...]
    start: int
    stop: int


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def _scan(buf: bytes) -> tuple[dict, list[_Span]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise IntegrityError("bad magic: not a piip checkpoint")
    (version,) = r.u("I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (clen,) = r.u("I", "config length")
    try:
        cfg = json.loads(r.take(clen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"config snapshot is corrupt: {exc}") from None
    (count,) = r.u("I", "record count")
    rec_start = r.pos
    spans = []
    for i in range(count):
        begin = r.pos
        label = f"record {i}"
        (nlen,) = r.u("H", f"{label} name length")
        raw = r.take(nlen, f"{label} name")
        name = raw.decode("utf-8", errors="replace")
        label = f"record {i} ({name})"
        tag, rank = r.u("BB", f"{label} header")
        if tag not in TAG_DTYPES:
            raise IntegrityError(f"{label}: unknown dtype tag {tag}")
        shape = r.u(f"{rank}I", f"{label} dims")
        size = int(np.prod(shape, dtype=np.int64)) * TAG_DTYPES[tag].itemsize
        pstart = r.pos
        r.take(size, f"{label} payload")
        (crc,) = r.u("I", f"{label} checksum")
        if zlib.crc32(buf[begin:pstart + size]) != crc:
            raise IntegrityError(f"CRC mismatch in {label}")
        spans.append(_Span(name, tag, tuple(shape), pstart, pstart + size))
    rec_stop = r.pos
    (trailer,) = r.u("I", "trailing checksum")
    if zlib.crc32(buf[rec_start:rec_stop]) != trailer:
        raise IntegrityError("CRC mismatch in trailing checksum over all records")
    if r.pos != len(buf):
        raise IntegrityError(f"{len(buf) - r.pos} unexpected trailing bytes after checksum")
    return cfg, spans


def decode(buf: bytes) -> tuple[PiipConfig, dict[str, np.ndarray]]:
    cfg_dict, spans = _scan(buf)
    state = {s.name: np.frombuffer(buf, TAG_DTYPES[s.tag], count=int(np.prod(s.shape, dtype=np.int64)),
                                   offset=s.start).reshape(s.shape).copy() for s in spans}
    return model_from_dict(cfg_dict), state


def save_checkpoint(model: PiipModel, path: str | Path) -> None:
    Path(path).write_bytes(encode(model.cfg, model.state_dict()))


def load_state(model: PiipModel, state: dict[str, np.ndarray]) -> PiipModel:
    """Copy ``state`` into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    missing = [k for k in params if k not in state]
    extra = [k for k in state if k not in params]
    if missing or extra:
        raise DimensionError(f"checkpoint tensors do not match model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        if state[name].shape != p.shape:
            raise DimensionError(f"shape mismatch for tensor {name}: checkpoint {state[name].shape}, model {p.shape}")
    for name, p in params.items():
        p.data = state[name].copy()
        p.grad = None
    return model


def load_checkpoint(path: str | Path, cfg: PiipConfig | None = None) -> PiipModel:
    """Rebuild the model stored at ``path``.

    With ``cfg`` given, that architecture is built instead of the snapshot
    and every stored tensor must fit it.
    """
    snap, state = decode(Path(path).read_bytes())
    target = cfg if cfg is not None else snap
    dtype = next(iter(state.values())).dtype if state else np.float32
    return load_state(build_model(target, dtype=dtype), state)
