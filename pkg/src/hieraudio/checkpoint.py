"""HTSC checkpoint files.

Little-endian layout::

    b"HTSC"  u32 version
    u32 config length, config text (UTF-8, ``key = value`` lines)
    u32 parameter count, then per parameter:
        u32 name length, name (UTF-8), u32 rank, rank x u32 extents, float32 data
    u64 checksum: first 8 bytes of SHA-256 over everything before it
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, dump_config, parse_config
from .model import param_shapes

MAGIC = b"HTSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> int:
    return struct.unpack("<Q", hashlib.sha256(payload).digest()[:8])[0]


def encode(cfg: Config, params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = dump_config(cfg).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape),
                  np.ascontiguousarray(arr).tobytes()]
    payload = b"".join(parts)
    return payload + struct.pack("<Q", _checksum(payload))


def decode(blob: bytes, expect: Config | None = None) -> tuple[Config, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an HTSC checkpoint (bad magic)")
    payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = take("<I")
        cfg = parse_config(payload[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            (n,) = take("<I")
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = take("<I")
            shape = take(f"<{rank}I")
            size = int(np.prod(shape, dtype=np.int64)) * 4
            params[name] = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(
                np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        if isinstance(exc, ConfigError):
            raise CheckpointError(f"bad config echo: {exc}") from None
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(payload):
        raise CheckpointError(f"{len(payload) - pos} trailing bytes after parameters")
    _validate(cfg, params, expect)
    return cfg, params


def _validate(cfg: Config, params: dict, expect: Config | None) -> None:
    if expect is not None and expect.model != cfg.model:
        diff = [k for k in vars(cfg.model) if getattr(cfg.model, k) != getattr(expect.model, k)]
        raise CheckpointError(f"checkpoint model config differs from the expected one in: {', '.join(diff)}")
    want = param_shapes(cfg.model)
    got = {k: v.shape for k, v in params.items()}
    if got != want:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        wrong = sorted(k for k in set(want) & set(got) if want[k] != got[k])
        raise CheckpointError(f"parameters do not match the config: missing {missing}, "
                              f"unexpected {extra}, wrong shape {wrong}")


def save_checkpoint(path, cfg: Config, params: dict) -> None:
    Path(path).write_bytes(encode(cfg, params))


def load_checkpoint(path, expect: Config | None = None) -> tuple[Config, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return decode(path.read_bytes(), expect)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
