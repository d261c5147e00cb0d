"""Binary shard format for channel samples plus JSON sidecar manifests.

Layout (little-endian): magic "PWCH", version u32, T u32, S u32, F u32,
count u64, carrier f64; then per sample: id u64, los u8, speed f32,
large_scale_db f32, followed by T*S*F interleaved (re f32, im f32) values in
t-major, then s, then f order. Round-trips are bitwise lossless.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .channel import ChannelSample

MAGIC = b"PWCH"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQd")
_SAMPLE_HEAD = struct.Struct("<QBff")


class ShardError(ValueError):
    pass


def write_shard(samples: list[ChannelSample], path: str | Path) -> int:
    """Write samples to a shard; returns the sample count."""
    if not samples:
        raise ShardError("cannot write an empty shard")
    T, S, F = samples[0].H.shape
    carrier = samples[0].carrier_hz
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, S, F, len(samples), carrier))
        for s in samples:
            if s.H.shape != (T, S, F):
                raise ShardError(f"inconsistent sample dims {s.H.shape} vs {(T, S, F)}")
            fh.write(_SAMPLE_HEAD.pack(s.sample_id, int(s.los), s.speed_mps,
                                       s.large_scale_db))
            fh.write(np.ascontiguousarray(s.H, dtype="<c8").tobytes())
    return len(samples)


def read_shard(path: str | Path, expect_dims: tuple[int, int, int] | None = None
               ) -> list[ChannelSample]:
    """Read a shard back; optionally enforce the (T, S, F) grid of a config."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ShardError("truncated shard: missing header")
    magic, version, T, S, F, count, carrier = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ShardError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ShardError(f"unsupported shard version {version}")
    if expect_dims is not None and (T, S, F) != tuple(expect_dims):
        raise ShardError(f"shard dims {(T, S, F)} do not match config {expect_dims}")
    rec = _SAMPLE_HEAD.size + T * S * F * 8
    if len(raw) != _HEADER.size + count * rec:
        raise ShardError("truncated shard: size does not match header count")
    out = []
    off = _HEADER.size
    for _ in range(count):
        sid, los, speed, ls_db = _SAMPLE_HEAD.unpack_from(raw, off)
        off += _SAMPLE_HEAD.size
        H = np.frombuffer(raw, dtype="<c8", count=T * S * F, offset=off)
        off += T * S * F * 8
        out.append(ChannelSample(H=H.reshape(T, S, F).copy(), los=bool(los),
                                 speed_mps=speed, carrier_hz=carrier,
                                 large_scale_db=ls_db, sample_id=sid))
    return out


def write_manifest(path: str | Path, config_echo: dict, seed: int,
                   config_hash: str, extra: dict | None = None):
    doc = {"config": config_echo, "seed": seed, "config_hash": config_hash}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
