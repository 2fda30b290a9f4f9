"""Deterministic counter-based random streams keyed by sample identity.

Every sample key ``(campaign_seed, level, index)`` hashes to a 128-bit Philox
key.  Fine and coarse evaluations of a coupled pair rebuild the same stream
from that key, so they see the identical random input.
"""
from __future__ import annotations

import hashlib
import struct
from typing import NamedTuple

import numpy as np

_MASK64 = (1 << 64) - 1


class SampleKey(NamedTuple):
    campaign_seed: int
    level: int
    index: int


def stream_key(key: SampleKey) -> int:
    """128-bit stream key; the random input ``omega`` of the sample."""
    seed, level, index = key
    if level < 0 or index < 0:
        raise ValueError(f"invalid sample key {key}")
    payload = struct.pack("<QQQ", seed & _MASK64, level, index)
    digest = hashlib.blake2b(payload, digest_size=16, person=b"ofmlmc.stream").digest()
    return int.from_bytes(digest, "little")


def stream_id(key: SampleKey) -> int:
    """64-bit identifier of a stream, used for collision scans."""
    return stream_key(key) & _MASK64


def stream_from(omega: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=omega))


def derive_stream(key: SampleKey) -> np.random.Generator:
    return stream_from(stream_key(key))


def uniform_from(omega: int, salt: bytes) -> float:
    """A uniform in [0, 1) derived from ``omega`` without touching its stream."""
    digest = hashlib.blake2b(omega.to_bytes(16, "little"), digest_size=8, person=salt[:16]).digest()
    return int.from_bytes(digest, "little") / 2.0**64
