"""Named random substreams derived from a single master seed.

Every source of randomness in an experiment draws from a stream addressed by
the master seed plus a tuple of string/int keys (e.g. ``("select", client_id,
cohort, round)``).  Streams are mutually independent and stable across runs
and platforms, so sweeping one subsystem's parameter leaves every other
subsystem's draws untouched.
"""

from __future__ import annotations

import hashlib

import numpy as np

_KeyPart = int | str | tuple


def _pack(part: _KeyPart, out: bytearray) -> None:
    if isinstance(part, bool):
        out += b"b" + bytes([part])
    elif isinstance(part, int):
        out += b"i" + part.to_bytes(16, "little", signed=True)
    elif isinstance(part, str):
        out += b"s" + part.encode("utf-8") + b"\x00"
    elif isinstance(part, tuple):
        out += b"t"
        for p in part:
            _pack(p, out)
        out += b"\x00"
    else:
        raise TypeError(f"unsupported stream key part: {part!r}")


def stream_seed(master: int, *keys: _KeyPart) -> int:
    """128-bit integer seed for the stream named by ``keys``."""
    buf = bytearray()
    _pack(master, buf)
    for k in keys:
        _pack(k, buf)
    digest = hashlib.blake2b(bytes(buf), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def substream(master: int, *keys: _KeyPart) -> np.random.Generator:
    """Independent generator for the stream named by ``keys``."""
    return np.random.default_rng(np.random.SeedSequence(stream_seed(master, *keys)))


def ensure_rng(rng: np.random.Generator | int) -> np.random.Generator:
    """Accept either a generator or a plain integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
