"""Counter-based random streams.

Every uniform is a pure function of ``(key, counter, slot)``: the key names a
stream (seed, path index, stage tag), the counter names a draw inside the
stream and the slot names one of the uniforms that make up that draw.  No
state is shared between streams, so results do not depend on how paths are
scheduled across workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numba as nb
import numpy as np

_MASK = (1 << 64) - 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SLOT_MUL = np.uint64(0xD1B54A32D192ED03)
_SLOT_ADD = np.uint64(0x8CB92BA72F3D8DD7)
_CHILD_XOR = np.uint64(0x6A09E667F3BCC909)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True, inline="always")
def fmix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def child_key(key, tag):
    return fmix64(fmix64(key ^ _CHILD_XOR) + np.uint64(tag) * _GOLDEN)


@nb.njit(cache=True, inline="always")
def uniform(key, counter, slot):
    """Uniform in the open interval (0, 1)."""
    z = fmix64(key + np.uint64(counter) * _GOLDEN)
    z = fmix64(z ^ (np.uint64(slot) * _SLOT_MUL + _SLOT_ADD))
    return (np.float64(z >> _S11) + 0.5) * _INV53


@nb.njit(cache=True)
def _child_keys(key, start, count):
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = child_key(key, start + i)
    return out


def child_keys(key, start, count: int) -> np.ndarray:
    """Keys child(key, start), ..., child(key, start + count - 1)."""
    # jitted functions hand uint64 back as Python ints; re-wrap before dispatch
    return _child_keys(np.uint64(int(key)), np.uint64(int(start)), int(count))


# Pure-Python twins used as an independent check of the jitted bit mixing.
def _fmix64_py(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _uniform_py(key: int, counter: int, slot: int) -> float:
    z = _fmix64_py(key + counter * 0x9E3779B97F4A7C15)
    z = _fmix64_py(z ^ ((slot * 0xD1B54A32D192ED03 + 0x8CB92BA72F3D8DD7) & _MASK))
    return ((z >> 11) + 0.5) * _INV53


def tag_id(tag: int | str) -> int:
    """Map a stage tag to a 64-bit integer; strings are hashed stably."""
    if isinstance(tag, str):
        return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")
    if tag < 0:
        raise ValueError("integer tags must be non-negative")
    return int(tag) & _MASK


def derive_key(seed: int, *tags: int | str) -> int:
    """child(seed, tag_1, ..., tag_k) as a plain Python int."""
    key = np.uint64(int(seed) & _MASK)
    for t in tags:
        key = np.uint64(child_key(key, np.uint64(tag_id(t))))
    return int(key)


def path_keys(seed: int, stage: int | str, paths: int, start: int = 0) -> np.ndarray:
    """Keys child(seed, stage, i) for i in [start, start + paths)."""
    base = np.uint64(derive_key(seed, stage))
    return child_keys(base, np.uint64(start), paths)


@dataclass
class RngStream:
    """A single stream; ``counter`` is the index of the next draw."""

    key: int
    counter: int = 0

    @classmethod
    def from_seed(cls, seed: int, *tags: int | str) -> "RngStream":
        return cls(derive_key(seed, *tags))

    def child(self, *tags: int | str) -> "RngStream":
        return RngStream(derive_key(self.key, *tags))

    def uniforms(self, k: int) -> np.ndarray:
        """Consume one draw made of ``k`` uniforms."""
        key = np.uint64(self.key)
        out = np.array([uniform(key, self.counter, j) for j in range(k)])
        self.counter += 1
        return out

    def numpy(self) -> np.random.Generator:
        """A numpy generator seeded from this stream, for non-hot-path work."""
        return np.random.default_rng([self.key & 0xFFFFFFFF, self.key >> 32, self.counter])
