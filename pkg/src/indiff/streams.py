"""Counter-based Gaussian streams (Philox4x64-10), vectorised over paths.

Draw ``n`` of path ``p`` under seed ``k`` depends only on ``(k, p, n)``, so a
path is reproduced exactly whatever the batching or worker layout.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def _mulhilo(a: np.uint64, b: NDArray[np.uint64]) -> tuple[NDArray[np.uint64], NDArray[np.uint64]]:
    a_lo, a_hi = a & _LO, a >> _S32
    b_lo, b_hi = b & _LO, b >> _S32
    ll = a_lo * b_lo
    hl = a_hi * b_lo
    lh = a_lo * b_hi
    hh = a_hi * b_hi
    cross = (ll >> _S32) + (hl & _LO) + lh
    hi = hh + (hl >> _S32) + (cross >> _S32)
    return hi, a * b


def philox4x64(ctr: NDArray[np.uint64], key: tuple[int, int]) -> NDArray[np.uint64]:
    """Philox4x64-10 on counters of shape ``(..., 4)``; returns the same shape."""
    c0, c1, c2, c3 = (ctr[..., i].astype(np.uint64) for i in range(4))
    k0, k1 = np.uint64(key[0]), np.uint64(key[1])
    with np.errstate(over="ignore"):
        for rnd in range(10):
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            if rnd < 9:
                k0 = k0 + _W0
                k1 = k1 + _W1
    return np.stack([c0, c1, c2, c3], axis=-1)


def _seed_key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    return seed & 0xFFFFFFFFFFFFFFFF, (seed >> 64) & 0xFFFFFFFFFFFFFFFF


def uniforms(seed: int, path_ids, start: int, count: int, stream: int = 0) -> NDArray[np.float64]:
    """Open-interval uniforms, shape ``(len(path_ids), count)``.

    Uniform ``n`` of a path comes from word ``n % 4`` of the Philox block with
    counter ``(n // 4, path_id, stream, 0)``.
    """
    path_ids = np.asarray(path_ids, dtype=np.uint64).reshape(-1)
    if count <= 0:
        return np.empty((path_ids.size, 0))
    b0, b1 = start // 4, (start + count - 1) // 4 + 1
    blocks = np.arange(b0, b1, dtype=np.uint64)
    ctr = np.zeros((path_ids.size, blocks.size, 4), dtype=np.uint64)
    ctr[..., 0] = blocks[None, :]
    ctr[..., 1] = path_ids[:, None]
    ctr[..., 2] = np.uint64(stream)
    words = philox4x64(ctr, _seed_key(seed)).reshape(path_ids.size, -1)
    off = start - 4 * b0
    words = words[:, off: off + count]
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, path_ids, start: int, count: int, stream: int = 0) -> NDArray[np.float64]:
    """Standard normals, shape ``(len(path_ids), count)``, via Box-Muller.

    Normal ``n`` uses uniforms ``2(n//2)`` and ``2(n//2)+1`` of the path, so any
    window ``[start, start+count)`` reproduces the same values.
    """
    if count <= 0:
        return np.empty((np.size(path_ids), 0))
    p0, p1 = start // 2, (start + count - 1) // 2 + 1
    u = uniforms(seed, path_ids, 2 * p0, 2 * (p1 - p0), stream)
    u1, u2 = u[:, 0::2], u[:, 1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty((u.shape[0], 2 * (p1 - p0)))
    z[:, 0::2] = rad * np.cos(ang)
    z[:, 1::2] = rad * np.sin(ang)
    off = start - 2 * p0
    return z[:, off: off + count]
