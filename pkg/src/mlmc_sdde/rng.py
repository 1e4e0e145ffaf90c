"""Counter-based Gaussian noise with coordinate addressing.

Every normal variate used by a simulation is a pure function of the tuple
``(master_seed, level, path_index, step, substep, component)``.  That makes
runs reproducible independently of execution order or worker count, lets a
coarse path consume exactly the sum of its fine path's increments, and lets
independent estimator shards draw disjoint path ranges without
communication.

The word generator is Philox-4x64 with 10 rounds.  Counter layout per
128-bit block: ``(step, substep, path_index, block)`` where ``block``
indexes groups of four output words for noise dimensions above four.  The
key is ``(master_seed, level)``.  Words map to uniforms in (0, 1) via the
top 52 bits, ``u = ((w >> 12) + 0.5) * 2**-52`` (both endpoints of the
word range land strictly inside the unit interval, with one bit to spare
so the rounding of ``+ 0.5`` is exact), and uniforms map to normals
through the inverse normal CDF (``scipy.special.ndtri``); the
inverse-CDF transform is chosen over rejection samplers because it
consumes a fixed number of words per variate, which the addressing scheme
requires.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import ndtri

__all__ = ["NoiseStream", "philox_words", "uniforms_from_words"]

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = 0x9E3779B97F4A7C15
_W1 = 0xBB67AE8584CAA73B
_MASK64 = 0xFFFFFFFFFFFFFFFF
_MASK32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
_INV52 = 2.0**-52


def _mul_hi(a: np.uint64, b: np.ndarray) -> np.ndarray:
    # High 64 bits of a 64x64 product via 32-bit limbs; all uint64 ops wrap.
    a_hi = a >> _SH32
    a_lo = a & _MASK32
    b_hi = b >> _SH32
    b_lo = b & _MASK32
    lo_lo = a_lo * b_lo
    mid1 = a_hi * b_lo
    mid2 = a_lo * b_hi
    carry = (lo_lo >> _SH32) + (mid1 & _MASK32) + (mid2 & _MASK32)
    return a_hi * b_hi + (mid1 >> _SH32) + (mid2 >> _SH32) + (carry >> _SH32)


def philox_words(counter, key) -> np.ndarray:
    """Philox-4x64-10 block function, vectorised over trailing axes.

    Parameters
    ----------
    counter : array_like
        Four uint64 words; entries may be arrays, they broadcast together.
    key : (int, int)
        Two uint64 key words.

    Returns
    -------
    ndarray, shape broadcast(counter) + (4,)
        The four output words of each block.
    """
    c = [np.asarray(w, dtype=np.uint64) for w in counter]
    if len(c) != 4:
        raise ValueError("counter must have four words")
    bshape = np.broadcast_shapes(*(w.shape for w in c))
    # work on 1-d buffers: wrapping arithmetic on 0-d scalars warns
    c0, c1, c2, c3 = (
        np.broadcast_to(w, bshape).reshape(-1).copy() for w in c
    )
    k0 = int(key[0]) & _MASK64
    k1 = int(key[1]) & _MASK64
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & _MASK64
            k1 = (k1 + _W1) & _MASK64
        k0u = np.uint64(k0)
        k1u = np.uint64(k1)
        lo0 = _M0 * c0
        hi0 = _mul_hi(_M0, c0)
        lo1 = _M1 * c2
        hi1 = _mul_hi(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0u, lo1, hi0 ^ c3 ^ k1u, lo0
    return np.stack([c0, c1, c2, c3], axis=-1).reshape(bshape + (4,))


def uniforms_from_words(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to floats strictly inside (0, 1)."""
    w = np.asarray(words, dtype=np.uint64)
    return ((w >> np.uint64(12)).astype(np.float64) + 0.5) * _INV52


def _as_path_array(path_index) -> tuple[np.ndarray, bool]:
    scalar = np.isscalar(path_index) or np.ndim(path_index) == 0
    arr = np.atleast_1d(np.asarray(path_index))
    if arr.ndim != 1:
        raise ValueError("path_index must be a scalar or a 1-d array")
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError("path_index must be integer-valued")
    if arr.size and int(arr.min()) < 0:
        raise ValueError("path_index must be non-negative")
    return arr.astype(np.uint64), scalar


@dataclass(frozen=True)
class NoiseStream:
    """Addressable source of standard normal increments.

    Parameters
    ----------
    master_seed : int
        Experiment seed, first key word.
    level : int
        Level tag, second key word.  Streams with different levels are
        independent even for the same seed.
    path_index : int or ndarray of int
        Sample path (or batch of paths) this stream draws for.
    dim : int
        Number of normal components per increment.
    substeps : int
        Fine substeps per coarse step; 1 for a single-grid stream.
    n_steps : int, optional
        Number of coarse steps on the declared grid.  When set, requests
        outside ``0 <= step < n_steps`` raise ``IndexError``.

    Notes
    -----
    ``gaussian_increment(n, k)`` returns the i.i.d. N(0, I_dim) vector
    attached to substep ``k`` of coarse step ``n``; for a batch
    ``path_index`` of shape (P,) the result has shape (P, dim).  The
    object holds no mutable state, so draws may be requested in any order
    and from any thread with identical results.
    """

    master_seed: int
    level: int
    path_index: Union[int, np.ndarray]
    dim: int
    substeps: int = 1
    n_steps: int | None = None

    def __post_init__(self):
        if not 0 <= int(self.master_seed) <= _MASK64:
            raise ValueError("master_seed must fit in an unsigned 64-bit word")
        if int(self.level) < 0:
            raise ValueError("level must be non-negative")
        if int(self.dim) < 1:
            raise ValueError("dim must be >= 1")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        if self.n_steps is not None and int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1 when given")
        _as_path_array(self.path_index)  # validate eagerly

    # -- addressing ---------------------------------------------------

    def _check(self, n: int, k: int) -> None:
        if not 0 <= k < self.substeps:
            raise IndexError(
                f"substep {k} outside [0, {self.substeps}) for this stream"
            )
        if n < 0 or (self.n_steps is not None and n >= self.n_steps):
            bound = self.n_steps if self.n_steps is not None else "inf"
            raise IndexError(f"step {n} outside [0, {bound}) for this stream")

    def gaussian_increment(self, n: int, k: int = 0) -> np.ndarray:
        """N(0, I_dim) vector for substep ``k`` of coarse step ``n``."""
        n = int(n)
        k = int(k)
        self._check(n, k)
        paths, scalar = _as_path_array(self.path_index)
        key = (int(self.master_seed), int(self.level))
        nblocks = -(-self.dim // 4)
        cols = []
        for block in range(nblocks):
            words = philox_words(
                (np.uint64(n), np.uint64(k), paths, np.uint64(block)), key
            )
            cols.append(uniforms_from_words(words))
        u = np.concatenate(cols, axis=-1)[..., : self.dim]
        z = ndtri(u)
        return z[0] if scalar else z

    def coarse_increment(self, n: int, m: int | None = None) -> np.ndarray:
        """Elementwise sum of the ``m`` fine draws of coarse step ``n``.

        Equals ``sum_k gaussian_increment(n, k)`` accumulated in substep
        order, bit for bit.
        """
        m = self.substeps if m is None else int(m)
        if not 1 <= m <= self.substeps:
            raise ValueError(f"m must lie in [1, {self.substeps}], got {m}")
        out = self.gaussian_increment(n, 0)
        for k in range(1, m):
            out = out + self.gaussian_increment(n, k)
        return out

    def fine_step(self, j: int) -> np.ndarray:
        """Draw for flat fine-grid step ``j`` = ``n * substeps + k``."""
        j = int(j)
        if j < 0:
            raise IndexError(f"fine step {j} must be non-negative")
        return self.gaussian_increment(j // self.substeps, j % self.substeps)

    # -- helpers ------------------------------------------------------

    def with_paths(self, path_index) -> "NoiseStream":
        """Same stream identity, different path batch."""
        return NoiseStream(
            master_seed=self.master_seed,
            level=self.level,
            path_index=path_index,
            dim=self.dim,
            substeps=self.substeps,
            n_steps=self.n_steps,
        )

    @property
    def n_paths(self) -> int:
        arr, scalar = _as_path_array(self.path_index)
        return 1 if scalar else arr.size
