"""Seed derivation and a portable Gaussian stream.

Splitting rule: the seed for component ``name`` under master seed ``s`` is the
first 64-bit word of ``numpy.random.SeedSequence([s, crc32(name)])``.
SeedSequence's hashing is specified and version-stable, so child seeds agree
across platforms.

Encoder weights that must be bit-reproducible everywhere use
:func:`philox_normal`: raw 64-bit words from Philox4x64-10 keyed by the seed
(counter starting at zero), mapped to 53-bit uniforms and then to normals with
the Box-Muller transform. Only the raw word stream and IEEE arithmetic are
involved, so no numpy sampling algorithm can change the output.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, name))


def philox_uniform(seed: int, n: int) -> np.ndarray:
    """``n`` doubles in (0, 1) from the Philox4x64-10 raw stream."""
    bg = np.random.Philox(key=int(seed) & (2 ** 64 - 1))
    words = bg.random_raw(n)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 2 ** 53)


def philox_normal(seed: int, shape) -> np.ndarray:
    shape = tuple(np.atleast_1d(shape))
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u = philox_uniform(seed, 2 * m)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(shape)
