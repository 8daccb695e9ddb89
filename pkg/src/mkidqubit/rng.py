"""Keyed, order-independent random streams.

Every random draw in a run is addressed by ``(seed, *labels)`` rather than by
the order in which work happens, so results do not depend on how segments
are scheduled across workers.
"""
import zlib

import numpy as np
from scipy.special import ndtri

_TWO_M53 = 2.0 ** -53


def _label_int(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode())


def keyed_rng(seed, *labels):
    """Independent ``Generator`` for a labelled stream of a run."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_int(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))


def philox_key(seed, *labels):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_int(x) for x in labels))
    return ss.generate_state(2, dtype=np.uint64)


def counter_uniforms(key, start_block, n_blocks):
    """Uniforms in (0, 1) for Philox counter blocks ``start_block .. start_block + n_blocks``.

    Each block yields four values and is a pure function of ``(key, block)``.
    """
    if n_blocks <= 0:
        return np.empty(0)
    bg = np.random.Philox(key=key, counter=[int(start_block), 0, 0, 0])
    raw = bg.random_raw(4 * int(n_blocks))
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def counter_normals(key, start_block, n_blocks):
    """Standard normals by inverse CDF, one per uniform from :func:`counter_uniforms`."""
    return ndtri(counter_uniforms(key, start_block, n_blocks))
