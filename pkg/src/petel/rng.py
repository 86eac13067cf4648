"""Seeded random streams.

All randomness flows through :func:`make_rng`, a Philox counter-based
generator keyed by a seed and an integer path. Streams with different
paths are statistically independent, so chains, replicates and
resamples can be seeded from one user seed without overlap.
"""
import numpy as np


def make_rng(seed, *path):
    """Return a generator for the substream ``path`` of ``seed``.

    Parameters
    ----------
    seed : int
        Non-negative user seed (up to 64 bits).
    *path : int
        Substream coordinates, e.g. ``(replicate, role)``.

    Returns
    -------
    numpy.random.Generator
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def substream_seed(seed, *path):
    """A 63-bit integer seed derived from ``seed`` and ``path``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
