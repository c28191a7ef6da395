"""Deterministic random streams.

Treatment and outcome draws use counter-style hashing keyed by
(seed, unit id, purpose) so that re-running selection with different
downstream consumption can never change an individual unit's draws.
Everything else (pool sampling, bootstrap resampling, tie shuffles)
uses numpy Generators derived from a master seed.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)

# purpose tags for per-unit streams
TREATMENT = 0x51ED270693E06F85
OUTCOME = 0x9E6C63D0976A0C27


def _splitmix64(z):
    """One round of splitmix64 on a uint64 array (wraparound intended)."""
    with np.errstate(over="ignore"):
        z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
        return z ^ (z >> np.uint64(31))


def unit_uniform(seed, unit_ids, purpose):
    """Uniform(0,1) draws keyed by (seed, unit id, purpose).

    Vectorized over unit_ids; the same triple always yields the same value.
    """
    ids = np.asarray(unit_ids, dtype=np.uint64)
    h = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(purpose))
    z = _splitmix64(ids ^ h)
    z = _splitmix64(z ^ np.uint64(purpose))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(master_seed, *parts):
    """Derive an integer sub-seed from a master seed and context parts."""
    z = np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF)
    for p in parts:
        z = _splitmix64(z ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF))
    return int(z)


def rng_for(master_seed, *parts):
    """A numpy Generator for a named sub-stream of the master seed."""
    return np.random.default_rng(derive_seed(master_seed, *parts))
