"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed on
``(seed, purpose, *counters)``. Two streams with different purposes or
counters never share state, so results do not depend on call order or on
how work is scheduled across processes.
"""

from __future__ import annotations

import numpy as np

# Purpose codes are part of the reproducibility contract; never renumber.
PURPOSES = {
    "design": 1,
    "support": 2,
    "coefficients": 3,
    "noise": 4,
    "init": 10,
    "minfind": 11,
    "mechanism": 12,
    "laplace": 13,
    "oracle_noise": 20,
    "oracle_failure": 21,
    "data_seed": 30,
    "cell_seed": 31,
    "audit": 40,
}


def _key(seed: int, purpose: str, counters: tuple[int, ...]) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if any(c < 0 for c in counters):
        raise ValueError(f"stream counters must be non-negative, got {counters}")
    # SeedSequence ignores trailing zeros, so the counter count is part of the key
    return np.random.SeedSequence([int(seed), PURPOSES[purpose], len(counters), *map(int, counters)])


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *counters)``."""
    return np.random.Generator(np.random.Philox(_key(seed, purpose, counters)))


def derive_seed(seed: int, purpose: str, *counters: int) -> int:
    """Fan a master seed out to a child seed (a non-negative 63-bit int)."""
    key = _key(seed, purpose, counters)
    return int(key.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
