"""Seed resolution and per-sample seed derivation."""
from typing import Optional

import numpy as np

from app.core.config import Settings


def derive_seed(run_seed: int, sample_id: int) -> int:
    """Independent 32-bit seed for one sample of a run; stable across worker counts."""
    return int(np.random.SeedSequence([int(run_seed), int(sample_id)]).generate_state(1)[0])


def resolve_seed(flag: Optional[int] = None, config: Optional[int] = None) -> int:
    """ILLUSION_SEED from the environment, then the flag, then the config file, then the default."""
    current = Settings()
    for candidate in (current.ILLUSION_SEED, flag, config):
        if candidate is not None:
            return int(candidate)
    return current.DEFAULT_SEED
