"""
Named random streams.

Every random draw in a run comes from `stream(seed, *names)`: the names
(stage, purpose, ...) are hashed together with the experiment seed, so a new
stage or purpose never shifts the draws of another one.
"""
from __future__ import annotations

import hashlib
import logging
import os
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "MINIMOE_SEED"


def derive_seed(seed: int, *names: object) -> int:
    """64-bit seed from (seed, names) via SHA-256."""
    material = "/".join([str(int(seed))] + [str(n) for n in names]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "little")


def stream(seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def resolve_seed(seed: Optional[int]) -> int:
    """
    Experiment seed, overridable through MINIMOE_SEED.

    A malformed override is ignored with a warning and the given seed is kept.
    """
    override = os.getenv(SEED_ENV_VAR)
    if override:
        try:
            value = int(override)
            logger.info("seed overridden by %s=%d", SEED_ENV_VAR, value)
            return value
        except ValueError:
            logger.warning("ignoring malformed %s=%r", SEED_ENV_VAR, override)
    return 0 if seed is None else int(seed)
