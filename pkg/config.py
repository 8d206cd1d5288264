# config.py
"""
Shared plumbing for every voxmim module:
- the exception family the CLI maps onto exit codes
- the seed-derivation tree (one master seed -> independent sub-streams)
- environment loading (.env) and logging setup
"""

import hashlib
import logging
import os
from typing import Optional, Tuple, Union

import numpy as np
import torch
from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DEFAULT_LOG_LEVEL = os.getenv("VOXMIM_LOG_LEVEL", "INFO")

SeedKey = Union[int, str]


# ----------------------------
# Errors
# ----------------------------
class VoxmimError(Exception):
    """Root of every error raised on purpose by this package."""


class ConfigError(VoxmimError, ValueError):
    """Bad configuration value or unknown key."""


# ----------------------------
# Seed derivation tree
# ----------------------------
def _key_to_int(key: SeedKey) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ConfigError(f"Seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *path: SeedKey) -> np.random.SeedSequence:
    """
    SeedSequence for the branch `path` under master `seed`.

    Strings are hashed with sha256 (never Python's salted hash), so the same
    (seed, path) yields the same stream on every run and platform.
    """
    if seed < 0:
        raise ConfigError(f"Seed must be non-negative, got {seed}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in path))


def derive_rng(seed: int, *path: SeedKey) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))


def derive_seed(seed: int, *path: SeedKey) -> int:
    """A 63-bit integer seed for consumers that want a plain int (torch)."""
    return int(seed_sequence(seed, *path).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, *path: SeedKey) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *path))
    return gen


# ----------------------------
# Runtime setup
# ----------------------------
def setup_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=getattr(logging, (level or DEFAULT_LOG_LEVEL).upper(), logging.INFO), format=LOG_FORMAT)


def enable_determinism(num_threads: int = 1) -> None:
    """Pin torch to deterministic kernels and a fixed intra-op thread count."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(num_threads)


def round_half_up(x: float) -> int:
    """round(x) with .5 going up (Python's round() is banker's rounding)."""
    # slack so 0.7 * 5 lands on 3.5 rather than 3.4999...
    return int(np.floor(x + 0.5 + 1e-9))


def as_triple(values, name: str, kind=float) -> Tuple:
    items = tuple(kind(v) for v in values)
    if len(items) != 3:
        raise ConfigError(f"{name} must have exactly three components, got {len(items)}")
    return items
