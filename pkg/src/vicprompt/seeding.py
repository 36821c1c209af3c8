"""Deterministic seed derivation.

Every random stream in the package is derived from one root seed plus a
tuple of fixed labels, so components never share or perturb each other's
streams.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *labels: object) -> int:
    """Return a 63-bit seed that depends only on ``root`` and ``labels``."""
    h = hashlib.sha256(repr((int(root),) + tuple(str(x) for x in labels)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def np_rng(root: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def torch_gen(root: int, *labels: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *labels))
    return g
