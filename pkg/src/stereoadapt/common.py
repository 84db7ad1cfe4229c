"""Small shared helpers: the left/right pair container and deterministic mode."""

from __future__ import annotations

import os
import random
from typing import Any, NamedTuple

import numpy as np
import torch

class ViewPair(NamedTuple):
    left: Any
    right: Any

    def map(self, fn) -> "ViewPair":
        return ViewPair(fn(self.left), fn(self.right))

    def swapped(self) -> "ViewPair":
        return ViewPair(self.right, self.left)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python/numpy/torch RNGs; optionally forbid nondeterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
