"""Seedable random streams addressed by label."""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


class Rng:
    """A root seed from which independent generators are split by name.

    ``Rng(7).stream("init/block0")`` always yields the same generator state,
    whatever other streams were drawn before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, label: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, _label_key(label)]))

    def child(self, label: str) -> "Rng":
        return Rng(int(np.random.SeedSequence([self.seed, _label_key(label)]).generate_state(1)[0]))
