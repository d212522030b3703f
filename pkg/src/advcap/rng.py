"""Seedable random streams with portable, checkpointable state.

All randomness in this package flows through ``Stream``, a thin wrapper around
numpy's PCG64 bit generator. PCG64 has a published algorithm and an explicit
integer state, so a checkpointed stream resumes bit-identically. Independent
streams (parameter init, generator-side sampling, discriminator-side sampling,
...) are derived from one base seed plus a label via SHA-256, which makes each
stream a pure function of (seed, label) and keeps parallel sweep cells
order-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGO = "pcg64"
STATE_VERSION = 1


def derive_seed(base_seed: int, label: str) -> int:
    """Map (base_seed, label) to a 64-bit stream seed, stable across runs."""
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Stream:
    """A named PCG64 random stream whose state round-trips through JSON."""

    def __init__(self, seed: int, label: str = ""):
        self.label = label
        self.gen = np.random.Generator(np.random.PCG64(seed))

    @classmethod
    def derived(cls, base_seed: int, label: str) -> "Stream":
        return cls(derive_seed(base_seed, label), label)

    # -- state (all integers serialized as decimal strings: JSON-safe) -------

    def get_state(self) -> dict:
        st = self.gen.bit_generator.state
        return {
            "algo": ALGO,
            "version": STATE_VERSION,
            "label": self.label,
            "state": str(st["state"]["state"]),
            "inc": str(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, blob: dict) -> None:
        if blob.get("algo") != ALGO or blob.get("version") != STATE_VERSION:
            raise ValueError(f"incompatible rng state: {blob.get('algo')}/{blob.get('version')}")
        self.label = blob.get("label", self.label)
        self.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(blob["state"]), "inc": int(blob["inc"])},
            "has_uint32": int(blob["has_uint32"]),
            "uinteger": int(blob["uinteger"]),
        }

    # -- draws ---------------------------------------------------------------

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high=high, size=size)

    def uniform(self, size=None):
        return self.gen.random(size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size=size)

    def choice(self, n, size=None, replace=True):
        return self.gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)
