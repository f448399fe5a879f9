"""Seeded random-number streams with serializable state.

Every stochastic operation in the package draws from a generator built
here, keyed by (seed, stream). Distinct purposes (simulation, shuffling,
weight init, dropout, sampling) use distinct stream ids so that changing
one does not perturb the others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stream ids, one per purpose.
STREAM_SIMULATE = 0
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_DROPOUT = 3
STREAM_SAMPLE = 4


@dataclass(frozen=True)
class RngState:
    """Identifies a reproducible draw sequence: same (seed, stream) -> same draws."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return RngState(seed, stream).generator()


def save_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's internal state."""
    state = gen.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": int(state["state"]["state"]),
        "inc": int(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def load_state(snapshot: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": snapshot["bit_generator"],
        "state": {"state": int(snapshot["state"]), "inc": int(snapshot["inc"])},
        "has_uint32": int(snapshot["has_uint32"]),
        "uinteger": int(snapshot["uinteger"]),
    }
    return gen
