"""Counter-based random streams.

Every random draw in the package goes through a generator obtained from
:func:`stream`, keyed by ``(run_seed, purpose, *indices)``.  Philox is
counter-based, so two streams with different keys are independent no matter
how many values either one consumes, and a stream can be re-created mid-run
from its key alone.  No module ever touches numpy's global RNG.
"""

from __future__ import annotations

import numpy as np

# Purpose tags. Keep values stable: they are part of every run's key space,
# and checkpoints only store counters, not generator state.
ACTION = 1          # exploration noise while collecting
DRAW = 2            # main virtual source (db index or initial pose)
STREAMS = 3         # extra parallel virtual sources
GOAL = 4            # per-episode goal sampling
HER = 5             # future-index sampling for goal relabeling
UPDATE = 6          # batch indices + reparameterization noise
EVAL = 7            # evaluation episodes (disjoint from training by key)
INIT = 8            # network weight init
DBGEN = 9           # recorded-database generation


def stream(run_seed: int, purpose: int, *indices: int) -> np.random.Generator:
    """Return the generator for one (seed, purpose, indices...) key."""
    ss = np.random.SeedSequence(entropy=run_seed, spawn_key=(purpose, *indices))
    return np.random.Generator(np.random.Philox(ss))
