"""Deterministic random-stream derivation from a single root seed.

Every randomized operation in the package draws from a substream derived
from the user-supplied root seed and a documented stream index, so that
parallel execution schedules cannot change results and any single piece
(one bootstrap replicate, one simulation replication) can be replayed in
isolation.

Stream indices
--------------
0  table resampling (:func:`tilttransport.data.resample`)
1  fold assignment (:func:`tilttransport.data.kfold`)
2  bootstrap replicates (one child per replicate index)
3  simulation replications (one child per replication index)
4  calibration (ratio-matching downsamples; children per direction)
"""

from __future__ import annotations

import numpy as np

STREAM_RESAMPLE = 0
STREAM_FOLDS = 1
STREAM_BOOTSTRAP = 2
STREAM_SIMULATION = 3
STREAM_CALIBRATION = 4


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream addressed by ``path`` under ``seed``.

    Identical (seed, path) pairs always yield identical streams; distinct
    paths yield statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=path))
