"""Named random substreams, all derived from the single run seed.

Each component draws from its own stream so toggling one (say, strong
augmentation) never perturbs the randomness seen by another — required
for clean ablations.
"""

import numpy as np

_STREAM_IDS = {
    "data": 1,
    "split": 2,
    "init_student": 3,
    "init_t1": 4,
    "init_t2": 5,
    "batch_labeled": 6,
    "batch_unlabeled": 7,
    "aug_labeled": 8,
    "aug_unlabeled": 9,
    "rpa": 10,
}


def substream(seed, name, *extra):
    """Deterministic per-purpose generator for (seed, stream, *extra)."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _STREAM_IDS[name], *map(int, extra)])
    )
