"""Deterministic random substreams.

Every stochastic quantity in the library is drawn from a substream keyed by
a tuple of non-negative integers (master seed, phase tag, indices...), so
results are bit-identical regardless of evaluation order or parallelism.
"""

from __future__ import annotations

import numpy as np

# Phase tags for substream keys. Values are arbitrary but frozen: changing
# them changes every derived random stream.
TAG_SYSTEM = 11          # orthonormal basis U and input matrix B
TAG_TRAIN_THETAS = 12
TAG_TEST_THETAS = 13
TAG_INIT_POLICY = 21
TAG_TRAIN_NOISE = 31     # per (step, batch-member) rollout noise
TAG_EVAL_NOISE = 32      # per test-set-member rollout noise, fixed per run
TAG_FD = 41              # plane-fit perturbations, per step
TAG_SHUFFLE = 42         # per-epoch training-set permutation
TAG_POUR_WORLDS = 51
TAG_POUR_NOISE = 52
TAG_REPS = 61


def substream(*key: int) -> np.random.Generator:
    """Generator seeded by an integer key tuple."""
    return np.random.default_rng(list(key))


def explore_task_keys(seed: int, tag: int, *idx: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Paired seed sequences for one pipeline deployment.

    The first seeds the exploration-rollout noise, the second the
    task-rollout noise. Oracle and deployed task rollouts for the same
    sample reuse the second sequence so regret isolates identification
    error rather than noise realizations.
    """
    ss = np.random.SeedSequence([seed, tag, *idx])
    explore_ss, task_ss = ss.spawn(2)
    return explore_ss, task_ss
