"""Deterministic batch assembly shared by both training stages.

Every random choice is drawn from a ``SeedSequence`` keyed on the run seed,
the epoch and the sample id, so a run can be resumed at any epoch boundary
and reproduce the uninterrupted run bit for bit.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, Sequence

import numpy as np

from .augment import AugmentPolicy, augment_clip, eval_clip
from .corpus import CorpusRecord
from .model import pad_batch

SHUFFLE_TAG = 0x5348
MASK_TAG = 0x4D41
AUG_STRIDE = 1_000_003


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, SHUFFLE_TAG]))
    return rng.permutation(n)


def batch_slices(n: int, batch_size: int, drop_last: bool) -> list[slice]:
    stop = n - n % batch_size if drop_last else n
    return [slice(i, min(i + batch_size, n)) for i in range(0, stop, batch_size)]


def mask_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, sample_id, MASK_TAG]))


def train_clips(records: Sequence[CorpusRecord], policy: AugmentPolicy, epoch: int,
                workers: int = 1) -> tuple[list[np.ndarray], list[int]]:
    """Augmented frames for a batch; results are ordered, so threads do not affect output."""
    def one(r):
        return augment_clip(r.clip, policy, epoch * AUG_STRIDE + r.sample_id)

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(workers) as pool:
            clips = list(pool.map(one, records))
    else:
        clips = [one(r) for r in records]
    return [c.frames for c in clips], [c.valid_len for c in clips]


def eval_clips(records: Sequence[CorpusRecord], policy: AugmentPolicy | None
               ) -> tuple[list[np.ndarray], list[int]]:
    clips = [eval_clip(r.clip, policy) for r in records]
    return [c.frames for c in clips], [c.valid_len for c in clips]


def sentences(records: Sequence[CorpusRecord]) -> np.ndarray:
    return pad_batch([r.sentence for r in records])


def chunks(records: Sequence[CorpusRecord], size: int) -> Iterator[Sequence[CorpusRecord]]:
    for i in range(0, len(records), size):
        yield records[i:i + size]
