"""Stage-1 and stage-2 training objectives and BERT-style sentence masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import MASK, N_SPECIAL, PAD
from .numerics import Tensor


class ObjectiveError(ValueError):
    pass


@dataclass
class MaskedSentence:
    corrupted: np.ndarray
    original: np.ndarray
    positions: np.ndarray     # sorted indices into the sentence
    kinds: np.ndarray         # 0 = [MASK], 1 = random token, 2 = kept


def mask_sentence(tokens, rho: float, rng: np.random.Generator, vocab_size: int) -> MaskedSentence:
    """Select ``max(1, floor(rho * n))`` non-special positions and corrupt them 80/10/10."""
    if not 0 < rho < 1:
        raise ObjectiveError(f"mask rate must be in (0, 1), got {rho}")
    original = np.asarray(tokens, dtype=np.int64)
    maskable = np.flatnonzero(original >= N_SPECIAL)
    if maskable.size == 0:
        raise ObjectiveError("sentence has no maskable tokens")
    n = max(1, int(np.floor(rho * maskable.size)))
    positions = np.sort(rng.choice(maskable, size=n, replace=False))
    u = rng.random(n)
    kinds = np.where(u < 0.8, 0, np.where(u < 0.9, 1, 2))
    corrupted = original.copy()
    n_regular = vocab_size - N_SPECIAL
    for pos, kind in zip(positions, kinds):
        if kind == 0:
            corrupted[pos] = MASK
        elif kind == 1:
            if n_regular < 2:
                raise ObjectiveError("random substitution needs >= 2 regular tokens")
            # uniform over regular tokens other than the original
            r = int(rng.integers(n_regular - 1)) + N_SPECIAL
            corrupted[pos] = r + (r >= original[pos])
    return MaskedSentence(corrupted, original, positions, kinds)


def contrastive_loss(v: Tensor, t: Tensor, scale) -> Tensor:
    """Symmetric in-batch InfoNCE on unit vectors.

    ``logits = scale * v @ t.T``; the loss averages the row-wise
    (video -> text) and column-wise (text -> video) cross-entropies against the
    diagonal pairing, each taken as a mean over the batch.
    """
    logits = nx.mul(nx.matmul(v, nx.transpose(t, (1, 0))), scale)
    return symmetric_ce(logits)


def symmetric_ce(logits: Tensor) -> Tensor:
    N = logits.shape[0]
    eye = np.eye(N, dtype=logits.data.dtype)
    rows = nx.sum(nx.mul(nx.log_softmax(logits, axis=1), eye))
    cols = nx.sum(nx.mul(nx.log_softmax(logits, axis=0), eye))
    return nx.mul(nx.add(rows, cols), -0.5 / N)


def restoration_loss(logits: Tensor, original: np.ndarray, positions: list[np.ndarray]) -> Tensor:
    """Mean cross-entropy over masked positions only.

    ``logits[b, i]`` is the teacher-forced prediction of ``original[b, i+1]``;
    ``positions[b]`` indexes the sentence (never 0, which is BOS).
    """
    original = np.asarray(original, dtype=np.int64)
    rows, cols = [], []
    for b, pos in enumerate(positions):
        pos = np.asarray(pos, dtype=np.int64)
        if pos.size and pos.min() < 1:
            raise ObjectiveError("masked position 0 (BOS) cannot be predicted")
        rows.extend([b] * len(pos))
        cols.extend(pos.tolist())
    if not rows:
        raise ObjectiveError("empty mask set")
    rows_a, cols_a = np.array(rows), np.array(cols)
    logp = nx.log_softmax(logits, axis=-1)
    picked = nx.getitem(logp, (rows_a, cols_a - 1, original[rows_a, cols_a]))
    return nx.mul(nx.sum(picked), -1.0 / len(rows))


def smoothed_targets(target: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    """``(1-eps)`` on gold and ``eps`` shared by the other non-PAD tokens; PAD rows all zero."""
    if not 0 <= eps < 1:
        raise ObjectiveError(f"label smoothing must be in [0, 1), got {eps}")
    target = np.asarray(target, dtype=np.int64)
    dist = np.zeros(target.shape + (vocab_size,), np.float32)
    if eps > 0:
        dist[...] = eps / (vocab_size - 2)
        dist[..., PAD] = 0.0
    np.put_along_axis(dist, target[..., None], 1.0 - eps, axis=-1)
    dist[target == PAD] = 0.0
    return dist


def translation_loss(logits: Tensor, target: np.ndarray, eps: float = 0.0) -> Tensor:
    """Label-smoothed cross-entropy of ``logits[b, i]`` against ``target[b, i+1]``.

    ``target`` holds BOS ... EOS rows right-padded with PAD; padded positions are
    excluded and the mean is taken over the remaining predicted tokens.
    """
    target = np.asarray(target, dtype=np.int64)
    gold = target[:, 1:]
    if logits.shape[:2] != gold.shape:
        raise ObjectiveError(f"logits {logits.shape} do not align with targets {target.shape}")
    dist = smoothed_targets(gold, logits.shape[-1], eps).astype(logits.data.dtype)
    count = int((gold != PAD).sum())
    logp = nx.log_softmax(logits, axis=-1)
    return nx.mul(nx.sum(nx.mul(logp, dist)), -1.0 / count)


def stage1_total(ls: Tensor, lc: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ObjectiveError("loss weight must be >= 0")
    if lam == 0:
        return ls
    return nx.add(ls, nx.mul(lc, lam))
