"""Corpus BLEU-n and ROUGE-L over token-id sequences."""
from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .corpus import N_SPECIAL

Pair = tuple[Sequence[int], Sequence[int]]  # (hypothesis, reference)


def strip_specials(ids) -> list[int]:
    return [int(t) for t in ids if int(t) >= N_SPECIAL]


def make_pairs(hyps, refs) -> list[Pair]:
    return [(strip_specials(h), strip_specials(r)) for h, r in zip(hyps, refs)]


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_n(pairs: Iterable[Pair], n: int = 4) -> float:
    """Unsmoothed corpus BLEU with uniform weights over orders ``1..n``."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("BLEU needs at least one hypothesis")
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for hyp, ref in pairs:
        hyp_len += len(hyp)
        ref_len += len(ref)
        for k in range(1, n + 1):
            h, r = _ngrams(hyp, k), _ngrams(ref, k)
            matches[k - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[k - 1] += max(len(hyp) - k + 1, 0)
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if not a or not b:
        return 0
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    b_arr = np.asarray(b)
    for x in a:
        eq = b_arr == x
        cur = np.zeros_like(prev)
        for j in range(1, len(b) + 1):
            cur[j] = prev[j - 1] + 1 if eq[j - 1] else max(prev[j], cur[j - 1])
        prev = cur
    return int(prev[-1])


def rouge_l_pair(hyp: Sequence[int], ref: Sequence[int], beta: float = 1.2) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(pairs: Iterable[Pair], beta: float = 1.2) -> float:
    """Mean sentence-level ROUGE-L F-measure."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("ROUGE-L needs at least one pair")
    return float(np.mean([rouge_l_pair(h, r, beta) for h, r in pairs]))


def score_all(pairs: list[Pair]) -> dict[str, float]:
    out = {f"bleu{n}": bleu_n(pairs, n) for n in (1, 2, 3, 4)}
    out["rougeL"] = rouge_l(pairs)
    return out
