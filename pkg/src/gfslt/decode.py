"""Greedy and length-penalised beam-search decoding.

A *step function* maps a batch of equal-length prefixes ``[n, u]`` (each
starting with BOS) to next-token log-probabilities ``[n, V]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import BOS, EOS

StepFn = Callable[[np.ndarray], np.ndarray]


class DecodeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    @property
    def length(self) -> int:
        """Generated length: tokens after BOS, EOS included."""
        return len(self.tokens) - 1


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def hypothesis_score(h: BeamHypothesis, alpha: float) -> float:
    return h.log_prob / length_penalty(max(h.length, 1), alpha)


def greedy_decode(step_fn: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> list[int]:
    """Argmax decoding (ties go to the lowest id) for at most ``max_len`` generated tokens."""
    if max_len < 1:
        raise DecodeConfigError("max_len must be >= 1")
    tokens = [bos]
    for _ in range(max_len):
        logp = np.asarray(step_fn(np.array([tokens], dtype=np.int64)))[0]
        tok = int(np.argmax(logp))
        tokens.append(tok)
        if tok == eos:
            break
    return tokens


def _best(pool: list[BeamHypothesis], alpha: float) -> BeamHypothesis:
    return min(pool, key=lambda h: (-hypothesis_score(h, alpha), len(h.tokens), h.tokens))


def beam_search(step_fn: StepFn, beam_size: int, alpha: float, max_len: int,
                bos: int = BOS, eos: int = EOS) -> tuple[BeamHypothesis, list[BeamHypothesis]]:
    """Return the winning hypothesis and the finished pool.

    Each round expands every live hypothesis by its ``beam_size`` most likely
    tokens and keeps the global top ``beam_size`` candidates by cumulative
    log-probability (ties: earlier parent, then lower token id).  Candidates
    ending in EOS move to the finished pool.  Search stops once the pool holds
    ``beam_size`` hypotheses, no live hypothesis remains, or ``max_len``
    tokens were generated.  If nothing finished, the best truncated live
    hypothesis is returned.
    """
    if beam_size < 1:
        raise DecodeConfigError("beam_size must be >= 1")
    if max_len < 1:
        raise DecodeConfigError("max_len must be >= 1")
    live = [BeamHypothesis((bos,), 0.0)]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        logp = np.asarray(step_fn(np.array([h.tokens for h in live], dtype=np.int64)),
                          dtype=np.float64)
        cands = []
        for i, h in enumerate(live):
            row = logp[i]
            top = np.argsort(-row, kind="stable")[:beam_size]
            cands.extend((h.log_prob + float(row[t]), i, int(t)) for t in top)
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for lp, i, tok in cands[:beam_size]:
            if tok == eos:
                finished.append(BeamHypothesis(live[i].tokens + (tok,), lp, True))
            else:
                new_live.append(BeamHypothesis(live[i].tokens + (tok,), lp))
        live = new_live
        if len(finished) >= beam_size or not live:
            break
    return _best(finished or live, alpha), finished


def beam_decode(step_fn: StepFn, beam_size: int, alpha: float, max_len: int,
                bos: int = BOS, eos: int = EOS) -> list[int]:
    best, _ = beam_search(step_fn, beam_size, alpha, max_len, bos, eos)
    return list(best.tokens)
