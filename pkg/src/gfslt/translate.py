"""Stage 2: transfer pretrained sub-networks and fine-tune the video-to-sentence translator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import batches
from . import numerics as nx
from .checkpoint import Checkpoint
from .config import TRANSFER_GROUPS, TrainConfig
from .corpus import BOS, EOS, PAD, ConfigError, CorpusRecord, VideoClip
from .decode import beam_decode, greedy_decode
from .metrics import make_pairs, score_all
from .model import (Encoded, InputError, ModelConfig, group_of, init_params, text_decode,
                    visual_encode)
from .numerics import NumericError, ParameterStore, Tensor
from .objectives import translation_loss
from .optim import SGDMomentum, clip_global_norm, cosine_lr

LOG_SCHEMA = 1
STAGE2_PARTS = ("ve", "td")
# stage-2 fresh tensors use a different stream from stage-1 init so "random" is not "pretrain init"
STAGE2_SEED_OFFSET = 1
Logger = Callable[[dict], None]


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class TransferPlan:
    sources: dict = field(default_factory=lambda: {g: "pretrained" for g in TRANSFER_GROUPS})
    trainable: dict = field(default_factory=lambda: {g: True for g in TRANSFER_GROUPS})

    def __post_init__(self):
        for g in TRANSFER_GROUPS:
            if self.sources.get(g) not in ("pretrained", "random"):
                raise ConfigError(f"transfer source for {g} must be 'pretrained' or 'random'")

    @classmethod
    def all(cls, source: str) -> "TransferPlan":
        return cls({g: source for g in TRANSFER_GROUPS})

    @classmethod
    def from_config(cls, cfg: TrainConfig, scratch: bool = False) -> "TransferPlan":
        sources = {g: "random" for g in TRANSFER_GROUPS} if scratch else cfg.transfer_sources()
        frozen = cfg.stage2_frozen()
        return cls(sources, {g: g not in frozen for g in TRANSFER_GROUPS})

    @property
    def any_pretrained(self) -> bool:
        return any(v == "pretrained" for v in self.sources.values())

    def frozen_names(self, names) -> set[str]:
        return {n for n in names if not self.trainable[group_of(n)]}


def fresh_params(mcfg: ModelConfig, seed: int) -> ParameterStore:
    return init_params(mcfg, seed + STAGE2_SEED_OFFSET, parts=STAGE2_PARTS)


def transfer(ck: Checkpoint | None, plan: TransferPlan, mcfg: ModelConfig, seed: int) -> ParameterStore:
    """Build the translator's parameters: pretrained groups copied bitwise, the rest fresh.

    The contrastive heads and the stage-1 text encoder are never carried over.
    """
    P = fresh_params(mcfg, seed)
    if plan.any_pretrained and ck is None:
        raise TransferError("plan requests pretrained tensors but no checkpoint was given")
    for name, t in P.items():
        if plan.sources[group_of(name)] != "pretrained":
            continue
        if name not in ck.tensors:
            raise TransferError(f"tensor {name!r} missing from checkpoint")
        src = ck.tensors[name]
        if src.shape != t.data.shape:
            raise TransferError(f"tensor {name!r}: checkpoint shape {src.shape} "
                                f"!= model shape {t.data.shape}")
        t.data = np.array(src, dtype=np.float32, copy=True)
    return P


# ---------------------------------------------------------------- decoding

def default_max_len(records: Sequence[CorpusRecord]) -> int:
    longest = max(len(r.sentence) - 2 for r in records)
    return 2 * longest + 2


def _expand(enc: Encoded, rows: np.ndarray) -> tuple[Tensor, np.ndarray]:
    return Tensor(enc.sequence.data[rows]), enc.mask[rows]


def translate_clip(P: ParameterStore, clip: VideoClip, mcfg: ModelConfig, beam_size: int = 1,
                   alpha: float = 1.0, max_len: int = 18) -> list[int]:
    """Encode once, then decode greedily (``beam_size == 1``) or with beam search."""
    if clip.valid_len < 4:
        raise InputError(f"clip too short: need >= 4 valid frames, got {clip.valid_len}")
    with nx.no_grad():
        enc = visual_encode(P, [clip.frames], [clip.valid_len], mcfg)

        def step(prefixes: np.ndarray) -> np.ndarray:
            mem, mask = _expand(enc, np.zeros(len(prefixes), dtype=np.int64))
            logits = text_decode(P, prefixes, mem, mask, mcfg)
            return nx.log_softmax(nx.getitem(logits, (slice(None), -1)), axis=-1).data

        if beam_size == 1:
            return greedy_decode(step, max_len)
        return beam_decode(step, beam_size, alpha, max_len)


def greedy_batch(P: ParameterStore, frames, valid, mcfg: ModelConfig, max_len: int) -> list[list[int]]:
    """Greedy decoding of a whole batch at once; rows stop independently at EOS."""
    with nx.no_grad():
        enc = visual_encode(P, frames, valid, mcfg)
        B = len(frames)
        seqs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, bool)
        for _ in range(max_len):
            logits = text_decode(P, seqs, enc.sequence, enc.mask, mcfg).data[:, -1]
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in seqs:
        toks = [int(t) for t in row]
        if EOS in toks:
            toks = toks[:toks.index(EOS) + 1]
        out.append([t for t in toks if t != PAD])
    return out


def decode_records(P: ParameterStore, records: Sequence[CorpusRecord], mcfg: ModelConfig,
                   beam_size: int = 1, alpha: float = 1.0, max_len: int = 18,
                   policy=None, batch_size: int = 32) -> list[list[int]]:
    hyps = []
    if beam_size == 1:
        for chunk in batches.chunks(records, batch_size):
            frames, valid = batches.eval_clips(chunk, policy)
            hyps.extend(greedy_batch(P, frames, valid, mcfg, max_len))
        return hyps
    for r in records:
        frames, valid = batches.eval_clips([r], policy)
        hyps.append(translate_clip(P, VideoClip(frames[0], valid[0]), mcfg, beam_size, alpha, max_len))
    return hyps


def evaluate(P: ParameterStore, records: Sequence[CorpusRecord], mcfg: ModelConfig,
             beam_size: int = 1, alpha: float = 1.0, max_len: int = 18, policy=None) -> dict:
    hyps = decode_records(P, records, mcfg, beam_size, alpha, max_len, policy)
    return score_all(make_pairs(hyps, [r.sentence for r in records]))


# ---------------------------------------------------------------- training

@dataclass
class FinetuneResult:
    best: Checkpoint
    final: Checkpoint
    history: list[dict]


def _snapshot(P: ParameterStore, cfg: TrainConfig, meta: dict) -> Checkpoint:
    tensors = {k: v.copy() for k, v in P.arrays().items()}
    rng = {"scheme": "seedsequence", "seed": cfg.seed, "next_epoch": meta["epoch"]}
    return Checkpoint(tensors, cfg.fingerprint(), rng, meta)


def train_loss(P: ParameterStore, records: Sequence[CorpusRecord], frames, valid,
               mcfg: ModelConfig, eps: float) -> Tensor:
    target = batches.sentences(records)
    enc = visual_encode(P, frames, valid, mcfg)
    logits = text_decode(P, target[:, :-1], enc.sequence, enc.mask, mcfg)
    return translation_loss(logits, target, eps)


def finetune(train: Sequence[CorpusRecord], params: ParameterStore, cfg: TrainConfig,
             vocab_size: int, dev: Sequence[CorpusRecord] = (), plan: TransferPlan | None = None,
             log: Logger | None = None, epochs: int | None = None, workers: int = 1) -> FinetuneResult:
    """Teacher-forced training with label-smoothed cross-entropy.

    Every ``eval_interval`` epochs the dev set is decoded greedily in batches;
    the checkpoint with the best dev BLEU-4 (earliest on ties) is kept as
    ``best``.  Without a dev set ``best`` is the final checkpoint.
    """
    if not train:
        raise ConfigError("fine-tuning set is empty")
    mcfg = cfg.model_config(vocab_size)
    plan = plan or TransferPlan.from_config(cfg)
    epochs = cfg.finetune_epochs if epochs is None else epochs
    P = params
    frozen = plan.frozen_names(P.names())
    opt = SGDMomentum(cfg.momentum)
    slices = batches.batch_slices(len(train), cfg.finetune_batch, drop_last=False)
    total = epochs * len(slices)
    policy = cfg.policy(2)
    eval_policy = cfg.eval_policy()
    max_len = cfg.max_decode_len or default_max_len(train)
    fp = cfg.fingerprint()
    history: list[dict] = []
    best, best_score = None, -1.0
    step = 0
    for epoch in range(epochs):
        order = batches.epoch_order(len(train), cfg.seed + STAGE2_SEED_OFFSET, epoch)
        loss_sum, tokens = 0.0, 0
        lr = cosine_lr(step, total, cfg.finetune_lr_max, cfg.finetune_lr_min)
        for sl in slices:
            recs = [train[i] for i in order[sl]]
            lr = cosine_lr(step, total, cfg.finetune_lr_max, cfg.finetune_lr_min)
            frames, valid = batches.train_clips(recs, policy, epoch, workers)
            try:
                loss = train_loss(P, recs, frames, valid, mcfg, cfg.label_smoothing)
                P.zero_grad()
                loss.backward()
            except NumericError as e:
                raise NumericError(f"fine-tuning aborted at step {step}: {e}") from None
            for name in frozen:
                P[name].grad = None
            clip_global_norm(P, cfg.grad_clip)
            opt.step(P, lr)
            n_tok = sum(len(r.sentence) - 1 for r in recs)
            loss_sum += float(loss.data) * n_tok
            tokens += n_tok
            step += 1
        if (epoch + 1) % cfg.eval_interval and epoch + 1 != epochs:
            continue
        row = {"schema": LOG_SCHEMA, "stage": "finetune", "epoch": epoch + 1,
               "train_Lg": loss_sum / tokens, "lr": lr, "fingerprint": fp}
        if dev:
            scores = evaluate(P, dev, mcfg, 1, cfg.length_penalty, max_len, eval_policy)
            row.update({f"dev_{k}": v for k, v in scores.items()})
            if scores["bleu4"] > best_score:
                best_score = scores["bleu4"]
                best = _snapshot(P, cfg, {"stage": "finetune", "epoch": epoch + 1,
                                          "vocab_size": vocab_size, "dev_bleu4": best_score})
        history.append(row)
        if log is not None:
            log(row)
    final = _snapshot(P, cfg, {"stage": "finetune", "epoch": epochs, "vocab_size": vocab_size})
    return FinetuneResult(best or final, final, history)
