"""Stage 1: visual-language pretraining of the visual encoder and text decoder.

Each step aligns augmented clips with their sentences through the symmetric
contrastive loss and, in parallel, teaches the text decoder to restore
BERT-masked sentences from the text encoder's reading of the corrupted input.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import batches
from . import numerics as nx
from .checkpoint import Checkpoint
from .config import TrainConfig
from .corpus import ConfigError, CorpusRecord
from .model import ModelConfig, init_params, pad_batch, project, text_decode, text_encode, visual_encode
from .numerics import NumericError, ParameterStore, Tensor
from .objectives import contrastive_loss, mask_sentence, restoration_loss, stage1_total
from .optim import SGDMomentum, clip_global_norm, cosine_lr

LOG_SCHEMA = 1
Logger = Callable[[dict], None]


@dataclass
class PretrainState:
    params: ParameterStore
    optimizer: SGDMomentum
    epoch: int = 0            # completed epochs
    step: int = 0             # completed optimizer steps
    history: list[dict] = field(default_factory=list)

    def rng_state(self, seed: int) -> dict:
        # all randomness is derived from (seed, epoch, sample id); this is the full state
        return {"scheme": "seedsequence", "seed": seed, "next_epoch": self.epoch}


def in_batch_retrieval_accuracy(v: np.ndarray, t: np.ndarray) -> float:
    """Fraction of rows whose own sentence strictly outscores every other in the batch."""
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if v.shape != t.shape or v.ndim != 2:
        raise ValueError(f"expected matching [N, d] arrays, got {v.shape} and {t.shape}")
    N = v.shape[0]
    if N < 2:
        raise ValueError("retrieval accuracy needs N >= 2")
    sims = v @ t.T
    own = np.diag(sims)
    others = np.where(np.eye(N, dtype=bool), -np.inf, sims)
    return float(np.mean(own > others.max(axis=1)))


def _frozen_prefixes(cfg: TrainConfig) -> tuple[str, ...]:
    out = []
    if cfg.freeze_text_encoder:
        out.append("te.")
    if cfg.freeze_text_decoder:
        out.append("td.")
    return tuple(out)


def _masked_batch(records: Sequence[CorpusRecord], cfg: TrainConfig, epoch: int, vocab_size: int):
    corrupted, positions = [], []
    for r in records:
        m = mask_sentence(r.sentence, cfg.mask_rate, batches.mask_rng(cfg.seed, epoch, r.sample_id),
                          vocab_size)
        corrupted.append(m.corrupted)
        positions.append(m.positions)
    return pad_batch(corrupted), positions


def contrastive_forward(P: ParameterStore, frames, valid, ids: np.ndarray, mcfg: ModelConfig):
    vis = visual_encode(P, frames, valid, mcfg)
    txt = text_encode(P, ids, mcfg)
    return project(P, vis.summary, txt.summary)


def restoration_forward(P: ParameterStore, original: np.ndarray, corrupted: np.ndarray,
                        positions, mcfg: ModelConfig, stop_grad: bool = False) -> Tensor:
    enc = text_encode(P, corrupted, mcfg)
    memory = Tensor(enc.sequence.data.copy()) if stop_grad else enc.sequence
    logits = text_decode(P, original[:, :-1], memory, enc.mask, mcfg)
    return restoration_loss(logits, original, positions)


def dev_retrieval(P: ParameterStore, dev: Sequence[CorpusRecord], cfg: TrainConfig,
                  mcfg: ModelConfig) -> float | None:
    """Mean in-batch top-1 retrieval accuracy over consecutive dev batches."""
    bs = cfg.pretrain_batch
    if len(dev) < 2:
        return None
    accs, weights = [], []
    policy = cfg.eval_policy()
    with nx.no_grad():
        for chunk in batches.chunks(dev, bs):
            if len(chunk) < 2:
                continue
            frames, valid = batches.eval_clips(chunk, policy)
            proj = contrastive_forward(P, frames, valid, batches.sentences(chunk), mcfg)
            accs.append(in_batch_retrieval_accuracy(proj.v.data, proj.t.data))
            weights.append(len(chunk))
    return float(np.average(accs, weights=weights))


def _apply(P: ParameterStore, opt: SGDMomentum, loss: Tensor, lr: float, cfg: TrainConfig,
           frozen: tuple[str, ...]):
    P.zero_grad()
    loss.backward()
    for name, t in P.items():
        if name.startswith(frozen):
            t.grad = None
    clip_global_norm(P, cfg.grad_clip)
    opt.step(P, lr)


def initial_state(cfg: TrainConfig, vocab_size: int) -> PretrainState:
    P = init_params(cfg.model_config(vocab_size), cfg.seed)
    return PretrainState(P, SGDMomentum(cfg.momentum))


def state_from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> PretrainState:
    P = ParameterStore(ck.params().items())
    opt = SGDMomentum(cfg.momentum)
    opt.load_state(ck.optimizer_state())
    return PretrainState(P, opt, int(ck.meta.get("epoch", 0)), int(ck.meta.get("step", 0)),
                         list(ck.meta.get("history", [])))


def to_checkpoint(state: PretrainState, cfg: TrainConfig, vocab_size: int) -> Checkpoint:
    tensors = {k: v.copy() for k, v in state.params.arrays().items()}
    for k, v in sorted(state.optimizer.state().items()):
        tensors["opt/" + k] = v.copy()
    meta = {"stage": "pretrain", "epoch": state.epoch, "step": state.step,
            "vocab_size": vocab_size, "history": state.history}
    return Checkpoint(tensors, cfg.fingerprint(), state.rng_state(cfg.seed), meta)


def pretrain(train: Sequence[CorpusRecord], cfg: TrainConfig, vocab_size: int,
             dev: Sequence[CorpusRecord] = (), log: Logger | None = None,
             resume: Checkpoint | None = None, until_epoch: int | None = None,
             workers: int = 1) -> Checkpoint:
    """Run (or continue) stage 1 and return a checkpoint with optimizer buffers.

    ``until_epoch`` stops early, leaving a checkpoint that ``resume`` continues
    to exactly the parameters an uninterrupted run would reach.
    """
    if not train:
        raise ConfigError("pretraining set is empty")
    bs = cfg.pretrain_batch
    if bs < 2:
        raise ConfigError("pretrain_batch must be >= 2 (contrastive loss needs negatives)")
    if len(train) < bs:
        raise ConfigError(f"pretraining set ({len(train)}) smaller than one batch ({bs})")
    mcfg = cfg.model_config(vocab_size)
    state = initial_state(cfg, vocab_size) if resume is None else state_from_checkpoint(resume, cfg)
    slices = batches.batch_slices(len(train), bs, drop_last=True)
    total = cfg.pretrain_epochs * len(slices)
    if state.step != state.epoch * len(slices):
        raise ConfigError("resume checkpoint step count does not match epoch x batches")
    frozen = _frozen_prefixes(cfg)
    policy = cfg.policy(1)
    P, opt = state.params, state.optimizer
    stop = cfg.pretrain_epochs if until_epoch is None else min(until_epoch, cfg.pretrain_epochs)

    for epoch in range(state.epoch, stop):
        order = batches.epoch_order(len(train), cfg.seed, epoch)
        sums = np.zeros(3)
        lr = cosine_lr(state.step, total, cfg.pretrain_lr_max, cfg.pretrain_lr_min)
        for sl in slices:
            recs = [train[i] for i in order[sl]]
            lr = cosine_lr(state.step, total, cfg.pretrain_lr_max, cfg.pretrain_lr_min)
            frames, valid = batches.train_clips(recs, policy, epoch, workers)
            ids = batches.sentences(recs)
            corrupted, positions = _masked_batch(recs, cfg, epoch, vocab_size)
            try:
                proj = contrastive_forward(P, frames, valid, ids, mcfg)
                ls = contrastive_loss(proj.v, proj.t, proj.scale)
                if cfg.alternating_updates:
                    _apply(P, opt, ls, lr, cfg, frozen)
                    lc = restoration_forward(P, ids, corrupted, positions, mcfg,
                                             cfg.restoration_stop_grad)
                    total_loss = stage1_total(ls, lc, cfg.loss_weight)
                    if cfg.loss_weight > 0:
                        _apply(P, opt, nx.mul(lc, cfg.loss_weight), lr, cfg, frozen)
                else:
                    lc = restoration_forward(P, ids, corrupted, positions, mcfg,
                                             cfg.restoration_stop_grad)
                    total_loss = stage1_total(ls, lc, cfg.loss_weight)
                    _apply(P, opt, total_loss, lr, cfg, frozen)
            except NumericError as e:
                raise NumericError(f"pretraining aborted at step {state.step}: {e}") from None
            sums += (float(ls.data), float(lc.data), float(total_loss.data))
            state.step += 1
        state.epoch = epoch + 1
        means = sums / len(slices)
        row = {"schema": LOG_SCHEMA, "stage": "pretrain", "epoch": state.epoch,
               "L_s": float(means[0]), "L_c": float(means[1]), "L_total": float(means[2]),
               "lr": lr, "retrieval_acc_dev": dev_retrieval(P, dev, cfg, mcfg),
               "fingerprint": cfg.fingerprint()}
        state.history.append(row)
        if log is not None:
            log(row)
    return to_checkpoint(state, cfg, vocab_size)


def json_line(row: dict) -> str:
    return json.dumps(row, sort_keys=True)
