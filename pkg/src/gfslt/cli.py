"""Command-line entry point: ``gfslt <subcommand> ...``.

Failures print a single ``error <code> <kind>: <message>`` line on stderr and
exit nonzero.  ``GFSLT_LOG`` (``info`` or ``quiet``) only controls whether
progress rows are echoed to stderr; the JSON-lines logs written with ``--log``
are always complete.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .ablate import run_ablation
from .checkpoint import FingerprintMismatch
from .config import TrainConfig, load_config
from .corpus import (ConfigError, Corpus, FormatError, VideoClip, generate_corpus, load_corpus,
                     read_dataset, save_corpus)
from .decode import DecodeConfigError
from .metrics import strip_specials
from .model import InputError
from .numerics import NumericError, ParameterStore
from .pretrain import json_line, pretrain
from .translate import (TransferError, TransferPlan, decode_records, default_max_len, evaluate,
                        finetune, transfer, translate_clip)

EXIT_CODES = {
    ConfigError: 2, DecodeConfigError: 2, FormatError: 3, FileNotFoundError: 3,
    FingerprintMismatch: 4, TransferError: 4, InputError: 5, NumericError: 6,
}


class Logger:
    """Writes JSON lines to an optional file and echoes to stderr per ``GFSLT_LOG``."""

    def __init__(self, path: str | None):
        self.level = os.environ.get("GFSLT_LOG", "info").lower()
        if self.level not in ("quiet", "info"):
            raise ConfigError(f"GFSLT_LOG must be 'quiet' or 'info', got {self.level!r}")
        self.fh = open(path, "w") if path else None

    def __call__(self, row: dict):
        line = json_line(row)
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()
        if self.level != "quiet":
            print(line, file=sys.stderr)

    def close(self):
        if self.fh:
            self.fh.close()


def _load_data(cfg: TrainConfig, data_dir: str, allow_mismatch: bool) -> Corpus:
    corpus = load_corpus(data_dir)
    if corpus.config != cfg.corpus_config() and not allow_mismatch:
        raise ConfigError(f"data in {data_dir} was generated with different corpus settings "
                          "than the config (use --allow-mismatch to override)")
    return corpus


def _checkpoint(path: str, cfg: TrainConfig, allow_mismatch: bool) -> ckpt.Checkpoint:
    ck = ckpt.load(path)
    ckpt.check_fingerprint(ck, cfg.fingerprint(), allow_mismatch)
    return ck


def _translator(ck: ckpt.Checkpoint) -> ParameterStore:
    return ParameterStore(ck.params().items())


def _vocab_size(ck: ckpt.Checkpoint, corpus: Corpus | None) -> int:
    if corpus is not None:
        return len(corpus.vocab)
    if "vocab_size" in ck.meta:
        return int(ck.meta["vocab_size"])
    raise ConfigError("checkpoint does not record its vocabulary size")


# ---------------------------------------------------------------- subcommands

def cmd_generate_data(args) -> int:
    cfg = load_config(args.config)
    corpus = generate_corpus(cfg.corpus_config())
    save_corpus(corpus, args.out)
    print(json.dumps({"out": str(args.out), "train": len(corpus.train), "dev": len(corpus.dev),
                      "test": len(corpus.test), "vocab_size": len(corpus.vocab)}))
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    corpus = _load_data(cfg, args.data, args.allow_mismatch)
    resume = _checkpoint(args.resume, cfg, args.allow_mismatch) if args.resume else None
    log = Logger(args.log)
    try:
        ck = pretrain(corpus.train, cfg, len(corpus.vocab), corpus.dev, log=log, resume=resume,
                      until_epoch=args.until_epoch, workers=args.workers)
    finally:
        log.close()
    ckpt.save(ck, args.out)
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    corpus = _load_data(cfg, args.data, args.allow_mismatch)
    scratch = args.init == "scratch"
    init = None if scratch else _checkpoint(args.init, cfg, args.allow_mismatch)
    plan = TransferPlan.from_config(cfg, scratch=scratch)
    V = len(corpus.vocab)
    P = transfer(init, plan, cfg.model_config(V), cfg.seed)
    log = Logger(args.log)
    try:
        res = finetune(corpus.train, P, cfg, V, corpus.dev, plan=plan, log=log, workers=args.workers)
    finally:
        log.close()
    ckpt.save(res.best, args.out)
    if args.final_out:
        ckpt.save(res.final, args.final_out)
    return 0


def _decode_settings(args, cfg: TrainConfig, corpus: Corpus | None):
    beam = cfg.beam_size if args.beam is None else args.beam
    alpha = cfg.length_penalty if args.alpha is None else args.alpha
    if args.max_len is not None:
        max_len = args.max_len
    elif cfg.max_decode_len:
        max_len = cfg.max_decode_len
    elif corpus is not None:
        max_len = default_max_len(corpus.train)
    else:
        max_len = 2 * cfg.sentence_len_max + 2
    if beam < 1 or max_len < 1:
        raise DecodeConfigError("beam size and max length must be >= 1")
    return beam, alpha, max_len


def _read_clip(path: str) -> VideoClip:
    p = Path(path)
    if p.suffix == ".npy":
        frames = np.load(p).astype(np.float32)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise InputError(f"clip array must be [T,H,W] or [T,H,W,C], got shape {frames.shape}")
        return VideoClip(frames)
    records = read_dataset(p)
    if len(records) != 1:
        raise InputError(f"{path} holds {len(records)} records; expected a single clip")
    return records[0].clip


def cmd_translate(args) -> int:
    cfg = load_config(args.config)
    ck = _checkpoint(args.checkpoint, cfg, args.allow_mismatch)
    corpus = load_corpus(args.data) if args.data else None
    V = _vocab_size(ck, corpus)
    mcfg = cfg.model_config(V)
    P = _translator(ck)
    beam, alpha, max_len = _decode_settings(args, cfg, corpus)
    policy = cfg.eval_policy()
    if args.clip:
        from .augment import eval_clip
        clip = eval_clip(_read_clip(args.clip), policy)
        hyps = [translate_clip(P, clip, mcfg, beam, alpha, max_len)]
    elif corpus is not None:
        records = corpus.split(args.split)
        if args.limit:
            records = records[:args.limit]
        hyps = decode_records(P, records, mcfg, beam, alpha, max_len, policy)
    else:
        raise ConfigError("translate needs --data (with --split) or --clip")
    vocab = corpus.vocab if corpus is not None else None
    words = [strip_specials(h) for h in hyps]
    lines = [" ".join(vocab.decode(w) if vocab else map(str, w)) for w in words]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ck = _checkpoint(args.checkpoint, cfg, args.allow_mismatch)
    corpus = load_corpus(args.data)
    mcfg = cfg.model_config(len(corpus.vocab))
    beam, alpha, max_len = _decode_settings(args, cfg, corpus)
    records = corpus.split(args.split)
    scores = evaluate(_translator(ck), records, mcfg, beam, alpha, max_len, cfg.eval_policy())
    print(json.dumps(scores, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    over = {}
    if args.pretrain_epochs is not None:
        over["pretrain_epochs"] = args.pretrain_epochs
    if args.finetune_epochs is not None:
        over["finetune_epochs"] = args.finetune_epochs
    cfg = cfg.with_overrides(**over)
    corpus = _load_data(cfg, args.data, args.allow_mismatch)
    seeds = [int(s) for s in args.seeds.split(",")]
    log = Logger(args.log)
    try:
        result = run_ablation(corpus, cfg, seeds, full_grid=not args.core, log=log)
    finally:
        log.close()
    if args.json:
        Path(args.json).write_text(json.dumps(result.to_json(), indent=1, sort_keys=True))
    print(result.table())
    return 0


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gfslt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", required=True, help="flat key = value config file")
        if data:
            p.add_argument("--data", required=True, help="directory written by generate-data")
        p.add_argument("--allow-mismatch", action="store_true",
                       help="accept checkpoints/data produced under a different config")

    def decoding(p):
        p.add_argument("--beam", type=int, help="beam size (1 = greedy); default from config")
        p.add_argument("--alpha", type=float, help="length-penalty exponent; default from config")
        p.add_argument("--max-len", type=int, help="max generated tokens; default 2 x longest + 2")

    p = sub.add_parser("generate-data", help="render the synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="stage 1: visual-language pretraining")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.add_argument("--until-epoch", type=int, help="stop after this many total epochs")
    p.add_argument("--workers", type=int, default=1, help="augmentation threads")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: transfer and fine-tune the translator")
    common(p)
    p.add_argument("--init", required=True, help="stage-1 checkpoint or 'scratch'")
    p.add_argument("--out", required=True, help="best-dev checkpoint")
    p.add_argument("--final-out", help="also save the last-epoch checkpoint")
    p.add_argument("--log")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("translate", help="decode a dataset split or a single clip")
    common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--clip", help=".npy frames [T,H,W(,C)] or a one-record .gfsl file")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out")
    decoding(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU-1..4 and ROUGE-L on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    decoding(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="VLP x augmentation and transfer ablation grids")
    common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--core", action="store_true", help="only the baseline / VLP / full rows of the augmentation grid")
    p.add_argument("--log")
    p.add_argument("--json", help="write per-seed scores here")
    p.set_defaults(func=cmd_ablate)
    return ap


def _error_line(exc: BaseException) -> tuple[int, str]:
    code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return code, f"error {code} {type(exc).__name__}: {msg}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, ArithmeticError, KeyError) as exc:
        code, line = _error_line(exc)
        print(line, file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
