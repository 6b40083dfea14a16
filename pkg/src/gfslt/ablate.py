"""Desk-scale ablation grids: VLP x augmentation, and per-component transfer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import TRANSFER_GROUPS, TrainConfig
from .corpus import Corpus
from .pretrain import pretrain
from .translate import TransferPlan, finetune, transfer

# name, use VLP, Aug-S1, Aug-S2
VLP_AUG_ROWS = (
    ("baseline", False, False, False),
    ("vlp", True, False, False),
    ("vlp+aug1", True, True, False),
    ("aug2", False, False, True),
    ("full", True, True, True),
)
CORE_VLP_AUG = ("baseline", "vlp", "full")

# pretrained (True) or random (False) for visual embedding, transformer encoder, text decoder;
# every row pretrains with Aug-S1 and fine-tunes with Aug-S2
TRANSFER_ROWS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (False, False, True),
    (True, True, True),
)


def transfer_row_name(row: tuple[bool, bool, bool]) -> str:
    return "transfer:" + "".join("P" if x else "R" for x in row)


@dataclass
class AblationResult:
    seeds: list[int]
    scores: dict[str, dict[int, dict]] = field(default_factory=dict)   # row -> seed -> dev metrics

    def add(self, row: str, seed: int, metrics: dict):
        self.scores.setdefault(row, {})[seed] = metrics

    def values(self, row: str, metric: str = "bleu4") -> np.ndarray:
        return np.array([self.scores[row][s][metric] for s in self.seeds])

    def mean(self, row: str, metric: str = "bleu4") -> float:
        return float(self.values(row, metric).mean())

    def to_json(self) -> dict:
        return {"seeds": self.seeds,
                "scores": {r: {str(s): m for s, m in v.items()} for r, v in self.scores.items()}}

    def table(self) -> str:
        keys = ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL")
        lines = ["| row | " + " | ".join(f"dev {k}" for k in keys) + " | bleu4 std |",
                 "|---|" + "---|" * (len(keys) + 1)]
        for row in self.scores:
            cells = [f"{100 * self.mean(row, k):.2f}" for k in keys]
            std = 100 * self.values(row).std(ddof=1) if len(self.seeds) > 1 else 0.0
            lines.append(f"| {row} | " + " | ".join(cells) + f" | {std:.2f} |")
        return "\n".join(lines)


def _dev_metrics(history: list[dict]) -> dict:
    """Dev metrics of the best-BLEU-4 evaluation (earliest on ties)."""
    evals = [r for r in history if "dev_bleu4" in r]
    best = max(evals, key=lambda r: (r["dev_bleu4"], -r["epoch"]))
    return {k[4:]: best[k] for k in best if k.startswith("dev_")} | {"epoch": best["epoch"]}


def run_ablation(corpus: Corpus, cfg: TrainConfig, seeds: Sequence[int], full_grid: bool = True,
                 log: Callable[[dict], None] | None = None) -> AblationResult:
    """Run the grids under one matched budget (``cfg.pretrain_epochs`` / ``cfg.finetune_epochs``).

    ``full_grid=False`` keeps only the VLP x augmentation rows needed for the
    baseline / VLP-only / full ordering plus the whole transfer grid.
    """
    V = len(corpus.vocab)
    mcfg = cfg.model_config(V)
    vlp_aug_rows = [r for r in VLP_AUG_ROWS if full_grid or r[0] in CORE_VLP_AUG]
    result = AblationResult(list(seeds))

    def emit(row: dict):
        if log is not None:
            log(row)

    for seed in seeds:
        base = cfg.with_overrides(seed=seed)
        pretrained: dict[bool, Checkpoint] = {}

        def vlp(aug1: bool) -> Checkpoint:
            if aug1 not in pretrained:
                pcfg = base.with_overrides(aug_stage1=cfg.aug_stage1 if aug1 else "none")
                pretrained[aug1] = pretrain(corpus.train, pcfg, V, corpus.dev,
                                            log=lambda r: emit({"seed": seed, "run": f"pretrain aug1={aug1}"} | r))
            return pretrained[aug1]

        def run(name: str, ck: Checkpoint | None, plan: TransferPlan, aug2: bool):
            fcfg = base.with_overrides(aug_stage2=cfg.aug_stage2 if aug2 else "none")
            P = transfer(ck, plan, mcfg, seed)
            res = finetune(corpus.train, P, fcfg, V, corpus.dev, plan=plan,
                           log=lambda r: emit({"seed": seed, "run": name} | r))
            result.add(name, seed, _dev_metrics(res.history))
            emit({"seed": seed, "run": name, "result": result.scores[name][seed]})

        for name, use_vlp, aug1, aug2 in vlp_aug_rows:
            if use_vlp:
                run(name, vlp(aug1), TransferPlan.all("pretrained"), aug2)
            else:
                run(name, None, TransferPlan.all("random"), aug2)
        for row in TRANSFER_ROWS:
            name = transfer_row_name(row)
            if all(row) and "full" in result.scores and seed in result.scores["full"]:
                result.add(name, seed, result.scores["full"][seed])
                continue
            plan = TransferPlan({g: "pretrained" if x else "random" for g, x in zip(TRANSFER_GROUPS, row)})
            run(name, vlp(True) if any(row) else None, plan, True)
    return result
