import numpy as np
import pytest

from gfslt import checkpoint as ckpt
from gfslt.config import TRANSFER_GROUPS
from gfslt.corpus import BOS, EOS, VideoClip
from gfslt.model import InputError, group_of
from gfslt.pretrain import pretrain
from gfslt.translate import (TransferError, TransferPlan, decode_records, default_max_len,
                             evaluate, finetune, fresh_params, greedy_batch, transfer,
                             translate_clip)
from gfslt import batches


@pytest.fixture(scope="module")
def stage1(tiny_cfg, tiny_corpus):
    return pretrain(tiny_corpus.train, tiny_cfg, len(tiny_corpus.vocab))


@pytest.fixture(scope="module")
def mcfg(tiny_cfg, tiny_corpus):
    return tiny_cfg.model_config(len(tiny_corpus.vocab))


def test_full_transfer_copies_bitwise(stage1, mcfg, tiny_cfg):
    P = transfer(stage1, TransferPlan.all("pretrained"), mcfg, tiny_cfg.seed)
    assert not any(n.startswith(("te.", "heads.")) for n in P.names())
    for name, t in P.items():
        assert t.data.tobytes() == stage1.tensors[name].tobytes()
        assert t.data is not stage1.tensors[name]


def test_all_random_equals_fresh_init(stage1, mcfg):
    P = transfer(stage1, TransferPlan.all("random"), mcfg, 5)
    fresh = fresh_params(mcfg, 5)
    assert all(P[n].data.tobytes() == fresh[n].data.tobytes() for n in fresh.names())
    assert any(P[n].data.tobytes() != stage1.tensors[n].tobytes() for n in P.names())


@pytest.mark.parametrize("pretrained", TRANSFER_GROUPS)
def test_mixed_plans_take_only_named_groups(stage1, mcfg, pretrained):
    sources = {g: "pretrained" if g == pretrained else "random" for g in TRANSFER_GROUPS}
    P = transfer(stage1, TransferPlan(sources), mcfg, 0)
    fresh = fresh_params(mcfg, 0)
    for name, t in P.items():
        want = stage1.tensors[name] if group_of(name) == pretrained else fresh[name].data
        assert t.data.tobytes() == want.tobytes()


def test_transfer_errors(stage1, mcfg, tiny_cfg):
    with pytest.raises(TransferError):
        transfer(None, TransferPlan.all("pretrained"), mcfg, 0)
    wide = tiny_cfg.with_overrides(d_ff=48).model_config(mcfg.vocab_size)
    with pytest.raises(TransferError, match=r"\(16, 32\).*\(16, 48\)"):
        transfer(stage1, TransferPlan.all("pretrained"), wide, 0)
    broken = ckpt.Checkpoint({k: v for k, v in stage1.tensors.items() if k != "td.out.b"},
                             stage1.fingerprint, stage1.rng_state, stage1.meta)
    with pytest.raises(TransferError, match="td.out.b"):
        transfer(broken, TransferPlan.all("pretrained"), mcfg, 0)


@pytest.mark.parametrize("flag,group", [("freeze_visual_embedding", "visual_embedding"),
                                        ("freeze_transformer_encoder", "transformer_encoder"),
                                        ("freeze_decoder", "text_decoder")])
def test_frozen_groups_stay_constant(stage1, tiny_cfg, tiny_corpus, mcfg, flag, group):
    cfg = tiny_cfg.with_overrides(**{flag: True})
    plan = TransferPlan.from_config(cfg)
    P = transfer(stage1, plan, mcfg, cfg.seed)
    before = {n: t.data.copy() for n, t in P.items()}
    res = finetune(tiny_corpus.train, P, cfg, mcfg.vocab_size, plan=plan)
    for name, arr in before.items():
        if group_of(name) == group:
            assert res.final.tensors[name].tobytes() == arr.tobytes()
    assert any(group_of(n) != group and res.final.tensors[n].tobytes() != a.tobytes()
               for n, a in before.items())


def test_finetune_log_and_best_checkpoint(tiny_cfg, tiny_corpus, mcfg):
    rows = []
    P = transfer(None, TransferPlan.all("random"), mcfg, 0)
    res = finetune(tiny_corpus.train, P, tiny_cfg, mcfg.vocab_size, tiny_corpus.dev,
                   plan=TransferPlan.all("random"), log=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2]
    for r in rows:
        assert {"train_Lg", "lr", "dev_bleu1", "dev_bleu4", "dev_rougeL"} <= set(r)
    best_epoch = max(rows, key=lambda r: (r["dev_bleu4"], -r["epoch"]))["epoch"]
    assert res.best.meta["epoch"] == best_epoch
    assert res.final.meta["epoch"] == 2


def test_finetune_is_deterministic(tiny_cfg, tiny_corpus, mcfg):
    def run():
        P = transfer(None, TransferPlan.all("random"), mcfg, 0)
        return ckpt.encode(finetune(tiny_corpus.train, P, tiny_cfg, mcfg.vocab_size).final)
    assert run() == run()


def test_untrained_model_scores_near_zero(tiny_corpus, mcfg):
    P = transfer(None, TransferPlan.all("random"), mcfg, 0)
    scores = evaluate(P, tiny_corpus.dev, mcfg, 1, 1.0, 8)
    assert scores["bleu4"] < 0.02


def test_translate_clip_modes(tiny_corpus, mcfg):
    P = transfer(None, TransferPlan.all("random"), mcfg, 0)
    clip = tiny_corpus.dev[0].clip
    greedy = translate_clip(P, clip, mcfg, 1, 1.0, 6)
    assert greedy == translate_clip(P, clip, mcfg, 1, 1.0, 6)
    assert greedy[0] == BOS and (greedy[-1] == EOS or len(greedy) == 7)
    beam = translate_clip(P, clip, mcfg, 3, 1.0, 6)
    assert beam[0] == BOS
    one = translate_clip(P, clip, mcfg, 1, 1.0, 1)
    assert len(one) == 2 and one[0] == BOS
    with pytest.raises(InputError):
        translate_clip(P, VideoClip(np.zeros((3, 12, 12, 1), np.float32)), mcfg)


def test_batched_greedy_matches_single_clip(tiny_corpus, mcfg):
    P = transfer(None, TransferPlan.all("random"), mcfg, 3)
    recs = tiny_corpus.dev
    frames, valid = batches.eval_clips(recs, None)
    batched = greedy_batch(P, frames, valid, mcfg, 8)
    single = [translate_clip(P, VideoClip(f, v), mcfg, 1, 1.0, 8) for f, v in zip(frames, valid)]
    assert batched == single
    assert decode_records(P, recs, mcfg, 1, 1.0, 8) == single


def test_default_max_len(tiny_corpus):
    longest = max(len(r.sentence) - 2 for r in tiny_corpus.train)
    assert default_max_len(tiny_corpus.train) == 2 * longest + 2
