import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfslt import checkpoint as ckpt
from gfslt.corpus import ConfigError
from gfslt.numerics import NumericError, ParameterStore
from gfslt.optim import SGDMomentum, clip_global_norm, cosine_lr, sgd_momentum_step
from gfslt.pretrain import in_batch_retrieval_accuracy, pretrain


# ---------------------------------------------------------------- schedule

def test_cosine_endpoints_exact():
    assert cosine_lr(0, 1000) == 0.01
    assert cosine_lr(1000, 1000) == 1e-5
    assert cosine_lr(500, 1000) == pytest.approx((0.01 + 1e-5) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3000))
def test_cosine_is_monotone(total):
    lrs = [cosine_lr(s, total) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == 0.01 and abs(lrs[-1] - 1e-5) <= 1e-12


def test_cosine_rejects_negative_step():
    with pytest.raises(ValueError):
        cosine_lr(-1, 10)


# ---------------------------------------------------------------- SGD

def test_sgd_single_and_double_step():
    g = np.array([1.0, -2.0])
    p1, buf = sgd_momentum_step(np.zeros(2), g, None, 0.1)
    np.testing.assert_allclose(p1, -0.1 * g)
    p2, _ = sgd_momentum_step(p1, g, buf, 0.1)
    np.testing.assert_allclose(p2, -0.1 * g * 2.9)


def test_sgd_optimizer_matches_functional_form():
    rng = np.random.default_rng(0)
    P = ParameterStore([("w", rng.normal(size=(3, 2)).astype(np.float32))])
    ref, buf = P["w"].data.astype(np.float64), None
    opt = SGDMomentum(0.9)
    for _ in range(5):
        g = rng.normal(size=(3, 2)).astype(np.float32)
        P["w"].grad = g.copy()
        opt.step(P, 0.05)
        ref, buf = sgd_momentum_step(ref, g.astype(np.float64), buf, 0.05)
    np.testing.assert_allclose(P["w"].data, ref, atol=1e-6)


def test_sgd_rejects_non_finite_gradient():
    P = ParameterStore([("w", np.zeros(2, np.float32))])
    P["w"].grad = np.array([np.nan, 0.0], np.float32)
    with pytest.raises(NumericError, match="w"):
        SGDMomentum().step(P, 0.1)


def test_clip_global_norm():
    P = ParameterStore([("a", np.zeros(2, np.float32)), ("b", np.zeros(1, np.float32))])
    P["a"].grad = np.array([3.0, 0.0], np.float32)
    P["b"].grad = np.array([4.0], np.float32)
    assert clip_global_norm(P, 1.0) == pytest.approx(5.0)
    total = math.sqrt(float((P["a"].grad ** 2).sum() + (P["b"].grad ** 2).sum()))
    assert total == pytest.approx(1.0, rel=1e-5)
    P["a"].grad = np.array([np.inf, 0.0], np.float32)
    with pytest.raises(NumericError):
        clip_global_norm(P, 1.0)


# ---------------------------------------------------------------- retrieval accuracy

def test_retrieval_examples():
    e = np.eye(3)
    assert in_batch_retrieval_accuracy(e, e) == 1.0
    assert in_batch_retrieval_accuracy(e, e[[1, 2, 0]]) == 0.0
    tied = np.ones((3, 2)) / math.sqrt(2)
    assert in_batch_retrieval_accuracy(tied, tied) == 0.0  # ties are not wins
    with pytest.raises(ValueError):
        in_batch_retrieval_accuracy(e[:1], e[:1])


def test_random_embeddings_retrieve_at_chance():
    rng = np.random.default_rng(0)
    accs = []
    for _ in range(2000):
        v = rng.normal(size=(8, 16))
        t = rng.normal(size=(8, 16))
        accs.append(in_batch_retrieval_accuracy(v, t))
    assert abs(np.mean(accs) - 1 / 8) < 0.01


# ---------------------------------------------------------------- training loop

def _run(cfg, corpus, **kw):
    return pretrain(corpus.train, cfg, len(corpus.vocab), corpus.dev, **kw)


def test_pretrain_log_rows(tiny_cfg, tiny_corpus):
    rows = []
    ck = _run(tiny_cfg, tiny_corpus, log=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2]
    for r in rows:
        assert {"epoch", "L_s", "L_c", "L_total", "lr", "retrieval_acc_dev"} <= set(r)
        assert r["L_total"] == pytest.approx(r["L_s"] + 0.1 * r["L_c"], rel=1e-5)
        assert 0 <= r["retrieval_acc_dev"] <= 1
    assert rows[-1]["lr"] < rows[0]["lr"]
    assert ck.meta["epoch"] == 2 and ck.meta["step"] == 6
    assert any(k.startswith("opt/") for k in ck.tensors)
    assert ck.fingerprint == tiny_cfg.fingerprint()


def test_pretrain_is_deterministic(tiny_cfg, tiny_corpus):
    a = ckpt.encode(_run(tiny_cfg, tiny_corpus))
    b = ckpt.encode(_run(tiny_cfg, tiny_corpus))
    assert a == b


def test_resume_is_bitwise_identical(tiny_cfg, tiny_corpus):
    cfg = tiny_cfg.with_overrides(pretrain_epochs=3)
    full = _run(cfg, tiny_corpus)
    half = _run(cfg, tiny_corpus, until_epoch=1)
    half = ckpt.decode(ckpt.encode(half))
    resumed = _run(cfg, tiny_corpus, resume=half)
    assert ckpt.encode(resumed) == ckpt.encode(full)


@pytest.mark.parametrize("flag,prefix", [("freeze_text_encoder", "te."),
                                         ("freeze_text_decoder", "td.")])
def test_frozen_groups_stay_bitwise_constant(tiny_cfg, tiny_corpus, flag, prefix):
    from gfslt.model import init_params
    cfg = tiny_cfg.with_overrides(**{flag: True})
    init = init_params(cfg.model_config(len(tiny_corpus.vocab)), cfg.seed)
    ck = _run(cfg, tiny_corpus)
    names = [n for n in init.names() if n.startswith(prefix)]
    assert names
    assert all(ck.tensors[n].tobytes() == init[n].data.tobytes() for n in names)
    moved = [n for n in init.names() if n.startswith("ve.")
             and ck.tensors[n].tobytes() != init[n].data.tobytes()]
    assert moved


def test_zero_weight_with_frozen_decoder_is_pure_contrastive(tiny_cfg, tiny_corpus):
    base = tiny_cfg.with_overrides(loss_weight=0.0, freeze_text_decoder=True)
    rows = []
    _run(base, tiny_corpus, log=rows.append)
    assert all(r["L_total"] == pytest.approx(r["L_s"]) for r in rows)


@pytest.mark.parametrize("mode", ["alternating_updates", "restoration_stop_grad"])
def test_variants_run(tiny_cfg, tiny_corpus, mode):
    rows = []
    _run(tiny_cfg.with_overrides(**{mode: True}), tiny_corpus, log=rows.append)
    assert len(rows) == 2 and all(math.isfinite(r["L_total"]) for r in rows)


def test_batch_of_one_rejected(tiny_cfg, tiny_corpus):
    with pytest.raises(ConfigError):
        tiny_cfg.with_overrides(pretrain_batch=1)
    with pytest.raises(ConfigError):
        _run(tiny_cfg.with_overrides(pretrain_batch=16), tiny_corpus)


def test_non_finite_loss_aborts_with_step(tiny_cfg, tiny_corpus, monkeypatch):
    import gfslt.pretrain as pt

    def broken(*a, **k):
        raise NumericError("non-finite value in log")
    monkeypatch.setattr(pt, "contrastive_loss", broken)
    with pytest.raises(NumericError, match="step 0"):
        _run(tiny_cfg, tiny_corpus)
