import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfslt import numerics as nx
from gfslt.corpus import BOS, EOS, MASK, N_SPECIAL, PAD
from gfslt.numerics import Tensor
from gfslt.objectives import (ObjectiveError, contrastive_loss, mask_sentence, restoration_loss,
                              smoothed_targets, stage1_total, translation_loss)

V = 37


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sentence(n):
    return np.array([BOS] + list(range(N_SPECIAL, N_SPECIAL + n)) + [EOS])


# ---------------------------------------------------------------- masking

@pytest.mark.parametrize("n,expect", [(20, 3), (3, 1), (1, 1), (10, 1), (14, 2)])
def test_mask_count(n, expect):
    m = mask_sentence(sentence(n), 0.15, np.random.default_rng(0), V)
    assert len(m.positions) == expect


def test_mask_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ObjectiveError):
        mask_sentence([BOS, EOS], 0.15, rng, V)
    for rho in (0.0, 1.0):
        with pytest.raises(ObjectiveError):
            mask_sentence(sentence(4), rho, rng, V)


def test_mask_statistics():
    rng = np.random.default_rng(1234)
    kinds, selected, maskable = [], 0, 0
    for _ in range(10_000):
        s = sentence(20)
        m = mask_sentence(s, 0.15, rng, V)
        assert (s[m.positions] >= N_SPECIAL).all()
        selected += len(m.positions)
        maskable += 20
        kinds.extend(m.kinds.tolist())
    assert abs(selected / maskable - 0.15) <= 0.01
    mix = np.bincount(kinds, minlength=3) / len(kinds)
    assert np.abs(mix - [0.8, 0.1, 0.1]).max() <= 0.02


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31), st.floats(0.05, 0.95))
def test_mask_invariants(n, seed, rho):
    s = np.concatenate([sentence(n), [PAD, PAD]])
    m = mask_sentence(s, rho, np.random.default_rng(seed), V)
    changed = np.flatnonzero(m.corrupted != m.original)
    assert set(changed) <= set(m.positions.tolist())
    assert all(m.original[p] >= N_SPECIAL for p in m.positions)
    for p, k in zip(m.positions, m.kinds):
        if k == 0:
            assert m.corrupted[p] == MASK
        elif k == 1:
            assert N_SPECIAL <= m.corrupted[p] < V and m.corrupted[p] != m.original[p]
        else:
            assert m.corrupted[p] == m.original[p]
    np.testing.assert_array_equal(m.original, s)


def test_random_substitution_is_uniform_over_other_tokens():
    rng = np.random.default_rng(7)
    s = sentence(1)
    seen = []
    for _ in range(20_000):
        m = mask_sentence(s, 0.5, rng, V)
        if m.kinds[0] == 1:
            seen.append(m.corrupted[1])
    counts = np.bincount(seen, minlength=V)[N_SPECIAL:]
    assert counts[0] == 0  # never the original token
    others = counts[1:]
    assert others.min() > 0.5 * others.mean() and others.max() < 1.5 * others.mean()


# ---------------------------------------------------------------- contrastive

def test_contrastive_uniform_and_singleton():
    v = Tensor(np.tile([[1.0, 0.0]], (4, 1)))
    loss = contrastive_loss(v, v, 10.0)
    assert abs(float(loss.data) - math.log(4)) <= 1e-6
    one = Tensor(np.array([[0.6, 0.8]]))
    assert abs(float(contrastive_loss(one, one, 14.3).data)) <= 1e-9


def test_contrastive_matches_direct_formula():
    rng = np.random.default_rng(0)
    v, t = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    logits = 3.0 * v @ t.T

    def ce(z):
        return np.mean(np.log(np.exp(z).sum(1)) - np.diag(z))
    expect = 0.5 * (ce(logits) + ce(logits.T))
    got = float(contrastive_loss(Tensor(v), Tensor(t), 3.0).data)
    assert got == pytest.approx(expect, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000))
def test_contrastive_symmetric_and_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    v, t = unit_rows(rng, n, 4), unit_rows(rng, n, 4)
    base = float(contrastive_loss(Tensor(v), Tensor(t), 5.0).data)
    swapped = float(contrastive_loss(Tensor(t), Tensor(v), 5.0).data)
    perm = rng.permutation(n)
    permuted = float(contrastive_loss(Tensor(v[perm]), Tensor(t[perm]), 5.0).data)
    assert swapped == pytest.approx(base, abs=1e-10)
    assert permuted == pytest.approx(base, abs=1e-10)
    assert base >= 0


def test_contrastive_perfect_alignment_goes_to_zero():
    e = np.eye(4)
    assert float(contrastive_loss(Tensor(e), Tensor(e), 100.0).data) < 1e-10


# ---------------------------------------------------------------- restoration / translation

def test_uniform_logits_give_log_v():
    target = np.array([[BOS, 5, 6, 7, EOS], [BOS, 8, EOS, PAD, PAD]])
    logits = Tensor(np.zeros((2, 4, V)))
    assert abs(float(translation_loss(logits, target).data) - math.log(V)) <= 1e-6
    assert abs(float(translation_loss(logits, target, 0.2).data) - math.log(V)) <= 1e-6
    lc = restoration_loss(logits, target, [np.array([2]), np.array([1])])
    assert abs(float(lc.data) - math.log(V)) <= 1e-6


def test_restoration_only_counts_masked_positions():
    target = np.array([[BOS, 5, 6, 7, EOS]])
    rng = np.random.default_rng(0)
    a = rng.normal(size=(1, 4, V))
    b = a.copy()
    b[0, [0, 2, 3]] = rng.normal(size=(3, V))  # disturb unmasked predictions
    la = restoration_loss(Tensor(a), target, [np.array([2])])
    lb = restoration_loss(Tensor(b), target, [np.array([2])])
    assert float(la.data) == float(lb.data)
    expect = -(a[0, 1] - np.log(np.exp(a[0, 1]).sum()))[6]
    assert float(la.data) == pytest.approx(expect, abs=1e-6)
    with pytest.raises(ObjectiveError):
        restoration_loss(Tensor(a), target, [np.array([0])])


def test_smoothed_targets_rows():
    d = smoothed_targets(np.array([[5, EOS, PAD]]), V, 0.2)
    np.testing.assert_allclose(d[0, :2].sum(-1), 1.0, atol=1e-6)
    assert d[0, 0, 5] == pytest.approx(0.8) and d[0, 0, PAD] == 0
    assert d[0, 0, 9] == pytest.approx(0.2 / (V - 2))
    assert (d[0, 2] == 0).all()


def test_smoothing_bounds_loss_below():
    """With eps > 0 even a perfectly peaked model pays at least the target entropy."""
    target = np.array([[BOS, 5, 6, EOS]])
    dist = smoothed_targets(target[:, 1:], V, 0.2)
    entropy = -(dist[dist > 0] * np.log(dist[dist > 0])).sum() / 3
    logits = Tensor(np.log(dist + 1e-30))
    assert float(translation_loss(logits, target, 0.2).data) == pytest.approx(entropy, rel=1e-5)
    peaked = np.full((1, 3, V), -20.0)
    peaked[0, np.arange(3), target[0, 1:]] = 20.0
    assert float(translation_loss(Tensor(peaked), target, 0.2).data) > entropy
    assert float(translation_loss(Tensor(peaked), target, 0.0).data) < 1e-10


def test_translation_shape_mismatch():
    with pytest.raises(ObjectiveError):
        translation_loss(Tensor(np.zeros((1, 5, V))), np.array([[BOS, 5, EOS]]))


def test_padding_does_not_change_translation_loss():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(1, 3, V))
    short = float(translation_loss(Tensor(logits), np.array([[BOS, 5, 6, EOS]]), 0.2).data)
    padded_logits = np.concatenate([logits, rng.normal(size=(1, 2, V))], axis=1)
    padded = np.array([[BOS, 5, 6, EOS, PAD, PAD]])
    assert float(translation_loss(Tensor(padded_logits), padded, 0.2).data) == pytest.approx(short)


def test_stage1_total_gradient_relation():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(3.0), requires_grad=True)
    total = stage1_total(nx.mul(a, a), nx.mul(b, b), 0.1)
    assert float(total.data) == pytest.approx(4.0 + 0.9)
    total.backward()
    assert float(a.grad) == pytest.approx(4.0) and float(b.grad) == pytest.approx(0.6)
    assert stage1_total(a, b, 0.0) is a
    with pytest.raises(ObjectiveError):
        stage1_total(a, b, -1.0)
