import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_crowd, rect_mask
from maskfuse.errors import ContractViolation
from maskfuse.masks import InstancePrediction, PredictionSet, iou_matrix
from maskfuse.nms import NmsConfig, decay_factors, greedy_nms_oracle, matrix_nms

GAUSS = NmsConfig(kernel="gaussian", sigma=2.0)
LINEAR = NmsConfig(kernel="linear")


def _set(*preds, size=16):
    return PredictionSet(0, size, size, tuple(InstancePrediction(m, c, s) for m, c, s in preds))


def _brute_decay(scores, ious, f):
    """Direct transcription of the min-ratio rule with explicit loops."""
    n = len(scores)
    iou_max = [max([ious[k][i] for k in range(i)], default=0.0) for i in range(n)]
    out = []
    for j in range(n):
        ratios = [f(ious[i][j]) / max(f(iou_max[i]), 1e-6) for i in range(j)]
        out.append(min(ratios, default=1.0))
    return out


def test_single_input_decay():
    assert decay_factors([0.7], [[1.0]], GAUSS).tolist() == [1.0]


def test_gaussian_duplicate_decay():
    d = decay_factors([0.9, 0.8], [[1.0, 1.0], [1.0, 1.0]], GAUSS)
    assert d[0] == 1.0
    assert d[1] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert d[1] == pytest.approx(0.60653, abs=1e-5)


def test_gaussian_half_overlap_decay():
    d = decay_factors([0.9, 0.6], [[1.0, 0.5], [0.5, 1.0]], GAUSS)
    assert d[1] == pytest.approx(math.exp(-0.125), abs=1e-12)
    assert d[1] == pytest.approx(0.88250, abs=1e-5)


def test_linear_duplicate_decay_is_zero():
    d = decay_factors([0.9, 0.8], [[1.0, 1.0], [1.0, 1.0]], LINEAR)
    assert d.tolist() == [1.0, 0.0]


def test_linear_clamped_denominator():
    # third item duplicates the (fully suppressed) second one
    ious = [[1, 1, 0], [1, 1, 1], [0, 1, 1]]
    d = decay_factors([0.9, 0.8, 0.7], ious, LINEAR)
    assert np.all(np.isfinite(d))
    assert d.tolist() == [1.0, 0.0, 0.0]


def test_decay_matches_loop_transcription(rng):
    for _ in range(30):
        crowd = random_crowd(rng)
        order = sorted(range(len(crowd)), key=lambda i: -crowd.predictions[i].score)
        scores = [crowd.predictions[i].score for i in order]
        ious = iou_matrix([crowd.predictions[i].mask for i in order])
        for cfg, f in ((GAUSS, lambda x: math.exp(-x * x / 2.0)), (LINEAR, lambda x: 1 - x)):
            got = decay_factors(scores, ious, cfg)
            want = np.clip(_brute_decay(scores, ious.tolist(), f), 0, 1)
            assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_decay_rejects_unsorted():
    with pytest.raises(ContractViolation):
        decay_factors([0.1, 0.9], np.eye(2), GAUSS)


def test_duplicates_linear_keep_top_only():
    m = rect_mask(16, 16, 2, 2, 8, 8)
    out = matrix_nms(_set((m, 1, 0.9), (m, 1, 0.8)), NmsConfig(kernel="linear", score_threshold=0.01))
    assert [p.score for p in out] == [0.9]


def test_duplicates_gaussian_both_survive():
    m = rect_mask(16, 16, 2, 2, 8, 8)
    out = matrix_nms(_set((m, 1, 0.9), (m, 1, 0.8)), NmsConfig(score_threshold=0.05))
    assert [p.score for p in out] == pytest.approx([0.9, 0.8 * math.exp(-0.5)], abs=1e-12)
    assert out.predictions[1].score == pytest.approx(0.48522, abs=1e-5)


@pytest.mark.parametrize("kernel", ["linear", "gaussian"])
def test_disjoint_scores_unchanged(kernel):
    preds = [(rect_mask(16, 16, 4 * k, 0, 4 * k + 3, 3), 1, 0.9 - 0.1 * k) for k in range(4)]
    out = matrix_nms(_set(*preds), NmsConfig(kernel=kernel))
    assert [p.score for p in out] == [s for _, _, s in preds]


def test_per_category_isolation():
    m = rect_mask(16, 16, 2, 2, 8, 8)
    pset = _set((m, 1, 0.9), (m, 2, 0.8))
    assert [p.score for p in matrix_nms(pset, LINEAR)] == [0.9, 0.8]
    agnostic = NmsConfig(kernel="linear", category_mode="agnostic")
    assert [p.score for p in matrix_nms(pset, agnostic)] == [0.9]


def test_threshold_max_keep_and_pre_top_k():
    preds = [(rect_mask(16, 16, 4 * k, 0, 4 * k + 3, 3), 1, 0.9 - 0.2 * k) for k in range(4)]
    pset = _set(*preds)
    assert len(matrix_nms(pset, NmsConfig(score_threshold=0.4))) == 3
    assert [p.score for p in matrix_nms(pset, NmsConfig(max_keep=2))] == [0.9, 0.7]
    assert len(matrix_nms(pset, NmsConfig(pre_top_k=1))) == 1
    assert len(matrix_nms(pset.with_predictions(()), GAUSS)) == 0


def test_tie_breaking_is_deterministic():
    a = rect_mask(16, 16, 0, 0, 6, 6)
    b = rect_mask(16, 16, 1, 1, 7, 7)
    out = matrix_nms(_set((a, 2, 0.5), (b, 1, 0.5)), LINEAR)
    # category 1 goes first on equal scores, so it is the undecayed one
    assert out.predictions[0].category_id == 1
    assert out.predictions[0].score == 0.5


@pytest.mark.parametrize(
    "kwargs", [{"kernel": "box"}, {"sigma": 0}, {"score_threshold": 1.5}, {"max_keep": 0}, {"category_mode": "x"}]
)
def test_config_validation(kwargs):
    with pytest.raises(ContractViolation):
        NmsConfig(**kwargs)


def test_greedy_oracle_examples():
    m = rect_mask(16, 16, 2, 2, 8, 8)
    assert len(greedy_nms_oracle(_set((m, 1, 0.9), (m, 1, 0.8)), 0.5)) == 1
    disjoint = _set(*[(rect_mask(16, 16, 4 * k, 0, 4 * k + 3, 3), 1, 0.5 + 0.1 * k) for k in range(3)])
    assert len(greedy_nms_oracle(disjoint, 0.5)) == 3


def _key(p):
    return (round(p.score, 12), p.category_id, p.mask.packed.tobytes())


def test_greedy_survivors_within_matrix_nms(rng):
    thr = 0.5
    for _ in range(100):
        crowd = random_crowd(rng)
        kept = greedy_nms_oracle(crowd, thr)
        cfg = NmsConfig(kernel="linear", score_threshold=0.0, max_keep=len(crowd), category_mode="agnostic")
        fused = matrix_nms(crowd, cfg)
        assert not Counter(_key(p)[1:] for p in kept) - Counter(_key(p)[1:] for p in fused)

        # A greedy keeper whose overlapping predecessors are all themselves
        # unsuppressed has linear decay of at least (1 - thr).
        order = sorted(range(len(crowd)), key=lambda i: -crowd.predictions[i].score)
        scores = [crowd.predictions[i].score for i in order]
        ious = iou_matrix([crowd.predictions[i].mask for i in order])
        decay = decay_factors(scores, ious, LINEAR)
        iou_max = np.triu(ious, 1).max(axis=0)
        kept_ids = {id(p) for p in kept}
        for pos, i in enumerate(order):
            if id(crowd.predictions[i]) not in kept_ids:
                continue
            if all(iou_max[k] == 0 for k in range(pos) if ious[k, pos] > 0):
                assert decay[pos] >= 1 - thr - 1e-12


crowds = st.integers(0, 2**32 - 1).map(lambda s: random_crowd(np.random.default_rng(s)))


@settings(max_examples=60, deadline=None)
@given(crowds, st.sampled_from(["linear", "gaussian"]), st.sampled_from(["per-category", "agnostic"]))
def test_top_prediction_invariance(crowd, kernel, mode):
    cfg = NmsConfig(kernel=kernel, category_mode=mode, score_threshold=0.0, max_keep=100)
    out = matrix_nms(crowd, cfg)
    groups = {}
    for p in crowd.predictions:
        key = p.category_id if mode == "per-category" else 0
        if key not in groups or p.score > groups[key].score:
            groups[key] = p
    survivors = {_key(p) for p in out}
    for top in groups.values():
        assert _key(top) in survivors


@settings(max_examples=60, deadline=None)
@given(crowds, st.randoms(use_true_random=False), st.sampled_from(["linear", "gaussian"]))
def test_permutation_invariance(crowd, rnd, kernel):
    cfg = NmsConfig(kernel=kernel)
    preds = list(crowd.predictions)
    rnd.shuffle(preds)
    a = sorted(_key(p) for p in matrix_nms(crowd, cfg))
    b = sorted(_key(p) for p in matrix_nms(crowd.with_predictions(preds), cfg))
    assert a == b


@settings(max_examples=60, deadline=None)
@given(crowds, st.floats(0.05, 10.0), st.floats(0.05, 10.0))
def test_decay_bounds_and_sigma_monotonicity(crowd, s1, s2):
    lo, hi = sorted((s1, s2))
    order = sorted(range(len(crowd)), key=lambda i: -crowd.predictions[i].score)
    scores = [crowd.predictions[i].score for i in order]
    ious = iou_matrix([crowd.predictions[i].mask for i in order])
    d_lo = decay_factors(scores, ious, NmsConfig(sigma=lo))
    d_hi = decay_factors(scores, ious, NmsConfig(sigma=hi))
    d_lin = decay_factors(scores, ious, LINEAR)
    assert np.all((d_lo > 0) & (d_lo <= 1)) and np.all((d_hi > 0) & (d_hi <= 1))
    assert np.all((d_lin >= 0) & (d_lin <= 1))
    assert np.all(d_hi >= d_lo - 1e-12)


def test_idempotent_on_disjoint_sets():
    preds = [(rect_mask(16, 16, 4 * k, 4, 4 * k + 3, 8), k % 2, 0.2 + 0.15 * k) for k in range(4)]
    once = matrix_nms(_set(*preds), GAUSS)
    assert matrix_nms(once, GAUSS) == once
