"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are
also shown without ``-s``).
"""
import json
import math
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import random_crowd, rect_mask
from maskfuse.cli import main as cli_main
from maskfuse.coco_io import decode_rle_string, encode_rle_string
from maskfuse.copypaste import (
    BalanceConfig,
    ClassStats,
    DatasetSample,
    Instance,
    augment_dataset,
    class_sampling_weights,
    effective_number,
)
from maskfuse.evaluation import evaluate
from maskfuse.fusion import ensemble
from maskfuse.masks import BinaryMask, InstancePrediction, PredictionSet, iou_matrix, rle_decode, rle_encode
from maskfuse.nms import NmsConfig, decay_factors, matrix_nms
from maskfuse.synth import SynthConfig, synth

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def verdict(capsys):
    def record(number, title, ok, detail=""):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def test_01_codec_exactness(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bad = 0
    for k in range(1000):
        h, w = (int(v) for v in rng.integers(1, 513, size=2))
        density = (0.0, 1.0)[k] if k < 2 else rng.random()
        m = BinaryMask(rng.random((h, w)) < density)
        rle = rle_encode(m)
        back = rle_decode(decode_rle_string(encode_rle_string(rle), h, w))
        bad += not (rle_decode(rle) == m and back == m)
    elapsed = time.perf_counter() - t0
    verdict(1, "codec round-trip, 1000 masks", bad == 0 and elapsed < 10, f"{bad} mismatches, {elapsed:.2f}s < 10s")


def test_02_iou_oracle(verdict):
    from maskfuse.masks import intersection_union, mask_iou

    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(500):
        w, h = (int(v) for v in rng.integers(1, 33, size=2))
        a = rng.random((h, w)) < rng.random()
        b = rng.random((h, w)) < rng.random()
        inter = union = 0
        for y in range(h):
            for x in range(w):
                inter += bool(a[y, x] and b[y, x])
                union += bool(a[y, x] or b[y, x])
        expected = Fraction(inter, union) if union else Fraction(0)
        ma, mb = BinaryMask(a), BinaryMask(b)
        got_i, got_u = intersection_union(ma, mb)
        exact = (Fraction(got_i, got_u) if got_u else Fraction(0)) == expected
        bad += not (exact and mask_iou(ma, mb) == float(expected))
    verdict(2, "mask_iou exact vs brute force, 500 pairs", bad == 0, f"{bad} mismatches")


def test_03_nms_hand_cases(verdict):
    gauss = NmsConfig(kernel="gaussian", sigma=2.0)
    dup = [[1.0, 1.0], [1.0, 1.0]]
    d1 = decay_factors([0.9, 0.8], dup, gauss)[1]
    d2 = decay_factors([0.9, 0.6], [[1.0, 0.5], [0.5, 1.0]], gauss)[1]
    d3 = decay_factors([0.9, 0.8], dup, NmsConfig(kernel="linear"))[1]
    ok = abs(d1 - math.exp(-0.5)) < 1e-9 and abs(d1 - 0.60653) < 1e-5
    ok &= abs(d2 - math.exp(-0.125)) < 1e-9 and abs(d2 - 0.88250) < 1e-5
    ok &= abs(d3) < 1e-9
    verdict(3, "matrix NMS hand cases", ok, f"{d1:.9f} {d2:.9f} {d3:.9f}")


def _key(p):
    return (round(p.score, 12), p.category_id, p.mask.packed.tobytes())


def _sorted_inputs(crowd):
    order = sorted(range(len(crowd)), key=lambda i: -crowd.predictions[i].score)
    return [crowd.predictions[i].score for i in order], iou_matrix([crowd.predictions[i].mask for i in order])


def test_04_nms_properties(verdict):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    failures = []
    for trial in range(200):
        crowd = random_crowd(rng)
        for kernel in ("linear", "gaussian"):
            for mode in ("per-category", "agnostic"):
                cfg = NmsConfig(kernel=kernel, category_mode=mode, score_threshold=0.0)
                out = matrix_nms(crowd, cfg)
                survivors = {_key(p) for p in out}
                tops = {}
                for p in crowd.predictions:
                    g = p.category_id if mode == "per-category" else 0
                    if g not in tops or p.score > tops[g].score:
                        tops[g] = p
                if not all(_key(t) in survivors for t in tops.values()):
                    failures.append((trial, "top"))
                perm = [crowd.predictions[i] for i in rng.permutation(len(crowd))]
                if sorted(survivors) != sorted(_key(p) for p in matrix_nms(crowd.with_predictions(perm), cfg)):
                    failures.append((trial, "perm"))
        scores, ious = _sorted_inputs(crowd)
        lin = decay_factors(scores, ious, NmsConfig(kernel="linear"))
        prev = None
        for sigma in (0.1, 0.5, 1.0, 2.0, 5.0):
            d = decay_factors(scores, ious, NmsConfig(sigma=sigma))
            if not (np.all((d > 0) & (d <= 1)) and np.all((lin >= 0) & (lin <= 1))):
                failures.append((trial, "bounds"))
            if prev is not None and np.any(d < prev - 1e-12):
                failures.append((trial, "sigma"))
            prev = d
    elapsed = time.perf_counter() - t0
    verdict(4, "NMS properties, 200 crowds", not failures and elapsed < 30, f"{len(failures)} failures, {elapsed:.2f}s < 30s")


def test_05_effective_number_limits(verdict):
    stats = ClassStats({1: 100, 2: 10, 3: 1, 4: 37})
    uniform = class_sampling_weights(stats, 0.0)
    ok_uniform = all(abs(v - 0.25) < 1e-15 for v in uniform.values())

    # normalised weights for every two-class split with counts <= 100, plus the long-tail set;
    # ratios are checked as rare-over-common, the orientation w_B/w_A = E_A/E_B
    worst = 0.0
    configs = [{1: n, 2: m} for n in range(1, 101) for m in range(n, 101)] + [{1: 100, 2: 10, 3: 1}]
    for counts in configs:
        w = class_sampling_weights(ClassStats(counts), 0.999)
        total = sum(1 / n for n in counts.values())
        for c, n in counts.items():
            exact = (1 / n) / total
            worst = max(worst, abs(w[c] - exact) / exact)
        (a, na), (b, nb) = sorted(counts.items(), key=lambda kv: kv[1])[:2]
        if na < nb:
            worst = max(worst, abs(w[a] / w[b] - nb / na) / (nb / na))
    e = effective_number(10, 0.9)
    ok = ok_uniform and worst < 0.05 and abs(e - 6.5132) <= 1e-4
    verdict(5, "effective-number limits", ok, f"max rel gap {100 * worst:.2f}% < 5%, E(0.9,10)={e:.5f}")


def _long_tail_dataset(counts=(100, 10, 1), num_images=100, size=48):
    rng = np.random.default_rng(0)
    cats = [c for c, n in enumerate(counts, start=1) for _ in range(n)]
    per_image = [[] for _ in range(num_images)]
    for k, c in enumerate(cats):
        per_image[k % num_images].append(c)
    samples, next_id = [], 1
    for image_id, cs in enumerate(per_image, start=1):
        insts = []
        for j, c in enumerate(cs):
            x0 = 4 + 10 * j
            insts.append(Instance(rect_mask(size, size, x0, 6, x0 + 7, 14 + 4 * c), c, next_id))
            next_id += 1
        samples.append(DatasetSample(rng.integers(0, 255, (size, size, 3), dtype=np.uint8), tuple(insts), image_id))
    return samples


def test_06_balanced_vs_simple(verdict):
    samples = _long_tail_dataset()
    expected = class_sampling_weights(ClassStats({1: 100, 2: 10, 3: 1}), 0.999)[3]
    beats, shares = 0, []
    for seed in range(10):
        _, bal = augment_dataset(samples, BalanceConfig(mode="balanced", beta=0.999, pastes_per_image=3), seed)
        _, sim = augment_dataset(samples, BalanceConfig(mode="simple", pastes_per_image=3), seed)
        shares.append(bal.share(3))
        beats += bal.share(3) > sim.share(3)
    mean = float(np.mean(shares))
    ok = beats == 10 and abs(mean - expected) <= 0.03
    detail = (
        f"balanced > simple in {beats}/10 seeds; mean rare share {mean:.4f} vs analytic {expected:.4f}; "
        f"per-seed range {min(shares):.3f}..{max(shares):.3f}"
    )
    verdict(6, "balanced vs simple rare-category share", ok, detail)


def _one_image(preds, gts, size=8):
    return {1: PredictionSet(1, size, size, tuple(preds))}, {1: list(gts)}


def test_07_evaluator(verdict):
    masks = [rect_mask(8, 8, 0, 0, 3, 3), rect_mask(8, 8, 4, 4, 8, 8)]
    perfect = evaluate(*_one_image([InstancePrediction(m, 1, 1.0) for m in masks],
                                   [Instance(m, 1, k) for k, m in enumerate(masks)])).mAP
    gt, pred = rect_mask(8, 8, 0, 0, 5, 1), rect_mask(8, 8, 0, 0, 3, 1)
    sweep = evaluate(*_one_image([InstancePrediction(pred, 1, 0.9)], [Instance(gt, 1, 1)])).mAP

    from test_evaluation import TOY_MAP, _load_toy

    toy = evaluate(*_load_toy()).mAP
    ok = perfect == 1.0 and sweep == 0.3 and abs(toy - TOY_MAP) <= 1e-9
    verdict(7, "evaluator correctness", ok, f"perfect={perfect!r} sweep={sweep!r} toy={toy:.12f}")


def test_08_ensemble_direction(verdict):
    t0 = time.perf_counter()
    wins, lines = 0, []
    for seed in range(10):
        cfg = SynthConfig(num_images=200, num_models=3, drop_prob=0.15, jitter_px=2.0, score_noise=0.1,
                          seed=seed, render_images=False)
        data = synth(cfg)
        gt = data.dataset.ground_truth()
        singles = [evaluate(m, gt).mAP for m in data.models]
        nms = NmsConfig(kernel="gaussian", sigma=2.0)
        fused = {i: ensemble([m[i] for m in data.models], nms=nms) for i in gt}
        ens = evaluate(fused, gt).mAP
        wins += ens >= max(singles)
        lines.append(f"{ens:.3f}/{max(singles):.3f}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 8 and elapsed < 300
    verdict(8, "Gaussian ensemble >= best single", ok, f"{wins}/10 seeds, {elapsed:.1f}s < 300s; " + " ".join(lines))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    args = ["synth", "--out", str(out), "--images", "30", "--width", "96", "--height", "96", "--no-images"]
    assert cli_main(args) == 0
    return out


def test_09_kernel_ablation_report(verdict, synth_dir, capsys):
    out = synth_dir / "report.json"
    code = cli_main(["report", "--data", str(synth_dir), "--out", str(out)])
    printed = capsys.readouterr().out
    rows = json.loads(out.read_text())["rows"]
    fused = [r for r in rows if r["kernel"] is not None]
    by = {(r["kernel"], r["category_mode"]): r for r in fused}
    ok = code == 0 and "Ensemble (linear)" in printed and "Ensemble (Gaussian)" in printed
    ok &= all(math.isfinite(r["mAP"]) for r in rows)
    # rebuild each fused row from the library with only the kernel swapped
    from maskfuse.coco_io import load_dataset, load_results

    ds = load_dataset(synth_dir / "gt.json")
    gt = ds.ground_truth()
    runs = [load_results(p, ds.images) for p in sorted(synth_dir.glob("model_*.json"))]
    base = NmsConfig()
    for (kernel, mode), row in by.items():
        cfg = replace(base, kernel=kernel, category_mode=mode)
        value = evaluate({i: ensemble([r[i] for r in runs], nms=cfg) for i in gt}, gt).mAP
        ok &= value == row["mAP"]
    ok &= len(by) == 4
    detail = ", ".join(f"{k}/{m}={100 * r['mAP']:.2f}" for (k, m), r in sorted(by.items()))
    verdict(9, "report emits linear and Gaussian ensemble rows", ok, detail)


def test_10_degenerate_fusion(verdict, synth_dir, tmp_path):
    gt, model = str(synth_dir / "gt.json"), str(synth_dir / "model_0.json")
    a, b = tmp_path / "nms.json", tmp_path / "ensemble.json"
    codes = (cli_main(["nms", model, "--gt", gt, "--out", str(a)]), cli_main(["ensemble", model, "--gt", gt, "--out", str(b)]))
    ok = codes == (0, 0) and a.read_bytes() == b.read_bytes()
    verdict(10, "ensemble of one == plain NMS, byte-identical", ok, f"{a.stat().st_size} bytes")
