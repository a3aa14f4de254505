"""Acceptance suite: the eight runnable exit criteria.

Each test prints one PASS/FAIL line (run with ``pytest -v -s`` to see
them inline). Tolerances are pinned here, not calibrated elsewhere.
"""

import math
import time

import numpy as np
import pytest

from relfusion.cli import main
from relfusion.datamodel import Detection, GtObject
from relfusion.fusion import (
    BranchMask,
    TrainConfig,
    build_training_inputs,
    init_fusion_model,
    loss_and_grads,
    pair_logits,
    trainable_params,
)
from relfusion.metrics import (
    MatchSpec,
    average_precision,
    oi_score,
    recall_at_k,
    vrd_recall,
)
from relfusion.numcore import fd_gradient, max_relative_error, softmax
from relfusion.semantic import fit_frequency
from relfusion.spatial import spatial_feature

from reference_eval import ref_average_precision, ref_recall_at_k, ref_vrd_recall
from util import box, make_record, random_box, random_metric_instance, tiny_vocab


def _report(criterion: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"criterion {criterion} [{status}] {description}{suffix}")
    assert ok, f"criterion {criterion} failed: {description}{suffix}"


def test_criterion_1_score_arithmetic():
    ok = (
        abs(oi_score(74.40, 34.96, 40.70) - 45.14) <= 0.005
        and abs(oi_score(72.98, 26.54, 32.77) - 38.32) <= 0.005
        and oi_score(100, 100, 100) == pytest.approx(100.0, abs=1e-12)
    )
    _report(1, "weighted challenge score arithmetic", ok)


def _toy_training_setup():
    """3-detection record with every branch enabled, small dims."""
    dim, num_predicates = 6, 3
    rng = np.random.default_rng(21)
    dets, gt = [], []
    for i in range(3):
        b = box(15 * i, 10 * i, 15 * i + 25, 10 * i + 20)
        dets.append(
            Detection(label=i % 2, box=b, score=0.9, feature=rng.normal(size=dim))
        )
        gt.append(GtObject(label=i % 2, box=b))
    record = make_record(
        detections=dets,
        gt=gt,
        triplets=[(0, 1, 1), (1, 2, 2), (2, 3, 0)],
        width=200,
        height=200,
        pair_features={(0, 1): rng.normal(size=dim)},
    )
    vocab = tiny_vocab(num_predicates=num_predicates)
    freq = fit_frequency([record], vocab)
    model = init_fusion_model(
        freq, dim, vocab, rng, mask=BranchMask(),
        spatial_hidden=(8, 8), spo_hidden=(8, 8),
    )
    inputs = build_training_inputs(
        model, [record], TrainConfig(seed=21), np.random.default_rng(21)
    )
    return model, inputs


def test_criterion_2_fused_gradient_check():
    start = time.time()
    model, inputs = _toy_training_setup()
    _, grads = loss_and_grads(model, inputs)
    params = trainable_params(model)
    assert len(params) == len(grads) and len(params) == 16
    worst = 0.0
    checked = 0
    for p, g in zip(params, grads):
        fd = fd_gradient(lambda: loss_and_grads(model, inputs)[0], p, h=1e-5)
        worst = max(worst, max_relative_error(g, fd))
        checked += p.size
    elapsed = time.time() - start
    ok = worst < 1e-4 and elapsed < 10.0
    _report(
        2,
        "fused-loss gradients vs central finite differences",
        ok,
        f"{checked} parameters, max rel err {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_3_metric_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        preds, gts = random_metric_instance(
            rng, max_images=5, max_objects=4, num_predicates=3
        )
        for constraint in (False, True):
            spec = MatchSpec(graph_constraint=constraint)
            for k in (1, 5, 10):
                a = recall_at_k(preds, gts, k, spec)
                b = ref_recall_at_k(preds, gts, k, graph_constraint=constraint)
                worst = max(worst, abs(a - b))
        for budget in (1, 2, 3, "free"):
            a = vrd_recall(preds, gts, 5, budget, MatchSpec(), num_predicates=3)
            b = ref_vrd_recall(preds, gts, 5, budget, num_predicates=3)
            worst = max(worst, abs(a - b))
        for p in (1, 2, 3):
            for mode, phrase in (("rel", False), ("phr", True)):
                a = average_precision(preds, gts, p, mode, MatchSpec())
                b = ref_average_precision(preds, gts, p, phrase)
                if a is None or b is None:
                    worst = max(worst, 0.0 if (a is None and b is None) else 1.0)
                else:
                    worst = max(worst, abs(a - b))
    elapsed = time.time() - start
    ok = worst < 1e-9 and elapsed < 60.0
    _report(
        3,
        "recall/mAP protocols vs brute-force reference on 200 micro-instances",
        ok,
        f"max abs deviation {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_frequency_exactness():
    rng = np.random.default_rng(99)
    vocab = tiny_vocab(num_objects=5, num_predicates=4)
    exact = True
    sums_ok = True
    for trial in range(50):
        records = []
        expected: dict[tuple[int, int], np.ndarray] = {}
        for r in range(int(rng.integers(1, 5))):
            n = int(rng.integers(2, 5))
            gt = [GtObject(int(rng.integers(0, 5)), box(0, 0, 5, 5)) for _ in range(n)]
            trips = []
            for a in range(n):
                for b in range(n):
                    if a != b and rng.random() < 0.5:
                        p = int(rng.integers(1, 5))
                        trips.append((a, p, b))
                        key = (gt[a].label, gt[b].label)
                        expected.setdefault(key, np.zeros(5, dtype=np.int64))[p] += 1
            records.append(make_record(image_id=f"t{trial}_{r}", gt=gt, triplets=trips))
        table = fit_frequency(records, vocab)
        if set(table.counts) != set(expected):
            exact = False
        for key, counts in expected.items():
            if not np.array_equal(table.counts.get(key, np.zeros(5)), counts):
                exact = False
            if abs(table.probabilities(*key).sum() - 1.0) >= 1e-12:
                sums_ok = False
    _report(
        4,
        "frequency counts equal brute-force counting; smoothed rows normalize",
        exact and sums_ok,
    )


def test_criterion_5_spatial_encoding_conformance():
    feat = spatial_feature(box(0, 0, 10, 10), box(10, 0, 20, 10), 20, 10)
    expected = np.array(
        [-1.0, 0.0, 0.0, 0.0]
        + [-0.25, 0.0, math.log(0.5), 0.0]
        + [-0.5, 0.0, math.log(2.0), 0.0]
        + [0.0, 0.0, 0.5, 1.0, 0.5]
        + [0.5, 0.0, 1.0, 1.0, 0.5]
    )
    worked = bool(np.all(np.abs(feat - expected) < 1e-12))

    rng = np.random.default_rng(5)
    invariant = True
    for _ in range(1000):
        b1, b2 = random_box(rng), random_box(rng)
        w, h = float(rng.uniform(100, 300)), float(rng.uniform(100, 300))
        base = spatial_feature(b1, b2, w, h)
        s = float(rng.uniform(0.05, 20.0))
        scaled = spatial_feature(
            box(s * b1.xmin, s * b1.ymin, s * b1.xmax, s * b1.ymax),
            box(s * b2.xmin, s * b2.ymin, s * b2.xmax, s * b2.ymax),
            s * w, s * h,
        )
        if not np.all(np.abs(scaled - base) < 1e-9):
            invariant = False
        dx, dy = rng.uniform(-40, 40, size=2)
        shifted_deltas = spatial_feature(
            box(b1.xmin + dx, b1.ymin + dy, b1.xmax + dx, b1.ymax + dy),
            box(b2.xmin + dx, b2.ymin + dy, b2.xmax + dx, b2.ymax + dy),
            w + 2 * abs(dx), h + 2 * abs(dy),
        )[:12]
        if not np.all(np.abs(shifted_deltas - base[:12]) < 1e-9):
            invariant = False
    _report(5, "hand-derived pair encoding and its invariances", worked and invariant)


@pytest.fixture(scope="module")
def default_synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_synth")
    assert main(["gen-synth", "--out", str(out), "--seed", "7"]) == 0
    return out


def test_criterion_6_ablation_trend(default_synth_dir, tmp_path):
    start = time.time()
    out = tmp_path / "ablation.csv"
    code = main(
        [
            "ablate",
            "--train", str(default_synth_dir / "train.jsonl"),
            "--test", str(default_synth_dir / "test.jsonl"),
            "--vocab", str(default_synth_dir / "vocab.json"),
            "--out", str(out),
            "--seed", "7",
        ]
    )
    assert code == 0
    rows = [line.split(",") for line in out.read_text().strip().splitlines()[1:]]
    scores = [float(r[4]) for r in rows]
    r50s = [float(r[1]) for r in rows]
    elapsed = time.time() - start
    non_decreasing = all(b >= a - 0.5 for a, b in zip(scores, scores[1:]))
    headroom = r50s[3] - r50s[0]
    ok = non_decreasing and headroom >= 5.0 and elapsed < 120.0
    _report(
        6,
        "four-row ablation trend on the default synthetic set",
        ok,
        "scores " + " -> ".join(f"{s:.2f}" for s in scores)
        + f"; R@50 gain {headroom:.1f}; {elapsed:.0f}s",
    )


def test_criterion_7_fusion_invariants():
    model, _ = _toy_training_setup()
    rng = np.random.default_rng(3)
    dets = [
        Detection(label=i % 2, box=box(20 * i, 10, 20 * i + 30, 40), score=0.8,
                  feature=rng.normal(size=6))
        for i in range(3)
    ]
    record = make_record(detections=dets, gt=[], triplets=[], width=200, height=100)
    field_names = ("semantic", "spatial", "visual_spo", "visual_subobj")
    pair = (0, 2)

    def with_mask(**flags):
        m = init_fusion_model(
            model.freq, 6, tiny_vocab(num_predicates=3), np.random.default_rng(21),
            mask=BranchMask(**flags), spatial_hidden=(8, 8), spo_hidden=(8, 8),
        )
        return m

    singles = {
        name: pair_logits(with_mask(**{f: f == name for f in field_names}), record, pair)
        for name in field_names
    }

    additive = True
    zero_sub = True
    for bits in range(1, 16):
        enabled = [f for i, f in enumerate(field_names) if bits >> i & 1]
        fused = pair_logits(
            with_mask(**{f: f in enabled for f in field_names}), record, pair
        )
        # composing the enabled branch vectors in canonical order is exact
        acc = np.zeros(4)
        for name in reversed(enabled):
            acc = singles[name] + acc
        if not np.array_equal(fused, acc):
            additive = False
        # a disabled branch behaves exactly like a zero logit vector
        acc_zero = np.zeros(4)
        for name in reversed(field_names):
            vec = singles[name] if name in enabled else np.zeros(4)
            acc_zero = vec + acc_zero
        if not np.array_equal(fused, acc_zero):
            zero_sub = False

    full = pair_logits(with_mask(), record, pair)
    front = singles["semantic"]
    rest = pair_logits(
        with_mask(semantic=False, spatial=True, visual_spo=True, visual_subobj=True),
        record, pair,
    )
    split_exact = np.array_equal(front + rest, full)

    shift_ok = True
    for c in (-25.0, 0.5, 60.0):
        if not np.all(np.abs(softmax(full + c) - softmax(full)) < 1e-12):
            shift_ok = False

    ok = additive and zero_sub and split_exact and shift_ok
    _report(7, "branch additivity, zero-substitution, softmax shift invariance", ok)


def test_criterion_8_determinism(default_synth_dir, tmp_path):
    blobs = {"ckpt": [], "preds": []}
    for run in ("one", "two"):
        ckpt = tmp_path / f"model_{run}.json"
        preds = tmp_path / f"preds_{run}.jsonl"
        assert main(
            [
                "train",
                "--train", str(default_synth_dir / "train.jsonl"),
                "--vocab", str(default_synth_dir / "vocab.json"),
                "--checkpoint", str(ckpt),
                "--seed", "7",
                "--epochs", "3",
            ]
        ) == 0
        assert main(
            [
                "predict",
                "--test", str(default_synth_dir / "test.jsonl"),
                "--vocab", str(default_synth_dir / "vocab.json"),
                "--checkpoint", str(ckpt),
                "--out", str(preds),
                "--attributes",
            ]
        ) == 0
        blobs["ckpt"].append(ckpt.read_bytes())
        blobs["preds"].append(preds.read_bytes())
    ok = blobs["ckpt"][0] == blobs["ckpt"][1] and blobs["preds"][0] == blobs["preds"][1]
    _report(8, "byte-identical checkpoints and prediction files", ok)
