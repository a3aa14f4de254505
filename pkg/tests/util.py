"""Shared builders for tests: boxes, records, random metric instances."""

from __future__ import annotations

import numpy as np

from relfusion.datamodel import (
    Box,
    Detection,
    ImageRecord,
    PredictedTriplet,
    ResolvedTriplet,
    Vocabulary,
)


def box(x0, y0, x1, y1) -> Box:
    return Box(float(x0), float(y0), float(x1), float(y1))


def random_box(rng, lo=0.0, hi=100.0, grid=None) -> Box:
    """A valid positive-area box; on a coarse grid when requested."""
    if grid is not None:
        xs = sorted(rng.choice(grid, size=2, replace=False))
        ys = sorted(rng.choice(grid, size=2, replace=False))
        return Box(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]))
    x = sorted(rng.uniform(lo, hi, size=2))
    y = sorted(rng.uniform(lo, hi, size=2))
    return Box(x[0], y[0], x[1] + 1.0, y[1] + 1.0)


def make_record(
    image_id="img",
    width=100,
    height=100,
    detections=(),
    gt=(),
    triplets=(),
    attributes=(),
    pair_features=None,
) -> ImageRecord:
    return ImageRecord(
        image_id=image_id,
        width=width,
        height=height,
        detections=list(detections),
        gt_boxes=list(gt),
        gt_triplets=list(triplets),
        gt_attributes=list(attributes),
        pair_features=dict(pair_features or {}),
    )


def make_detection(label=0, b=None, score=1.0, feature=None, dim=4) -> Detection:
    return Detection(
        label=label,
        box=b if b is not None else box(0, 0, 10, 10),
        score=score,
        feature=np.zeros(dim) if feature is None else np.asarray(feature, dtype=float),
    )


def tiny_vocab(num_objects=4, num_predicates=3, num_attributes=0) -> Vocabulary:
    return Vocabulary(
        object_classes=tuple(f"o{i}" for i in range(num_objects)),
        predicates=("__no_rel__",) + tuple(f"p{i}" for i in range(1, num_predicates + 1)),
        attributes=tuple(f"a{i}" for i in range(num_attributes)),
    )


def random_metric_instance(rng, max_images=5, max_objects=4, num_predicates=3):
    """A tiny prediction/ground-truth pair designed to stress matching.

    Boxes live on a coarse grid so exact overlaps, boundary IoU values
    and duplicate localizations all occur; scores are drawn from a small
    discrete set to exercise tie handling; per ordered pair, predicted
    predicates are sampled without replacement so per-pair budgets of P
    keep everything.
    """
    grid = np.array([0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    score_levels = np.round(np.linspace(0.1, 1.0, 7), 3)
    predictions = {}
    ground_truth = {}
    for i in range(int(rng.integers(1, max_images + 1))):
        image_id = f"im{i}"
        n_obj = int(rng.integers(1, max_objects + 1))
        objects = [
            (int(rng.integers(0, 3)), random_box(rng, grid=grid)) for _ in range(n_obj)
        ]
        gts = []
        for a in range(n_obj):
            for b_ in range(n_obj):
                if a == b_ or rng.random() > 0.4:
                    continue
                gts.append(
                    ResolvedTriplet(
                        sub_label=objects[a][0],
                        sub_box=objects[a][1],
                        predicate=int(rng.integers(1, num_predicates + 1)),
                        obj_label=objects[b_][0],
                        obj_box=objects[b_][1],
                    )
                )
        preds = []
        for a in range(n_obj):
            for b_ in range(n_obj):
                if a == b_:
                    continue
                n_preds = int(rng.integers(0, num_predicates + 1))
                predicates = rng.choice(
                    np.arange(1, num_predicates + 1), size=n_preds, replace=False
                )
                for p in predicates:
                    jitter = rng.random()
                    if jitter < 0.5:
                        sub_box, obj_box = objects[a][1], objects[b_][1]
                    elif jitter < 0.8:
                        sub_box = _shift(objects[a][1], rng)
                        obj_box = _shift(objects[b_][1], rng)
                    else:
                        sub_box = random_box(rng, grid=grid)
                        obj_box = random_box(rng, grid=grid)
                    preds.append(
                        PredictedTriplet(
                            sub_box=sub_box,
                            sub_label=objects[a][0],
                            predicate=int(p),
                            obj_box=obj_box,
                            obj_label=objects[b_][0],
                            score=float(rng.choice(score_levels)),
                        )
                    )
        predictions[image_id] = preds
        ground_truth[image_id] = gts
    return predictions, ground_truth


def _shift(b: Box, rng) -> Box:
    dx = float(rng.choice([-2.0, 0.0, 2.0]))
    dy = float(rng.choice([-2.0, 0.0, 2.0]))
    return Box(b.xmin + dx, b.ymin + dy, b.xmax + dx, b.ymax + dy)
