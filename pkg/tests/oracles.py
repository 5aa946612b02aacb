"""Independent reference implementations used as test oracles.

Everything here is deliberately written as plain per-element Python against
the documented rules, sharing no code path with the vectorized
implementations it checks.
"""

from __future__ import annotations

import numpy as np

from detseg.assign import AssignConfig, GroundTruthObject
from detseg.geom import AnchorGrid, AnchorTemplate, BBox, iou, make_anchor_grid


def finite_difference(value_fn, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function in the array entries."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        hi = value_fn()
        flat[i] = original - step
        lo = value_fn()
        flat[i] = original
        grad_flat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradients_close(analytic: np.ndarray, reference: np.ndarray, tol: float = 1e-4) -> bool:
    scale = max(float(np.abs(reference).max(initial=0.0)),
                float(np.abs(analytic).max(initial=0.0)), 1e-3)
    return float(np.abs(analytic - reference).max(initial=0.0)) <= tol * scale


def assign_oracle(
    grid: AnchorGrid,
    gts: list[GroundTruthObject],
    image_w: float,
    image_h: float,
    cfg: AssignConfig,
) -> list[str]:
    """Brute-force application of the assignment rule list, one anchor at a time.

    Returns per-anchor states as strings; rule provenance is tracked so the
    fallback can tell band don't-cares and default inactives from the rest.
    """
    states = ["inactive"] * len(grid)
    provenance = ["default"] * len(grid)
    owner = [None] * len(grid)
    if not gts:
        return states

    all_overlaps = []
    for index in range(len(grid)):
        anchor = grid.box(index)
        overlaps = [iou(anchor, gt.bbox) for gt in gts]
        all_overlaps.append(overlaps)

        best_gt = 0
        for j in range(1, len(gts)):
            if overlaps[j] > overlaps[best_gt]:
                best_gt = j
        b1 = overlaps[best_gt]
        b2 = max((overlaps[j] for j in range(len(gts)) if j != best_gt), default=0.0)

        crosses_border = (
            anchor.x_min < 0
            or anchor.y_min < 0
            or anchor.x_max > image_w
            or anchor.y_max > image_h
        )
        if crosses_border and b1 >= cfg.dontcare_iou:
            states[index], provenance[index] = "dontcare", "border"
        elif b1 >= cfg.dontcare_iou and b2 >= cfg.dontcare_iou and (b1 - b2) < cfg.ambiguity_gap:
            states[index], provenance[index] = "inactive", "ambiguous"
        elif b1 > cfg.active_iou:
            states[index], provenance[index] = "active", "threshold"
            owner[index] = best_gt
        elif b1 > cfg.dontcare_iou:
            states[index], provenance[index] = "dontcare", "band"

    for j in range(len(gts)):
        if any(owner[i] == j and states[i] == "active" for i in range(len(grid))):
            continue
        best_anchor = 0
        for i in range(1, len(grid)):
            if all_overlaps[i][j] > all_overlaps[best_anchor][j]:
                best_anchor = i
        if all_overlaps[best_anchor][j] > cfg.dontcare_iou and provenance[best_anchor] in ("default", "band"):
            states[best_anchor], provenance[best_anchor] = "active", "fallback"
            owner[best_anchor] = j
    return states


def random_assignment_scene(rng: np.random.Generator):
    """A small random grid/ground-truth pair for oracle comparison."""
    stride = int(rng.integers(4, 10))
    rows = int(rng.integers(1, 5))
    cols = int(rng.integers(1, 5))
    templates = [
        AnchorTemplate(ratio=float(rng.uniform(0.25, 4.0)), area=float(rng.uniform(9, 1200)))
        for _ in range(int(rng.integers(1, 11)))
    ]
    image_w = cols * stride
    image_h = rows * stride
    grid = make_anchor_grid(image_w, image_h, stride, templates)
    gts = []
    for k in range(int(rng.integers(0, 5))):
        w = float(rng.uniform(2, image_w * 1.2))
        h = float(rng.uniform(2, image_h * 1.2))
        x0 = float(rng.uniform(-8, image_w - w + 8))
        y0 = float(rng.uniform(-8, image_h - h + 8))
        gts.append(
            GroundTruthObject(
                class_id=int(rng.integers(0, 3)),
                bbox=BBox(x0, y0, x0 + w, y0 + h),
                instance_id=k,
            )
        )
    return grid, gts, image_w, image_h


def nms_oracle(boxes: list[BBox], scores: list[float], classes: list[int],
               threshold: float) -> list[int]:
    """Textbook greedy NMS on index lists; returns kept indices in keep order."""
    remaining = sorted(range(len(boxes)), key=lambda i: -scores[i])
    kept: list[int] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        survivors = []
        for i in remaining:
            if classes[i] == classes[best] and iou(boxes[i], boxes[best]) > threshold:
                continue
            survivors.append(i)
        remaining = survivors
    return kept


def eleven_point_ap(recalls: list[float], precisions: list[float]) -> float:
    """Hand-rolled 11-point interpolation over a finished PR sweep."""
    total = 0.0
    for k in range(11):
        r = k / 10.0
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 11.0
