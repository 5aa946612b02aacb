"""Post-processing: raw head outputs to final detections.

Detections are ranked and thresholded by the two-way softmax objectness
probability; the class head only decides which class a kept detection gets.
NMS is greedy and runs per class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .geom import AnchorGrid, BBox, decode_array, iou_matrix
from .net.model import flatten_per_anchor
from .net.tensor import as_data

__all__ = ["Detection", "decode_detections", "nms", "detections_to_jsonl", "detections_from_jsonl"]


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    objectness: float
    class_score: Optional[float] = None
    embedding: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must be a probability, got {self.objectness}")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def decode_detections(
    outputs: Mapping[str, np.ndarray],
    grid: AnchorGrid,
    score_threshold: float = 0.5,
) -> list[Detection]:
    """Convert one image's head outputs into thresholded detections.

    ``outputs`` maps head names to (C, H, W) arrays (or Tensors) for a single
    image. Every anchor whose foreground probability reaches the threshold
    yields one detection; results are ordered by descending objectness with
    anchor index breaking ties.
    """
    t = len(grid.templates)
    heads = {}
    for name, per_anchor in (("objectness", 2), ("class_scores", None), ("box_deltas", 4), ("embeddings", None)):
        if name not in outputs:
            raise KeyError(f"missing head {name!r}")
        arr = as_data(outputs[name])
        if arr.ndim != 3:
            raise ValueError(f"{name} must be (C, H, W) for one image, got shape {arr.shape}")
        if arr.shape[1] != grid.rows or arr.shape[2] != grid.cols:
            raise ValueError(
                f"{name} spatial size {arr.shape[1]}x{arr.shape[2]} does not match "
                f"grid {grid.rows}x{grid.cols}"
            )
        if per_anchor is not None and arr.shape[0] != per_anchor * t:
            raise ValueError(f"{name} has {arr.shape[0]} channels, expected {per_anchor * t}")
        if arr.shape[0] % t:
            raise ValueError(f"{name} channel count {arr.shape[0]} is not a multiple of T={t}")
        heads[name] = flatten_per_anchor(arr, t)

    obj_prob = _softmax_rows(heads["objectness"])[:, 1]
    keep = np.flatnonzero(obj_prob >= score_threshold)
    if keep.size == 0:
        return []
    order = np.lexsort((keep, -obj_prob[keep]))
    keep = keep[order]

    boxes = decode_array(grid.boxes[keep], heads["box_deltas"][keep])
    cls_prob = _softmax_rows(heads["class_scores"][keep])
    cls_ids = cls_prob.argmax(axis=1)
    detections = []
    for row, anchor_idx in enumerate(keep):
        x0, y0, x1, y1 = boxes[row]
        detections.append(
            Detection(
                bbox=BBox(float(x0), float(y0), float(x1), float(y1)),
                class_id=int(cls_ids[row]),
                objectness=float(obj_prob[anchor_idx]),
                class_score=float(cls_prob[row, cls_ids[row]]),
                embedding=heads["embeddings"][anchor_idx].copy(),
            )
        )
    return detections


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Detections are visited in descending objectness (stable on ties); keeping
    one suppresses all later detections of the same class with IoU strictly
    above the threshold. Classes do not suppress each other.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].objectness)
    boxes = np.stack([dets[i].bbox.as_array() for i in order])
    classes = np.array([dets[i].class_id for i in order])
    suppressed = np.zeros(len(order), dtype=bool)
    kept: list[Detection] = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        kept.append(dets[order[pos]])
        later = np.arange(pos + 1, len(order))
        later = later[(~suppressed[later]) & (classes[later] == classes[pos])]
        if later.size:
            overlaps = iou_matrix(boxes[later], boxes[pos : pos + 1])[:, 0]
            suppressed[later[overlaps > iou_threshold]] = True
    return kept


def detections_to_jsonl(items: Sequence[tuple[str, Detection]]) -> str:
    """Serialize (image_id, detection) pairs, one JSON object per line."""
    lines = []
    for image_id, det in items:
        record = {
            "image_id": image_id,
            "class": det.class_id,
            "score": det.objectness,
            "x_min": det.bbox.x_min,
            "y_min": det.bbox.y_min,
            "x_max": det.bbox.x_max,
            "y_max": det.bbox.y_max,
            "embedding": [] if det.embedding is None else [float(v) for v in det.embedding],
        }
        lines.append(json.dumps(record))
    return "\n".join(lines) + ("\n" if lines else "")


def detections_from_jsonl(text: str) -> dict[str, list[Detection]]:
    """Parse the JSON-lines detection format, grouped by image id."""
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            det = Detection(
                bbox=BBox(float(record["x_min"]), float(record["y_min"]),
                          float(record["x_max"]), float(record["y_max"])),
                class_id=int(record["class"]),
                objectness=float(record["score"]),
                embedding=np.asarray(record.get("embedding", []), dtype=np.float64),
            )
            image_id = str(record["image_id"])
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed detection on line {lineno}: {exc}") from exc
        out.setdefault(image_id, []).append(det)
    return out
