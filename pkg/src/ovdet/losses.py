"""Training losses: region-text contrastive, IoU, and distributed box loss.

The total is gated by the data source: samples that only carry image-level
text (mined pseudo-labels) contribute no box losses at all, and the gate is
implemented as a branch rather than a multiply so the gated total is
bit-identical to the contrastive term alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assign import Assignment, GroundTruth
from .errors import DimensionError, InputError
from .head import SimilarityMatrix, validate_box
from .tensorops import as_tensor


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    iou: float
    dfl: float
    box_weight: int  # 1 when the source provides boxes, else 0
    total: float


def _log_softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def contrastive_loss(
    sim: SimilarityMatrix | np.ndarray, assignment: Assignment
) -> float:
    """Mean cross-entropy of each positive anchor's text over the vocabulary.

    Negatives do not contribute; with no positive anchors the loss is 0.
    """
    values = sim.values if isinstance(sim, SimilarityMatrix) else as_tensor(sim)
    if values.ndim != 2:
        raise DimensionError(f"similarity values must be (K, C), got {values.shape}")
    if len(assignment.gt_index) != values.shape[0]:
        raise DimensionError("assignment length must match similarity rows")
    positives = np.nonzero(assignment.positive_mask)[0]
    if len(positives) == 0:
        return 0.0
    targets = assignment.text_index[positives]
    if targets.max() >= values.shape[1]:
        raise InputError("assigned text index outside the vocabulary")
    log_probs = _log_softmax(values[positives])
    return float(-log_probs[np.arange(len(positives)), targets].mean())


def iou_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """1 - IoU, computed as (union - intersection) / union.

    This form keeps clean fractions exact: a half-overlapping unit square
    pair gives exactly 2/3.
    """
    pred = validate_box(pred)
    gt = validate_box(gt)
    iw = min(pred[2], gt[2]) - max(pred[0], gt[0])
    ih = min(pred[3], gt[3]) - max(pred[1], gt[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_p = (pred[2] - pred[0]) * (pred[3] - pred[1])
    area_g = (gt[2] - gt[0]) * (gt[3] - gt[1])
    union = area_p + area_g - inter
    return float((union - inter) / union)


def dfl_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Distributed focal box loss for one anchor.

    Each side's fractional target distance y is split between its two
    neighboring integer bins: cross-entropy against bin floor(y) with
    weight ceil(y) - y and bin floor(y) + 1 with weight y - floor(y).
    Zero-weight terms are skipped, so an integer target scored against a
    point distribution on that bin costs exactly 0.
    """
    logits = as_tensor(logits)
    targets = as_tensor(targets)
    if logits.ndim != 2 or logits.shape[0] != 4 or targets.shape != (4,):
        raise DimensionError(
            f"expected (4, n_bins) logits and (4,) targets, got {logits.shape} "
            f"and {targets.shape}")
    n_bins = logits.shape[1]
    if np.any(targets < 0) or np.any(targets >= n_bins - 1):
        raise InputError(
            f"side targets must lie in [0, {n_bins - 1}), got {targets.tolist()}")
    log_probs = _log_softmax(logits)
    total = 0.0
    for side in range(4):
        y = targets[side]
        lo = int(math.floor(y))
        w_hi = y - lo
        w_lo = 1.0 - w_hi
        loss = -w_lo * log_probs[side, lo]
        if w_hi > 0.0:
            loss -= w_hi * log_probs[side, lo + 1]
        total += loss
    return float(total / 4.0)


def _side_targets(
    gt_box: tuple, anchor_point: np.ndarray, stride: float, n_bins: int
) -> np.ndarray:
    """Left/top/right/bottom distances in stride units, clamped to the
    representable bin range."""
    cx, cy = anchor_point
    x1, y1, x2, y2 = gt_box
    raw = np.array([cx - x1, cy - y1, x2 - cx, y2 - cy]) / stride
    return np.clip(raw, 0.0, n_bins - 1 - 1e-6)


def total_loss(
    sim: SimilarityMatrix,
    assignment: Assignment,
    pred_boxes: np.ndarray,
    box_dist: np.ndarray,
    anchor_points: np.ndarray,
    strides: np.ndarray,
    gt: GroundTruth,
) -> LossBreakdown:
    """Contrastive plus, for box-bearing sources, mean IoU and distribution
    losses over positives whose region has an accurate box."""
    con = contrastive_loss(sim, assignment)
    if gt.source == "image-text":
        return LossBreakdown(contrastive=con, iou=0.0, dfl=0.0, box_weight=0, total=con)

    pred_boxes = as_tensor(pred_boxes)
    box_dist = as_tensor(box_dist)
    n_bins = box_dist.shape[-1]
    iou_terms, dfl_terms = [], []
    for k in np.nonzero(assignment.positive_mask)[0]:
        ann = gt.annotations[assignment.gt_index[k]]
        if not ann.box_accurate:
            continue
        iou_terms.append(iou_loss(pred_boxes[k], ann.box))
        targets = _side_targets(ann.box, anchor_points[k], strides[k], n_bins)
        dfl_terms.append(dfl_loss(box_dist[k], targets))
    iou = float(np.mean(iou_terms)) if iou_terms else 0.0
    dfl = float(np.mean(dfl_terms)) if dfl_terms else 0.0
    return LossBreakdown(
        contrastive=con, iou=iou, dfl=dfl, box_weight=1, total=con + iou + dfl)
