"""Region-text ground truth and task-aligned anchor assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError
from .head import SimilarityMatrix, iou_matrix, validate_box
from .tensorops import as_tensor, sigmoid

DATA_SOURCES = ("detection", "grounding", "image-text")


@dataclass(frozen=True)
class RegionTextAnnotation:
    """One ground-truth region: a box paired with a vocabulary index.

    ``box_accurate`` marks whether the box is tight enough to regress
    against; pseudo-labels mined from captions typically are not.
    """

    box: tuple[float, float, float, float]
    text_index: int
    box_accurate: bool = True

    def __post_init__(self):
        validated = tuple(float(v) for v in validate_box(self.box))
        object.__setattr__(self, "box", validated)
        if self.text_index < 0:
            raise InputError(f"text index must be non-negative, got {self.text_index}")


@dataclass(frozen=True)
class GroundTruth:
    """All annotations of one sample plus the data source they came from."""

    annotations: tuple[RegionTextAnnotation, ...]
    source: str = "detection"

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.source not in DATA_SOURCES:
            raise InputError(
                f"unknown data source {self.source!r}, expected one of {DATA_SOURCES}")


@dataclass(frozen=True)
class Assignment:
    """Per-anchor assignment: ground-truth index and text index, -1 = negative."""

    gt_index: np.ndarray
    text_index: np.ndarray

    def __post_init__(self):
        gt = np.asarray(self.gt_index, dtype=int)
        tx = np.asarray(self.text_index, dtype=int)
        if gt.shape != tx.shape or gt.ndim != 1:
            raise DimensionError("assignment index arrays must be equal-length 1-d")
        if not np.array_equal(gt >= 0, tx >= 0):
            raise InputError("gt and text indices must be negative on the same anchors")
        object.__setattr__(self, "gt_index", gt)
        object.__setattr__(self, "text_index", tx)

    @property
    def positive_mask(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive_mask.sum())


def task_aligned_assign(
    sim: SimilarityMatrix,
    pred_boxes: np.ndarray,
    anchor_points: np.ndarray,
    gt: GroundTruth,
    k_top: int = 10,
    score_power: float = 1.0,
    iou_power: float = 6.0,
) -> Assignment:
    """Match anchors to ground-truth regions by an alignment metric.

    For each region, candidate anchors are those whose center lies strictly
    inside its box.  Candidates are ranked by
    sigmoid(similarity to the region's text) ** score_power * IoU ** iou_power
    and the best ``k_top`` become positives.  An anchor claimed by several
    regions goes to the one with the larger metric; exact ties go to the
    earlier region.
    """
    values = as_tensor(sim.values)
    pred_boxes = as_tensor(pred_boxes)
    anchor_points = as_tensor(anchor_points)
    n_anchors, n_texts = values.shape
    if pred_boxes.shape != (n_anchors, 4) or anchor_points.shape != (n_anchors, 2):
        raise DimensionError("predictions and anchors must match the similarity rows")
    if k_top < 1:
        raise InputError(f"k_top must be positive, got {k_top}")

    gt_index = np.full(n_anchors, -1, dtype=int)
    text_index = np.full(n_anchors, -1, dtype=int)
    if not gt.annotations:
        return Assignment(gt_index, text_index)
    for a in gt.annotations:
        if a.text_index >= n_texts:
            raise InputError(
                f"annotation text index {a.text_index} outside vocabulary of {n_texts}")

    gt_boxes = np.array([a.box for a in gt.annotations])
    ious = iou_matrix(gt_boxes, pred_boxes)           # (N, K)
    cx, cy = anchor_points[:, 0], anchor_points[:, 1]
    inside = (
        (gt_boxes[:, None, 0] < cx) & (cx < gt_boxes[:, None, 2])
        & (gt_boxes[:, None, 1] < cy) & (cy < gt_boxes[:, None, 3])
    )                                                 # (N, K)
    text_cols = np.array([a.text_index for a in gt.annotations])
    scores = sigmoid(values[:, text_cols].T)          # (N, K)
    metric = np.where(inside, scores ** score_power * ious ** iou_power, -np.inf)

    best_metric = np.full(n_anchors, -math.inf)
    for n in range(len(gt.annotations)):
        # stable sort: descending metric, ties by ascending anchor index
        order = np.argsort(-metric[n], kind="stable")
        for k in order[:k_top]:
            m = metric[n, k]
            if m == -math.inf:
                break
            # strict improvement required, so earlier regions win exact ties
            if m > best_metric[k]:
                best_metric[k] = m
                gt_index[k] = n
                text_index[k] = gt.annotations[n].text_index
    return Assignment(gt_index, text_index)
