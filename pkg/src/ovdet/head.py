"""Detection head: box regression, text-similarity classification, NMS.

The head is anchor-free: every pyramid cell contributes one prediction at
its center.  Boxes are regressed as discrete distributions over ``n_bins``
per side (left, top, right, bottom distances in stride units); class scores
come from comparing projected region embeddings against text embeddings
with a learnable scale and shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, InputError
from .fusion import PYRAMID_LEVELS, FeaturePyramid
from .tensorops import (
    as_tensor,
    check_finite,
    l2_normalize,
    sigmoid,
    softmax_lastdim,
    tensor_from_json,
    tensor_to_json,
)
from .textembed import TextEmbeddings


@dataclass(frozen=True)
class HeadParams:
    """Per-level linear projections for embeddings and box distributions,
    plus the two global scalars of the similarity head (init 1 and 0)."""

    dim: int
    n_bins: int
    embed_w: Mapping[int, np.ndarray]  # level -> (D, D)
    embed_b: Mapping[int, np.ndarray]  # level -> (D,)
    box_w: Mapping[int, np.ndarray]    # level -> (D, 4 * n_bins)
    box_b: Mapping[int, np.ndarray]    # level -> (4 * n_bins,)
    scale: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise InputError(f"need at least 2 distance bins, got {self.n_bins}")
        if not (math.isfinite(self.scale) and math.isfinite(self.shift)):
            raise InputError("similarity scale and shift must be finite")
        d, nb = self.dim, self.n_bins
        for table, shape in (
            (self.embed_w, (d, d)),
            (self.embed_b, (d,)),
            (self.box_w, (d, 4 * nb)),
            (self.box_b, (4 * nb,)),
        ):
            if tuple(sorted(table)) != PYRAMID_LEVELS:
                raise InputError(f"head params must cover levels {PYRAMID_LEVELS}")
            for l in PYRAMID_LEVELS:
                if table[l].shape != shape:
                    raise DimensionError(
                        f"level {l} head weight has shape {table[l].shape}, want {shape}")

    @classmethod
    def random(cls, dim: int, n_bins: int = 16, seed: int = 0) -> "HeadParams":
        embed_w, embed_b, box_w, box_b = {}, {}, {}, {}
        for l in PYRAMID_LEVELS:
            rng = np.random.default_rng([seed, 303, l])
            embed_w[l] = rng.standard_normal((dim, dim)) / math.sqrt(dim)
            embed_b[l] = np.zeros(dim)
            box_w[l] = rng.standard_normal((dim, 4 * n_bins)) / math.sqrt(dim)
            box_b[l] = np.zeros(4 * n_bins)
        return cls(dim, n_bins, embed_w, embed_b, box_w, box_b)

    def to_json(self) -> dict:
        out = {"dim": self.dim, "n_bins": self.n_bins,
               "scale": self.scale, "shift": self.shift, "levels": {}}
        for l in PYRAMID_LEVELS:
            out["levels"][str(l)] = {
                "embed_w": tensor_to_json(self.embed_w[l]),
                "embed_b": tensor_to_json(self.embed_b[l]),
                "box_w": tensor_to_json(self.box_w[l]),
                "box_b": tensor_to_json(self.box_b[l]),
            }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "HeadParams":
        tables: dict[str, dict[int, np.ndarray]] = {
            "embed_w": {}, "embed_b": {}, "box_w": {}, "box_b": {}}
        for key, spec in obj["levels"].items():
            for name in tables:
                tables[name][int(key)] = tensor_from_json(spec[name])
        return cls(obj["dim"], obj["n_bins"],
                   scale=float(obj.get("scale", 1.0)),
                   shift=float(obj.get("shift", 0.0)), **tables)


@dataclass(frozen=True)
class HeadOutput:
    """Flat per-anchor predictions, levels 3, 4, 5 concatenated row-major."""

    boxes: np.ndarray          # (K, 4) decoded x1, y1, x2, y2 in pixels
    embeddings: np.ndarray     # (K, D)
    box_dist: np.ndarray       # (K, 4, n_bins) raw logits
    anchor_points: np.ndarray  # (K, 2) cell centers (cx, cy) in pixels
    strides: np.ndarray        # (K,)
    image_size: tuple[int, int]  # (height, width)


def anchor_grid(pyramid: FeaturePyramid) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center anchor points and their strides, levels 3, 4, 5 row-major."""
    points, strides = [], []
    for l in PYRAMID_LEVELS:
        h, w = pyramid.level(l).shape[:2]
        s = float(2 ** l)
        cx, cy = np.meshgrid((np.arange(w) + 0.5) * s, (np.arange(h) + 0.5) * s)
        points.append(np.stack([cx.ravel(), cy.ravel()], axis=1))
        strides.append(np.full(h * w, s))
    return np.concatenate(points), np.concatenate(strides)


def decode_boxes(
    box_dist: np.ndarray,
    anchor_points: np.ndarray,
    strides: np.ndarray,
    image_size: tuple[int, int],
) -> np.ndarray:
    """Turn per-side bin logits into clipped corner boxes.

    Each side distance is the softmax expectation over bin indices, scaled
    by the anchor's stride; corners are the anchor center minus the
    left/top and plus the right/bottom distances, clipped to the image.
    """
    box_dist = as_tensor(box_dist)
    if box_dist.ndim != 3 or box_dist.shape[1] != 4:
        raise DimensionError(f"box distributions must be (K, 4, n_bins), got {box_dist.shape}")
    n_bins = box_dist.shape[2]
    offsets = softmax_lastdim(box_dist) @ np.arange(n_bins, dtype=float)
    offsets *= strides[:, None]
    cx, cy = anchor_points[:, 0], anchor_points[:, 1]
    height, width = image_size
    x1 = np.clip(cx - offsets[:, 0], 0.0, width)
    y1 = np.clip(cy - offsets[:, 1], 0.0, height)
    x2 = np.clip(cx + offsets[:, 2], 0.0, width)
    y2 = np.clip(cy + offsets[:, 3], 0.0, height)
    return np.stack([x1, y1, x2, y2], axis=1)


def head_forward(pyramid: FeaturePyramid, params: HeadParams) -> HeadOutput:
    """Project every pyramid cell to a region embedding and a box."""
    if pyramid.dim != params.dim:
        raise DimensionError(
            f"pyramid channel dim {pyramid.dim} != head dim {params.dim}")
    embeddings, dists = [], []
    for l in PYRAMID_LEVELS:
        feats = pyramid.level(l).reshape(-1, params.dim)
        embeddings.append(feats @ params.embed_w[l] + params.embed_b[l])
        dists.append(feats @ params.box_w[l] + params.box_b[l])
    embeddings = np.concatenate(embeddings)
    box_dist = np.concatenate(dists).reshape(-1, 4, params.n_bins)
    anchor_points, strides = anchor_grid(pyramid)
    h3, w3 = pyramid.level(3).shape[:2]
    image_size = (h3 * 8, w3 * 8)
    boxes = decode_boxes(box_dist, anchor_points, strides, image_size)
    return HeadOutput(
        boxes=check_finite(boxes, "decoded boxes"),
        embeddings=check_finite(embeddings, "region embeddings"),
        box_dist=box_dist,
        anchor_points=anchor_points,
        strides=strides,
        image_size=image_size,
    )


@dataclass(frozen=True)
class SimilarityMatrix:
    """Region-text scores: scale * cosine + shift, entries in
    [shift - scale, shift + scale] for non-negative scale."""

    values: np.ndarray  # (K, C)
    scale: float
    shift: float


def contrastive_similarity(
    embeddings: np.ndarray,
    text: TextEmbeddings | np.ndarray,
    scale: float = 1.0,
    shift: float = 0.0,
) -> SimilarityMatrix:
    """Score every region embedding against every text embedding.

    Both sides are L2-normalized, so the raw product is a cosine; it is
    clipped to [-1, 1] before the affine map to keep the stated range exact
    against rounding.
    """
    embeddings = as_tensor(embeddings)
    w = text.matrix if isinstance(text, TextEmbeddings) else as_tensor(text)
    if embeddings.ndim != 2 or w.ndim != 2:
        raise DimensionError("expected (K, D) regions and (C, D) text")
    if embeddings.shape[1] != w.shape[1]:
        raise DimensionError(
            f"embedding dims differ: {embeddings.shape[1]} vs {w.shape[1]}")
    if not (math.isfinite(scale) and math.isfinite(shift)):
        raise InputError("scale and shift must be finite")
    cos = np.clip(l2_normalize(embeddings) @ l2_normalize(w).T, -1.0, 1.0)
    return SimilarityMatrix(values=scale * cos + shift, scale=scale, shift=shift)


def validate_box(box: Sequence[float]) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    if box.shape != (4,):
        raise InputError(f"box must have 4 coordinates, got shape {box.shape}")
    if not np.all(np.isfinite(box)):
        raise InputError("box coordinates must be finite")
    x1, y1, x2, y2 = box
    if x1 >= x2 or y1 >= y2:
        raise InputError(f"malformed box {box.tolist()}: need x1 < x2 and y1 < y2")
    return box


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner boxes."""
    a = validate_box(a)
    b = validate_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner boxes."""
    a = as_tensor(a).reshape(-1, 4)
    b = as_tensor(b).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(
    detections: Sequence[tuple],
    iou_thresh: float = 0.5,
) -> list[int]:
    """Greedy per-text non-maximum suppression.

    ``detections`` holds (box, text, score) triples; suppression only runs
    within a text group, so boxes for different texts never suppress each
    other.  Returns kept input indices ordered by descending score, ties
    broken by ascending input index.
    """
    if not (0.0 <= iou_thresh <= 1.0):
        raise InputError(f"iou threshold must be in [0, 1], got {iou_thresh}")
    boxes, texts, scores = [], [], []
    for i, (box, text, score) in enumerate(detections):
        boxes.append(validate_box(box))
        texts.append(text)
        score = float(score)
        if not math.isfinite(score):
            raise InputError(f"detection {i} has non-finite score")
        scores.append(score)

    kept: list[int] = []
    groups: dict = {}
    for i, t in enumerate(texts):
        groups.setdefault(t, []).append(i)
    for members in groups.values():
        # descending score, ascending index on ties
        order = sorted(members, key=lambda i: (-scores[i], i))
        alive = []
        for i in order:
            if all(box_iou(boxes[i], boxes[j]) <= iou_thresh for j in alive):
                alive.append(i)
        kept.extend(alive)
    return sorted(kept, key=lambda i: (-scores[i], i))


def detect(
    head_out: HeadOutput,
    text: TextEmbeddings | np.ndarray,
    nouns: Sequence[str] | None = None,
    scale: float = 1.0,
    shift: float = 0.0,
    score_thresh: float = 0.3,
    iou_thresh: float = 0.5,
    max_detections: int = 100,
) -> list[dict]:
    """Prompt-then-detect: sigmoid-score every (anchor, text) pair, keep
    pairs above the floor, suppress per text, and cap the detection count.

    ``text`` may be a raw matrix (e.g. the fusion pass's updated one), in
    which case ``nouns`` supplies the row names.
    """
    if max_detections < 1:
        raise InputError("max_detections must be positive")
    if isinstance(text, TextEmbeddings):
        matrix, names = text.matrix, text.nouns
    else:
        if nouns is None:
            raise InputError("a raw text matrix needs an explicit noun list")
        matrix, names = text, tuple(nouns)
    if len(names) != matrix.shape[0]:
        raise DimensionError(
            f"{len(names)} nouns do not match {matrix.shape[0]} text rows")
    sim = contrastive_similarity(head_out.embeddings, matrix, scale, shift)
    probs = sigmoid(sim.values)
    anchors, cols = np.nonzero(probs > score_thresh)
    candidates = [
        (head_out.boxes[k], names[j], float(probs[k, j]))
        for k, j in zip(anchors, cols)
    ]
    kept = nms(candidates, iou_thresh)[:max_detections]
    return [
        {
            "box": [float(v) for v in candidates[i][0]],
            "text": candidates[i][1],
            "score": candidates[i][2],
        }
        for i in kept
    ]
