"""A full training step's worth of math on a synthetic scene.

Run the model forward, match anchors to ground-truth regions with the
task-aligned assigner, and price the predictions: contrastive
classification everywhere, IoU and distribution losses only where the
data source actually carries trustworthy boxes.
"""

import numpy as np

from ovdet.assign import GroundTruth, RegionTextAnnotation, task_aligned_assign
from ovdet.fusion import FusionParams, repvlpan_forward, toy_backbone
from ovdet.head import HeadParams, contrastive_similarity, head_forward
from ovdet.losses import total_loss
from ovdet.textembed import toy_encode

# --- forward pass ---------------------------------------------------------
emb = toy_encode(["dog", "cat", "ball"], dim=32, seed=0)
image = np.random.default_rng(5).uniform(0.0, 1.0, size=(96, 96, 3))
pyramid = toy_backbone(image, seed=0, dim=32)
fused, text_updated = repvlpan_forward(
    pyramid, emb, FusionParams.random(32, heads=4, seed=0))
head_out = head_forward(fused, HeadParams.random(32, n_bins=16, seed=0))
sim = contrastive_similarity(head_out.embeddings, text_updated)

# --- ground truth and assignment -------------------------------------------
gt = GroundTruth((
    RegionTextAnnotation(box=(8.0, 8.0, 56.0, 56.0), text_index=0),
    RegionTextAnnotation(box=(48.0, 40.0, 92.0, 88.0), text_index=2),
))
assignment = task_aligned_assign(
    sim, head_out.boxes, head_out.anchor_points, gt, k_top=10)
print(f"anchors: {len(assignment.gt_index)}, "
      f"positives: {int(assignment.positive_mask.sum())}")
for region in (0, 1):
    count = int((assignment.gt_index == region).sum())
    print(f"  region {region} ({emb.nouns[gt.annotations[region].text_index]}): "
          f"{count} anchors")

# --- detection-source loss --------------------------------------------------
breakdown = total_loss(
    sim, assignment, head_out.boxes, head_out.box_dist,
    head_out.anchor_points, head_out.strides, gt)
print(f"\ndetection sample: contrastive {breakdown.contrastive:.4f}  "
      f"iou {breakdown.iou:.4f}  dfl {breakdown.dfl:.4f}  "
      f"total {breakdown.total:.4f}")

# --- the same scene labeled from captions ------------------------------------
# image-text pairs carry no trustworthy boxes, so only the contrastive
# term survives the gate
gt_weak = GroundTruth(gt.annotations, source="image-text")
weak = total_loss(
    sim, assignment, head_out.boxes, head_out.box_dist,
    head_out.anchor_points, head_out.strides, gt_weak)
print(f"image-text sample: contrastive {weak.contrastive:.4f}  "
      f"iou {weak.iou:.4f}  dfl {weak.dfl:.4f}  total {weak.total:.4f}")
print("gate holds:", weak.total == weak.contrastive)
