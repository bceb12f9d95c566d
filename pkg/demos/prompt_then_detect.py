"""Prompt-then-detect, end to end on a seeded image.

The prompt list is encoded once into an offline vocabulary; detection then
needs only the image: backbone, fusion, head, similarity scoring against
the vocabulary, and per-text NMS.
"""

import numpy as np

from ovdet.fusion import FusionParams, repvlpan_forward, toy_backbone
from ovdet.head import HeadParams, detect, head_forward
from ovdet.textembed import toy_encode

# --- the user's prompt becomes the vocabulary ----------------------------
prompts = ["person", "dog", "frisbee", "traffic cone"]
emb = toy_encode(prompts, dim=32, seed=0)

fusion_params = FusionParams.random(32, heads=4, seed=0)
head_params = HeadParams.random(32, n_bins=16, seed=0)

# --- detect on a seeded image --------------------------------------------
image = np.random.default_rng(42).uniform(0.0, 1.0, size=(96, 96, 3))
pyramid = toy_backbone(image, seed=0, dim=32)
fused, text_updated = repvlpan_forward(pyramid, emb, fusion_params)
head_out = head_forward(fused, head_params)
print(f"anchors: {head_out.anchor_points.shape[0]} across 3 levels, "
      f"image {head_out.image_size}")

detections = detect(
    head_out,
    text_updated,
    emb.nouns,
    scale=head_params.scale,
    shift=head_params.shift,
    score_thresh=0.3,
    iou_thresh=0.5,
    max_detections=8,
)
print(f"\ntop {len(detections)} detections:")
for det in detections:
    x1, y1, x2, y2 = det["box"]
    print(f"  {det['text']:<13} {det['score']:.3f}  "
          f"[{x1:6.1f}, {y1:6.1f}, {x2:6.1f}, {y2:6.1f}]")
