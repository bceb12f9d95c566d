"""One fusion forward pass, narrated.

A toy backbone turns an image into a three-level feature pyramid; the
fusion network then runs top-down and bottom-up merges whose cross-stage
layers gate image features against the text matrix, and updates the text
matrix once by attending over 27 pooled image tokens.
"""

import numpy as np

from ovdet.fusion import pool_image_tokens, repvlpan_forward, toy_backbone, FusionParams
from ovdet.textembed import toy_encode

rng = np.random.default_rng(3)

# --- image -> pyramid ----------------------------------------------------
image = rng.uniform(0.0, 1.0, size=(96, 96, 3))
pyramid = toy_backbone(image, seed=0, dim=32)
for level in (3, 4, 5):
    print(f"level {level}: {pyramid.level(level).shape}")

# --- text + params -------------------------------------------------------
emb = toy_encode(["dog", "cat", "frisbee"], dim=32, seed=0)
params = FusionParams.random(32, heads=4, seed=0)

# --- fused forward with a trace -----------------------------------------
trace = {}
fused, text_updated = repvlpan_forward(pyramid, emb, params, trace=trace)
print("\ncross-stage layers visited:", [site["layer"] for site in trace["tcsp"]])
print("fused level 3 shape:", fused.level(3).shape)

# the text matrix moves once, after the top-down pass
delta = np.abs(text_updated - emb.matrix).max()
print(f"text update: max |delta| = {delta:.4f} over {emb.count} rows")

# --- the 27 pooled tokens ------------------------------------------------
tokens = pool_image_tokens(trace["mid_pyramid"])
print(f"\npooled image tokens: {tokens.shape[0]} tokens of dim {tokens.shape[1]}")
print("(3 levels x a 3x3 max-pool grid each)")
