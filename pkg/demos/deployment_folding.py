"""Folding the text side away for deployment, and proving it safe.

With a fixed vocabulary the guide-projected text matrix of every
cross-stage layer becomes a bank of 1x1 conv kernels, and the text update
collapses to a projection-free attention over pooled tokens.  The verifier
replays fusion forwards and compares both routes site by site; a
deliberately corrupted kernel bank shows what failure looks like.
"""

from ovdet.fusion import FusionParams
from ovdet.reparam import build_bundle, verify_equivalence
from ovdet.textembed import toy_encode

emb = toy_encode(["person", "car", "dog", "cat", "chair"], dim=32, seed=0)
params = FusionParams.random(32, heads=4, seed=0)

# --- what the fold produces -----------------------------------------------
bundle = build_bundle(emb, params)
for layer, bank in sorted(bundle.folded.items()):
    print(f"layer {layer}: kernel bank {bank.shape}")
print(f"baked text matrix: {bundle.text.shape}")

# --- verify over random pyramids -------------------------------------------
report = verify_equivalence(params, emb, trials=25, tol=1e-6, seed=0)
print(f"\nverified over {report.trials} trials:")
for layer, dev in sorted(report.layers.items()):
    print(f"  {layer}: max rel {dev.max_rel:.3e}")
print(f"  pooled tokens bit-identical: {report.tokens_bit_identical}")
print(f"  text-update divergence (informational): "
      f"{report.text_update_divergence:.3e}")
print("verdict:", "PASS" if report.passed else "FAIL")

# --- and what a broken fold looks like ---------------------------------------
broken = verify_equivalence(params, emb, trials=5, seed=0, inject_fault="bu4")
print(f"\nwith a corrupted bu4 bank: "
      f"{'PASS' if broken.passed else 'FAIL'} "
      f"(bu4 max rel {broken.layers['bu4'].max_rel:.3e})")
