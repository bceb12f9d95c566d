"""Building vocabularies: per-batch online sampling and offline baking.

Training draws a small per-mosaic vocabulary (positives padded with
negative nouns), while deployment encodes the user's prompt list once and
bakes it to a file the detector loads with no text encoder in sight.
"""

import tempfile
from pathlib import Path

from ovdet.textembed import (
    bake_offline_vocabulary,
    build_online_vocabulary,
    load_embeddings,
    toy_encode,
)

# --- encode a handful of nouns ----------------------------------------
nouns = ["person", "bicycle", "car", "dog", "cat"]
emb = toy_encode(nouns, dim=32, seed=0)
print(f"encoded {emb.count} nouns at dim {emb.dim}")
print("row norms:", [round(float(n), 6) for n in (emb.matrix ** 2).sum(1) ** 0.5])

# --- online vocabulary for one mosaic sample ---------------------------
# the positives come from the sample's annotations; the rest of the
# 80-noun budget is filled with negatives drawn from a pool
positives = ["dog", "frisbee"]
negative_pool = [f"distractor {i}" for i in range(200)]
vocab = build_online_vocabulary(positives, negative_pool, m=80, seed=7)
print(f"\nonline vocabulary: {len(vocab.entries)} nouns, "
      f"positives first: {vocab.entries[:2]}")
print("sample negatives:", vocab.entries[2:5])

# --- bake for deployment ------------------------------------------------
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "vocab.json"
    bake_offline_vocabulary(emb, path)
    reloaded = load_embeddings(path)
    drift = abs(reloaded.matrix - emb.matrix).max()
    print(f"\nbaked to {path.name} and reloaded; max round-trip drift {drift:.2e}")
