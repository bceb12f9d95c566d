"""Mining region-text pseudo-labels from captions.

Captions yield noun phrases; a detector proposes a region per noun; a
scorer rates caption-image and noun-region relevance; fused scores then
pass per-noun NMS, a region confidence floor, and a whole-image filter.
Everything here is deterministic: a fixture detector and the toy cosine
scorer stand in for the real models.
"""

from ovdet.autolabel import (
    CaptionSample,
    FixtureDetector,
    PipelineConfig,
    ToyCosineScorer,
    extract_nouns,
    run_pipeline,
)

# --- noun extraction --------------------------------------------------------
caption = "a dog running in the park"
print(f"{caption!r} -> {extract_nouns(caption)}")

# --- a tiny captioned dataset ------------------------------------------------
samples = [
    CaptionSample("street_04", "a dog chasing a ball"),
    CaptionSample("street_07", "two cars near the crosswalk"),
    CaptionSample("street_11", "of the and in"),  # nothing extractable
]
# table keys must match the extracted phrases: "a dog chasing a ball"
# yields "dog chasing" and "ball", not the bare "dog"
detector = FixtureDetector({
    "street_04": {
        "dog chasing": [[12, 20, 64, 80, 0.9], [14, 22, 66, 82, 0.85]],
        "ball": [[70, 60, 86, 76, 0.7]],
    },
    "street_07": {
        "two cars": [[5, 30, 60, 70, 0.8]],
        "crosswalk": [[0, 70, 96, 96, 0.6]],
    },
})
scorer = ToyCosineScorer(dim=32, seed=0)

outcomes, report = run_pipeline(samples, detector, scorer, PipelineConfig())

# --- what happened -----------------------------------------------------------
for out in outcomes:
    line = f"{out.image_id}: {out.status}"
    if out.status == "error":
        line += f" at {out.stage} ({out.error})"
    else:
        line += (f"  score {out.final_score:.3f}  "
                 f"{out.proposals_in} proposals -> {out.after_confidence} kept")
    print(line)
    for ann in out.annotations:
        print(f"    {ann['text']:<10} box {ann['box']}")

print("\nreport:", {k: report[k] for k in
                    ("images_kept", "images_dropped", "images_errored")})
print("stage drops:", report["stage_drops"])
