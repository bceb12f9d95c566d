"""Pseudo-label mining from image-caption pairs.

An image-text corpus turns into region-text annotations in six steps per
sample: score the caption against the image, score each proposed region
against its noun, optionally relabel each region with the best-matching
noun, fuse detector confidence with the region score, filter regions by
per-noun NMS plus a confidence floor, then keep or drop the whole image by
fusing its caption score with the mean region score.

The region proposer and the region-text scorer are injected behind small
interfaces; the package ships deterministic fixture-backed implementations
and a toy cosine scorer so the pipeline runs hermetically.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .errors import InputError, LoadError, OvdetError, PipelineError
from .head import nms, validate_box
from .util import worker_count

# Closed-class words skipped during noun extraction.  Deliberately small
# and deterministic; a real tagger is out of scope.
STOPWORDS = frozenset("""
    a an the and or but if then than as of in on at by for with from to into
    onto over under above below up down out off near through across behind
    beyond between around before after during within without is are was were
    be been being am do does did done doing have has had having it its this
    that these those there here he she they them his her hers their theirs we
    you i me my mine your yours our ours us not no nor so too very can could
    will would shall should may might must
""".split())

MAX_PHRASE_WORDS = 3
NMS_IOU_THRESH = 0.5
REGION_CONF_THRESH = 0.3
IMAGE_SCORE_THRESH = 0.3


@dataclass(frozen=True)
class CaptionSample:
    """One image-caption pair awaiting labeling."""

    image_id: str
    caption: str

    def __post_init__(self):
        if not self.image_id:
            raise InputError("sample needs a nonempty image id")
        if not self.caption or not self.caption.strip():
            raise InputError(f"sample {self.image_id!r} has an empty caption")


@dataclass
class RegionProposal:
    """A proposed region with the scores it accumulates along the pipeline."""

    box: tuple[float, float, float, float]
    text: str
    confidence: float                  # proposer confidence c
    region_score: float | None = None  # text-region similarity
    rescored: float | None = None      # sqrt(confidence * region_score)

    def __post_init__(self):
        self.box = tuple(float(v) for v in validate_box(self.box))
        if not self.text:
            raise InputError("proposal text must be nonempty")
        self.confidence = _check_unit_score(self.confidence, "proposal confidence")


def _check_unit_score(value, what: str) -> float:
    value = float(value)
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise InputError(f"{what} must lie in [0, 1], got {value}")
    return value


class Detector(Protocol):
    def propose(self, image_id: str, nouns: Sequence[str]) -> list[RegionProposal]: ...


class Scorer(Protocol):
    def image_score(self, image_id: str, caption: str) -> float: ...

    def region_score(self, image_id: str, text: str) -> float: ...


def extract_nouns(caption: str) -> list[str]:
    """Pull candidate noun phrases out of a caption.

    The caption is lowercased and split on non-alphanumeric characters;
    stopwords are dropped; each maximal run of surviving words is chunked
    left to right into phrases of at most three words; duplicates keep
    their first occurrence.
    """
    if not caption or not caption.strip():
        raise InputError("caption is empty")
    words = [t for t in re.split(r"[^0-9a-z]+", caption.lower()) if t]
    runs: list[list[str]] = []
    current: list[str] = []
    for word in words:
        if word in STOPWORDS:
            if current:
                runs.append(current)
                current = []
        else:
            current.append(word)
    if current:
        runs.append(current)
    phrases: list[str] = []
    for run in runs:
        for i in range(0, len(run), MAX_PHRASE_WORDS):
            phrases.append(" ".join(run[i:i + MAX_PHRASE_WORDS]))
    return list(dict.fromkeys(phrases))


def propose_regions(
    sample: CaptionSample, nouns: Sequence[str], detector: Detector
) -> list[RegionProposal]:
    """Ask the detector for regions and validate everything it returns."""
    if not nouns:
        raise InputError(f"sample {sample.image_id!r}: no nouns to propose regions for")
    proposals = detector.propose(sample.image_id, list(nouns))
    allowed = set(nouns)
    for i, p in enumerate(proposals):
        if not isinstance(p, RegionProposal):
            raise PipelineError(f"proposal {i} is not a RegionProposal")
        if p.text not in allowed:
            raise PipelineError(
                f"proposal {i} is labeled {p.text!r}, which was never requested")
    return proposals


def relabel_choice(noun_scores: dict[str, float]) -> str:
    """Best-scoring noun; exact ties keep the earliest entry."""
    if not noun_scores:
        raise InputError("cannot relabel with no noun scores")
    best, best_score = None, -math.inf
    for noun, score in noun_scores.items():
        if score > best_score:
            best, best_score = noun, score
    return best


def rescore(confidence: float, region_score: float) -> float:
    """Fuse proposer confidence with the region-text score: geometric mean."""
    c = _check_unit_score(confidence, "confidence")
    s = _check_unit_score(region_score, "region score")
    return math.sqrt(c * s)


def _region_filter_stats(
    proposals: Sequence[RegionProposal], nms_thresh: float, conf_thresh: float
) -> tuple[list[RegionProposal], int]:
    for i, p in enumerate(proposals):
        if p.rescored is None:
            raise PipelineError(f"proposal {i} reached region_filter without a fused score")
    kept_nms = set(nms([(p.box, p.text, p.rescored) for p in proposals], nms_thresh))
    survivors = [
        p for i, p in enumerate(proposals)
        if i in kept_nms and p.rescored > conf_thresh
    ]
    return survivors, len(kept_nms)


def region_filter(
    proposals: Sequence[RegionProposal],
    nms_thresh: float = NMS_IOU_THRESH,
    conf_thresh: float = REGION_CONF_THRESH,
) -> list[RegionProposal]:
    """Per-noun NMS on the fused scores, then a strict confidence floor.

    Survivors come back in their input order.
    """
    return _region_filter_stats(proposals, nms_thresh, conf_thresh)[0]


@dataclass(frozen=True)
class ImageDecision:
    keep: bool
    score: float         # fused image score s
    region_score: float  # mean fused score of surviving regions


def image_filter(
    image_score: float,
    kept_scores: Sequence[float],
    thresh: float = IMAGE_SCORE_THRESH,
) -> ImageDecision:
    """Keep the image iff sqrt(caption score * mean kept region score)
    strictly exceeds the threshold; no surviving regions means score 0."""
    s_img = _check_unit_score(image_score, "image score")
    if kept_scores:
        s_region = sum(kept_scores) / len(kept_scores)
    else:
        s_region = 0.0
    s = math.sqrt(s_img * s_region)
    return ImageDecision(keep=s > thresh, score=s, region_score=s_region)


@dataclass(frozen=True)
class PipelineConfig:
    nms_thresh: float = NMS_IOU_THRESH
    conf_thresh: float = REGION_CONF_THRESH
    img_thresh: float = IMAGE_SCORE_THRESH
    relabel: bool = False
    box_accurate: bool = False  # pseudo-boxes are loose unless stated otherwise
    seed: int = 0  # reserved for stochastic providers; the shipped ones ignore it

    def __post_init__(self):
        for name in ("nms_thresh", "conf_thresh", "img_thresh"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise InputError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class SampleOutcome:
    image_id: str
    status: str                      # kept | dropped | error
    stage: str | None = None         # stage that errored
    error: str | None = None
    image_score: float | None = None
    region_score: float | None = None
    final_score: float | None = None
    proposals_in: int = 0
    after_nms: int = 0
    after_confidence: int = 0
    annotations: list = field(default_factory=list)


def _process_sample(
    sample: CaptionSample,
    detector: Detector,
    scorer: Scorer,
    config: PipelineConfig,
) -> SampleOutcome:
    stage = "extract"
    try:
        nouns = extract_nouns(sample.caption)
        stage = "propose"
        proposals = propose_regions(sample, nouns, detector)
        stage = "image_score"
        s_img = _check_unit_score(
            scorer.image_score(sample.image_id, sample.caption), "image score")
        stage = "region_score"
        noun_scores = {
            noun: _check_unit_score(
                scorer.region_score(sample.image_id, noun), f"region score for {noun!r}")
            for noun in nouns
        }
        for p in proposals:
            p.region_score = noun_scores[p.text]
        if config.relabel:
            stage = "relabel"
            winner = relabel_choice(noun_scores) if proposals else None
            for p in proposals:
                p.text = winner
                p.region_score = noun_scores[winner]
        stage = "rescore"
        for p in proposals:
            p.rescored = rescore(p.confidence, p.region_score)
        stage = "region_filter"
        survivors, after_nms = _region_filter_stats(
            proposals, config.nms_thresh, config.conf_thresh)
        stage = "image_filter"
        decision = image_filter(
            s_img, [p.rescored for p in survivors], config.img_thresh)
    except OvdetError as exc:
        return SampleOutcome(
            image_id=sample.image_id, status="error", stage=stage, error=str(exc))

    outcome = SampleOutcome(
        image_id=sample.image_id,
        status="kept" if decision.keep else "dropped",
        image_score=s_img,
        region_score=decision.region_score,
        final_score=decision.score,
        proposals_in=len(proposals),
        after_nms=after_nms,
        after_confidence=len(survivors),
    )
    if decision.keep:
        outcome.annotations = [
            {
                "box": list(p.box),
                "text": p.text,
                "box_accurate": config.box_accurate,
            }
            for p in survivors
        ]
    return outcome


def run_pipeline(
    samples: Sequence[CaptionSample],
    detector: Detector,
    scorer: Scorer,
    config: PipelineConfig | None = None,
) -> tuple[list[SampleOutcome], dict]:
    """Label a batch of caption samples; returns per-sample outcomes in
    input order plus a reconciling report.

    Samples are independent, so the batch fans out over worker threads
    when the environment requests them; results merge back in input
    order either way.
    """
    config = config or PipelineConfig()
    threads = worker_count()

    def process(sample: CaptionSample) -> SampleOutcome:
        return _process_sample(sample, detector, scorer, config)

    if threads == 1:
        outcomes = [process(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(process, samples))

    # note: worker count is deliberately absent from the report, so runs
    # with different thread settings stay byte-identical
    report = {
        "images_in": len(outcomes),
        "images_kept": 0,
        "images_dropped": 0,
        "images_errored": 0,
        "proposals_in": 0,
        "proposals_kept": 0,
        "stage_drops": {"nms": 0, "confidence": 0, "image_filter": 0},
        "errors": [],
    }
    drops = report["stage_drops"]
    for out in outcomes:
        if out.status == "error":
            report["images_errored"] += 1
            report["errors"].append(
                {"image_id": out.image_id, "stage": out.stage, "message": out.error})
            continue
        report["proposals_in"] += out.proposals_in
        drops["nms"] += out.proposals_in - out.after_nms
        drops["confidence"] += out.after_nms - out.after_confidence
        if out.status == "kept":
            report["images_kept"] += 1
            report["proposals_kept"] += out.after_confidence
        else:
            report["images_dropped"] += 1
            drops["image_filter"] += out.after_confidence
    return outcomes, report


def annotations_payload(outcomes: Sequence[SampleOutcome]) -> list[dict]:
    """Annotation objects for the kept samples, in input order."""
    return [
        {
            "image_id": out.image_id,
            "source": "image-text",
            "annotations": out.annotations,
        }
        for out in outcomes
        if out.status == "kept"
    ]


def read_captions_jsonl(path) -> list[CaptionSample]:
    """Read caption samples from a JSONL file of
    ``{"image_id": ..., "caption": ...}`` objects."""
    samples = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read captions file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "image_id" not in obj or "caption" not in obj:
            raise LoadError(f"{path}:{lineno}: need 'image_id' and 'caption'")
        try:
            samples.append(CaptionSample(obj["image_id"], obj["caption"]))
        except OvdetError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from exc
    return samples


class FixtureDetector:
    """Region proposer driven by a static table; missing images simply
    yield no proposals."""

    def __init__(self, proposals: dict):
        self._table = proposals

    @classmethod
    def from_json(cls, obj) -> "FixtureDetector":
        if not isinstance(obj, dict) or "proposals" not in obj:
            raise LoadError("detector fixture must carry a 'proposals' table")
        return cls(obj["proposals"])

    def propose(self, image_id: str, nouns: Sequence[str]) -> list[RegionProposal]:
        per_image = self._table.get(image_id, {})
        out = []
        for noun in nouns:
            for row in per_image.get(noun, []):
                if not isinstance(row, (list, tuple)) or len(row) != 5:
                    raise InputError(
                        f"fixture proposal for {image_id!r}/{noun!r} must be "
                        f"[x1, y1, x2, y2, confidence]")
                out.append(RegionProposal(box=tuple(row[:4]), text=noun,
                                          confidence=row[4]))
        return out


class FixtureScorer:
    """Scorer driven by static tables; a missing entry is an error so
    fixture typos surface as errored samples, not silent zeros."""

    def __init__(self, image_scores: dict, region_scores: dict):
        self._image = image_scores
        self._region = region_scores

    @classmethod
    def from_json(cls, obj) -> "FixtureScorer":
        if not isinstance(obj, dict) or "image_scores" not in obj \
                or "region_scores" not in obj:
            raise LoadError(
                "scorer fixture must carry 'image_scores' and 'region_scores'")
        return cls(obj["image_scores"], obj["region_scores"])

    def image_score(self, image_id: str, caption: str) -> float:
        if image_id not in self._image:
            raise InputError(f"no image score for {image_id!r}")
        return self._image[image_id]

    def region_score(self, image_id: str, text: str) -> float:
        per_image = self._region.get(image_id)
        if per_image is None or text not in per_image:
            raise InputError(f"no region score for {image_id!r}/{text!r}")
        return per_image[text]


class ToyCosineScorer:
    """Hermetic scorer: cosine similarity of toy text embeddings, mapped
    to [0, 1].  The image embedding is the encoding of the image id."""

    def __init__(self, dim: int = 32, seed: int = 0):
        from .textembed import toy_encode

        self._encode = lambda text: toy_encode([text], dim=dim, seed=seed).matrix[0]

    def _cos(self, a: str, b: str) -> float:
        va, vb = self._encode(a), self._encode(b)
        return float(va @ vb)

    def image_score(self, image_id: str, caption: str) -> float:
        return (self._cos(image_id, caption) + 1.0) / 2.0

    def region_score(self, image_id: str, text: str) -> float:
        return (self._cos(image_id, text) + 1.0) / 2.0
