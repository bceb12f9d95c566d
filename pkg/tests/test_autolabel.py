"""Pseudo-labeling pipeline tests.

The five-sample caption fixture under tests/fixtures is hand-traced here:
every score, drop, and report counter is derived on paper first and then
asserted exactly.  The CLI golden files pin the same run's serialization.
"""

import json
import math

import pytest

from conftest import FIXTURES
from ovdet.autolabel import (
    CaptionSample,
    FixtureDetector,
    FixtureScorer,
    ImageDecision,
    PipelineConfig,
    RegionProposal,
    ToyCosineScorer,
    annotations_payload,
    extract_nouns,
    image_filter,
    propose_regions,
    read_captions_jsonl,
    region_filter,
    relabel_choice,
    rescore,
    run_pipeline,
)
from ovdet.errors import InputError, LoadError, PipelineError


def load_fixture_pipeline():
    samples = read_captions_jsonl(FIXTURES / "captions.jsonl")
    detector = FixtureDetector.from_json(
        json.loads((FIXTURES / "detector.json").read_text()))
    scorer = FixtureScorer.from_json(
        json.loads((FIXTURES / "scorer.json").read_text()))
    return samples, detector, scorer


class TestExtractNouns:
    def test_stopwords_split_phrases(self):
        assert extract_nouns("a dog running in the park") == ["dog running", "park"]

    def test_simple_article_stripping(self):
        assert extract_nouns("a red ball") == ["red ball"]
        assert extract_nouns("a dog and a cat") == ["dog", "cat"]

    def test_long_runs_chunk_left_to_right(self):
        assert extract_nouns("big red fluffy dog") == ["big red fluffy", "dog"]

    def test_lowercasing_and_punctuation(self):
        assert extract_nouns("The Dog, the CAT!") == ["dog", "cat"]

    def test_duplicates_keep_first_occurrence(self):
        assert extract_nouns("dog and dog") == ["dog"]

    def test_only_stopwords_yields_nothing(self):
        assert extract_nouns("of the and in") == []

    def test_digits_survive(self):
        assert extract_nouns("a 2019 sedan") == ["2019 sedan"]

    def test_empty_caption_rejected(self):
        with pytest.raises(InputError):
            extract_nouns("   ")


class TestProposeRegions:
    def test_no_nouns_is_an_error(self):
        sample = CaptionSample("img", "of the")
        detector = FixtureDetector({})
        with pytest.raises(InputError, match="no nouns"):
            propose_regions(sample, [], detector)

    def test_unrequested_text_rejected(self):
        class RogueDetector:
            def propose(self, image_id, nouns):
                return [RegionProposal((0, 0, 1, 1), "zebra", 0.5)]

        with pytest.raises(PipelineError, match="never requested"):
            propose_regions(CaptionSample("img", "a dog"), ["dog"], RogueDetector())

    def test_non_proposal_rejected(self):
        class JunkDetector:
            def propose(self, image_id, nouns):
                return [{"box": (0, 0, 1, 1)}]

        with pytest.raises(PipelineError):
            propose_regions(CaptionSample("img", "a dog"), ["dog"], JunkDetector())

    def test_unknown_image_yields_no_proposals(self):
        detector = FixtureDetector({})
        assert propose_regions(CaptionSample("img", "a dog"), ["dog"], detector) == []


class TestScoreFusion:
    def test_rescore_is_geometric_mean(self):
        assert rescore(0.49, 0.25) == 0.35  # sqrt(0.1225), exact
        assert rescore(1.0, 1.0) == 1.0
        assert rescore(0.0, 0.9) == 0.0

    def test_rescore_boundary_value_is_exact(self):
        """sqrt recovers a correctly rounded square exactly, so equal
        confidence and region score fuse to that same value."""
        assert rescore(0.3, 0.3) == 0.3
        assert rescore(0.31, 0.31) == 0.31

    @pytest.mark.parametrize("c,s", [(-0.1, 0.5), (0.5, 1.2), (float("nan"), 0.5)])
    def test_out_of_range_scores_rejected(self, c, s):
        with pytest.raises(InputError):
            rescore(c, s)

    def test_relabel_choice_takes_argmax(self):
        assert relabel_choice({"dog": 0.81, "cat": 0.25}) == "dog"

    def test_relabel_tie_keeps_first_entry(self):
        assert relabel_choice({"cat": 0.5, "dog": 0.5}) == "cat"

    def test_relabel_empty_rejected(self):
        with pytest.raises(InputError):
            relabel_choice({})


def proposal(box, text, conf, fused):
    p = RegionProposal(box, text, conf)
    p.rescored = fused
    return p


class TestRegionFilter:
    def test_duplicate_suppressed_then_floor_applied(self):
        props = [
            proposal((0, 0, 10, 10), "dog", 0.9, 0.85),
            proposal((0.5, 0, 10.5, 10), "dog", 0.8, 0.80),  # IoU 0.90 with first
            proposal((50, 50, 60, 60), "cat", 0.49, 0.35),
            proposal((70, 70, 80, 80), "cat", 0.2, 0.10),    # below the floor
        ]
        kept = region_filter(props, nms_thresh=0.5, conf_thresh=0.3)
        assert [p.text for p in kept] == ["dog", "cat"]
        assert kept[0].box == (0.0, 0.0, 10.0, 10.0)

    def test_confidence_floor_is_strict(self):
        at_floor = [proposal((0, 0, 1, 1), "t", 0.3, 0.3)]
        just_above = [proposal((0, 0, 1, 1), "t", 0.31, 0.31)]
        assert region_filter(at_floor, 0.5, 0.3) == []
        assert len(region_filter(just_above, 0.5, 0.3)) == 1

    def test_survivors_keep_input_order(self):
        props = [
            proposal((0, 0, 1, 1), "b", 0.5, 0.4),
            proposal((5, 5, 6, 6), "a", 0.9, 0.9),
            proposal((9, 9, 11, 11), "b", 0.6, 0.6),
        ]
        kept = region_filter(props, 0.5, 0.3)
        assert [p.rescored for p in kept] == [0.4, 0.9, 0.6]

    def test_unfused_proposal_rejected(self):
        with pytest.raises(PipelineError):
            region_filter([RegionProposal((0, 0, 1, 1), "t", 0.5)], 0.5, 0.3)


class TestImageFilter:
    def test_keep_decision(self):
        decision = image_filter(0.8, [0.31], thresh=0.3)
        assert decision == ImageDecision(
            keep=True, score=math.sqrt(0.8 * 0.31), region_score=0.31)

    def test_threshold_is_strict(self):
        """A fused image score of exactly 0.3 drops the image."""
        decision = image_filter(0.09, [1.0], thresh=0.3)
        assert decision.score == 0.3
        assert not decision.keep

    def test_no_survivors_scores_zero(self):
        decision = image_filter(0.99, [], thresh=0.3)
        assert decision.score == 0.0 and decision.region_score == 0.0
        assert not decision.keep

    def test_region_score_is_the_mean(self):
        decision = image_filter(1.0, [0.2, 0.4, 0.6], thresh=0.3)
        assert decision.region_score == (0.2 + 0.4 + 0.6) / 3

    def test_bad_image_score_rejected(self):
        with pytest.raises(InputError):
            image_filter(1.5, [0.5])


class TestPipelineHandTrace:
    """The five-caption fixture, traced sample by sample.

    img_a: one proposal fusing to exactly 0.3, dropped by the strict floor.
    img_b: fuses to exactly 0.31, survives, image kept.
    img_c: perfect region but weak caption: image score lands on exactly
           0.3 and the image drops.
    img_d: duplicate dog box suppressed by NMS; dog and cat survive.
    img_e: caption is all stopwords, errors at the proposal stage.
    """

    @pytest.fixture()
    def outcome_by_id(self):
        samples, detector, scorer = load_fixture_pipeline()
        outcomes, report = run_pipeline(samples, detector, scorer, PipelineConfig())
        return {o.image_id: o for o in outcomes}, report

    def test_sample_statuses(self, outcome_by_id):
        outcomes, _ = outcome_by_id
        assert outcomes["img_a"].status == "dropped"
        assert outcomes["img_b"].status == "kept"
        assert outcomes["img_c"].status == "dropped"
        assert outcomes["img_d"].status == "kept"
        assert outcomes["img_e"].status == "error"

    def test_img_a_boundary_drop(self, outcome_by_id):
        out = outcome_by_id[0]["img_a"]
        assert out.proposals_in == 1 and out.after_nms == 1
        assert out.after_confidence == 0  # fused 0.3 is not above 0.3
        assert out.final_score == 0.0

    def test_img_b_boundary_keep(self, outcome_by_id):
        out = outcome_by_id[0]["img_b"]
        assert out.after_confidence == 1  # fused 0.31 clears the floor
        assert out.region_score == 0.31
        assert out.final_score == math.sqrt(0.8 * 0.31)
        assert out.annotations == [
            {"box": [5.0, 5.0, 15.0, 15.0], "text": "blue cup", "box_accurate": False}]

    def test_img_c_exact_image_threshold_drop(self, outcome_by_id):
        out = outcome_by_id[0]["img_c"]
        assert out.after_confidence == 1
        assert out.final_score == 0.3  # sqrt(0.09 * 1.0), exactly at the bar
        assert out.annotations == []

    def test_img_d_nms_and_survivors(self, outcome_by_id):
        out = outcome_by_id[0]["img_d"]
        assert out.proposals_in == 3
        assert out.after_nms == 2  # the shifted duplicate dog box dies
        assert out.after_confidence == 2
        assert [a["text"] for a in out.annotations] == ["dog", "cat"]
        assert out.annotations[0]["box"] == [0.0, 0.0, 10.0, 10.0]
        assert out.annotations[1]["box"] == [50.0, 50.0, 60.0, 60.0]

    def test_img_e_error_attribution(self, outcome_by_id):
        out = outcome_by_id[0]["img_e"]
        assert out.stage == "propose"
        assert "no nouns" in out.error

    def test_report_reconciles(self, outcome_by_id):
        _, report = outcome_by_id
        assert report == {
            "images_in": 5,
            "images_kept": 2,
            "images_dropped": 2,
            "images_errored": 1,
            "proposals_in": 6,
            "proposals_kept": 3,
            "stage_drops": {"nms": 1, "confidence": 1, "image_filter": 1},
            "errors": [{
                "image_id": "img_e",
                "stage": "propose",
                "message": "sample 'img_e': no nouns to propose regions for",
            }],
        }
        drops = report["stage_drops"]
        assert report["proposals_in"] == (
            drops["nms"] + drops["confidence"] + drops["image_filter"]
            + report["proposals_kept"])

    def test_annotations_payload_orders_kept_samples(self, outcome_by_id):
        outcomes, _ = outcome_by_id
        payload = annotations_payload(
            [outcomes[i] for i in ("img_a", "img_b", "img_c", "img_d", "img_e")])
        assert [entry["image_id"] for entry in payload] == ["img_b", "img_d"]
        assert all(entry["source"] == "image-text" for entry in payload)


class TestRelabel:
    def test_relabel_reassigns_texts_but_not_boxes(self):
        """With relabeling on, every region in img_d takes the image's
        best noun (dog); boxes and survivor count stay the same."""
        samples, detector, scorer = load_fixture_pipeline()
        base_outcomes, _ = run_pipeline(samples, detector, scorer,
                                        PipelineConfig(relabel=False))
        rel_outcomes, _ = run_pipeline(samples, detector, scorer,
                                       PipelineConfig(relabel=True))
        base = {o.image_id: o for o in base_outcomes}["img_d"]
        rel = {o.image_id: o for o in rel_outcomes}["img_d"]
        assert [a["text"] for a in base.annotations] == ["dog", "cat"]
        assert [a["text"] for a in rel.annotations] == ["dog", "dog"]
        assert [a["box"] for a in base.annotations] == [a["box"] for a in rel.annotations]

    def test_relabel_refreshes_region_scores(self):
        """The relabeled cat box fuses its own confidence with the dog
        region score: sqrt(0.49 * 0.81) instead of sqrt(0.49 * 0.25)."""
        samples, detector, scorer = load_fixture_pipeline()
        outcomes, _ = run_pipeline(samples, detector, scorer,
                                   PipelineConfig(relabel=True))
        out = {o.image_id: o for o in outcomes}["img_d"]
        assert out.region_score == (math.sqrt(0.9 * 0.81) + math.sqrt(0.49 * 0.81)) / 2


class TestPipelineMechanics:
    def test_empty_dataset_zeroed_report(self):
        outcomes, report = run_pipeline([], FixtureDetector({}), FixtureScorer({}, {}))
        assert outcomes == []
        assert report["images_in"] == 0 and report["proposals_in"] == 0
        assert report["errors"] == []

    def test_scorer_gap_isolates_one_sample(self):
        """A missing fixture entry errors that sample at its stage and
        leaves every other sample untouched."""
        samples, detector, scorer = load_fixture_pipeline()
        del scorer._image["img_b"]
        outcomes, report = run_pipeline(samples, detector, scorer, PipelineConfig())
        by_id = {o.image_id: o for o in outcomes}
        assert by_id["img_b"].status == "error"
        assert by_id["img_b"].stage == "image_score"
        assert by_id["img_d"].status == "kept"
        assert report["images_errored"] == 2  # img_b plus the stopword sample
        # errored samples contribute nothing to proposal accounting
        assert report["proposals_in"] == 5

    def test_thread_fanout_matches_sequential(self, monkeypatch):
        samples, detector, scorer = load_fixture_pipeline()
        seq_outcomes, seq_report = run_pipeline(samples, detector, scorer)
        monkeypatch.setenv("OVW_THREADS", "4")
        par_outcomes, par_report = run_pipeline(samples, detector, scorer)
        assert par_report == seq_report
        assert [o.image_id for o in par_outcomes] == [o.image_id for o in seq_outcomes]
        for a, b in zip(seq_outcomes, par_outcomes):
            assert a == b

    def test_bad_thread_setting_rejected(self, monkeypatch):
        monkeypatch.setenv("OVW_THREADS", "zero")
        with pytest.raises(InputError):
            run_pipeline([], FixtureDetector({}), FixtureScorer({}, {}))

    def test_stage_order_relabel_before_rescore(self):
        """Relabeling must land before score fusion: a proposal whose noun
        loses the argmax gets the winner's region score fused in."""
        samples = [CaptionSample("img", "a dog and a cat")]
        detector = FixtureDetector(
            {"img": {"cat": [[0, 0, 10, 10, 1.0]]}})
        scorer = FixtureScorer(
            {"img": 1.0}, {"img": {"dog": 0.81, "cat": 0.04}})
        outcomes, _ = run_pipeline(samples, detector, scorer,
                                   PipelineConfig(relabel=True))
        out = outcomes[0]
        # without relabel the fused score would be sqrt(0.04) = 0.2 < 0.3
        assert out.status == "kept"
        assert out.annotations[0]["text"] == "dog"
        assert out.region_score == 0.9  # sqrt(1.0 * 0.81)


class TestJsonlReader:
    def test_reads_fixture(self):
        samples = read_captions_jsonl(FIXTURES / "captions.jsonl")
        assert [s.image_id for s in samples] == [
            "img_a", "img_b", "img_c", "img_d", "img_e"]

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text('{"image_id": "x", "caption": "a dog"}\n\n\n')
        assert len(read_captions_jsonl(path)) == 1

    def test_empty_file_is_empty_dataset(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text("")
        assert read_captions_jsonl(path) == []

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text('{"image_id": "x", "caption": "a dog"}\nnot json\n')
        with pytest.raises(LoadError, match=":2"):
            read_captions_jsonl(path)

    def test_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text('{"image_id": "x"}\n')
        with pytest.raises(LoadError):
            read_captions_jsonl(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            read_captions_jsonl(tmp_path / "absent.jsonl")


class TestProviders:
    def test_fixture_detector_validates_rows(self):
        detector = FixtureDetector({"img": {"dog": [[0, 0, 1, 1]]}})
        with pytest.raises(InputError):
            detector.propose("img", ["dog"])

    def test_fixture_scorer_missing_entry_is_an_error(self):
        scorer = FixtureScorer({}, {})
        with pytest.raises(InputError):
            scorer.image_score("img", "caption")
        with pytest.raises(InputError):
            scorer.region_score("img", "dog")

    def test_toy_cosine_scorer_range_and_determinism(self):
        scorer = ToyCosineScorer(dim=16, seed=0)
        a = scorer.region_score("image_1", "dog")
        b = scorer.region_score("image_1", "dog")
        assert a == b
        assert 0.0 <= a <= 1.0
        assert scorer.image_score("image_1", "a dog sleeping") != a


class TestProposalValidation:
    def test_bad_box_rejected(self):
        with pytest.raises(InputError):
            RegionProposal((5, 0, 1, 1), "t", 0.5)

    def test_confidence_out_of_range_rejected(self):
        with pytest.raises(InputError):
            RegionProposal((0, 0, 1, 1), "t", 1.5)

    def test_empty_text_rejected(self):
        with pytest.raises(InputError):
            RegionProposal((0, 0, 1, 1), "", 0.5)

    def test_empty_caption_rejected(self):
        with pytest.raises(InputError):
            CaptionSample("img", "  ")
