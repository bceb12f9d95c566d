"""Re-parameterization tests: folding, the fused forward, and the verifier."""

import numpy as np
import pytest

from conftest import make_pyramid
from ovdet.errors import DimensionError, InputError
from ovdet.fusion import (
    TCSP_LAYERS,
    FusionParams,
    max_sigmoid_attention,
    pool_image_tokens,
    repvlpan_forward,
)
from ovdet.reparam import (
    ReparamBundle,
    build_bundle,
    conv1x1,
    fold_tcsp,
    pool_tokens,
    reparam_tcsp_forward,
    reparam_text_update,
    unfold_tcsp,
    verify_equivalence,
)
from ovdet.textembed import toy_encode


class TestFolding:
    def test_fold_shape_and_round_trip(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((7, 4))
        folded = fold_tcsp(w)
        assert folded.shape == (7, 4, 1, 1)
        assert np.array_equal(unfold_tcsp(folded), w)

    def test_fold_accepts_embeddings(self):
        emb = toy_encode(["a", "b"], dim=4)
        assert np.array_equal(unfold_tcsp(fold_tcsp(emb)), emb.matrix)

    def test_kernel_inner_product_semantics(self):
        """Kernel j at one position computes that position's inner product
        with text row j: a one-hot kernel just reads out a channel."""
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6, 2))
        folded = fold_tcsp(np.array([[1.0, 0.0]]))
        out = conv1x1(x, folded)
        assert out.shape == (4, 6, 1)
        assert np.array_equal(out[:, :, 0], x[:, :, 0])

    def test_conv_matches_matmul_route(self):
        """The fused route reduces in a different order; agreement is
        numerical, not bitwise."""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 3, 6))
        w = rng.standard_normal((4, 6))
        np.testing.assert_allclose(conv1x1(x, fold_tcsp(w)), x @ w.T, rtol=1e-13)

    @pytest.mark.parametrize("bad", [np.zeros((3,)), np.zeros((0, 4))])
    def test_bad_matrices_rejected(self, bad):
        with pytest.raises(DimensionError):
            fold_tcsp(bad)

    def test_bad_folded_shape_rejected(self):
        with pytest.raises(DimensionError):
            unfold_tcsp(np.zeros((3, 4, 2, 1)))


class TestFusedForward:
    def test_matches_direct_attention(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.standard_normal((4, 4, 6))
            w = rng.standard_normal((5, 6))
            fused = reparam_tcsp_forward(x, fold_tcsp(w))
            direct = max_sigmoid_attention(x, w)
            np.testing.assert_allclose(fused, direct, rtol=1e-9, atol=1e-12)

    def test_pool_tokens_is_the_shared_pooling(self):
        rng = np.random.default_rng(4)
        pyramid = make_pyramid(rng, dim=5, h5=4, w5=3)
        assert np.array_equal(pool_tokens(pyramid), pool_image_tokens(pyramid))


class TestReparamTextUpdate:
    def test_shape_and_residual_structure(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((4, 8))
        tokens = rng.standard_normal((27, 8))
        out = reparam_text_update(w, tokens)
        assert out.shape == (4, 8)
        # each output row is the input plus a convex combination of tokens
        delta = out - w
        lo = tokens.min(axis=0) - 1e-12
        hi = tokens.max(axis=0) + 1e-12
        assert np.all(delta >= lo) and np.all(delta <= hi)

    def test_matches_straight_line_attention(self):
        import math

        rng = np.random.default_rng(6)
        w = rng.standard_normal((3, 4))
        tokens = rng.standard_normal((5, 4))
        out = reparam_text_update(w, tokens)
        for i in range(3):
            scores = [float(w[i] @ t) / math.sqrt(4.0) for t in tokens]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            attended = sum((e[j] / z) * tokens[j] for j in range(5))
            np.testing.assert_allclose(out[i], w[i] + attended, rtol=1e-12)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            reparam_text_update(np.zeros((2, 4)), np.zeros((27, 6)))


class TestBundle:
    def test_folded_banks_bake_the_guides(self):
        emb = toy_encode(["cat", "dog", "bus"], dim=8)
        params = FusionParams.random(8, heads=2, seed=7)
        bundle = build_bundle(emb, params)
        assert set(bundle.folded) == set(TCSP_LAYERS)
        for key in TCSP_LAYERS:
            expected = fold_tcsp(emb.matrix @ params.tcsp[key].guide)
            assert bundle.folded[key].shape == (3, 4, 1, 1)
            assert np.array_equal(bundle.folded[key], expected)
        assert np.array_equal(bundle.text, emb.matrix)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            build_bundle(toy_encode(["a"], dim=6), FusionParams.random(8, heads=2))

    def test_bundle_validates_layer_cover(self):
        emb = toy_encode(["a", "b"], dim=4)
        with pytest.raises(InputError):
            ReparamBundle(folded={"td4": np.zeros((2, 2, 1, 1))}, text=emb.matrix)

    def test_bundle_validates_row_count(self):
        emb = toy_encode(["a", "b"], dim=4)
        banks = {key: np.zeros((3, 2, 1, 1)) for key in TCSP_LAYERS}
        with pytest.raises(DimensionError):
            ReparamBundle(folded=banks, text=emb.matrix)


class TestVerifyEquivalence:
    def test_random_params_pass(self):
        emb = toy_encode(["person", "dog", "kite"], dim=8, seed=1)
        params = FusionParams.random(8, heads=2, seed=8)
        report = verify_equivalence(params, emb, trials=5, tol=1e-6, seed=0)
        assert report.passed
        assert report.tokens_bit_identical
        assert report.tokens_max_abs == 0.0
        for dev in report.layers.values():
            assert dev.max_rel <= 1e-6

    def test_degenerate_configuration_coincides_bitwise(self):
        """One head with identity projections makes the full text update
        and the simplified one the same float program; the measured
        divergence must be exactly zero."""
        emb = toy_encode(["person", "dog", "kite", "sofa"], dim=8, seed=2)
        params = FusionParams.identity(8, heads=1)
        report = verify_equivalence(params, emb, trials=3, tol=1e-6, seed=1)
        assert report.text_update_divergence == 0.0

    def test_generic_configuration_diverges(self):
        """With real projections the simplified update is a different
        function; the verifier reports that honestly instead of hiding it."""
        emb = toy_encode(["person", "dog"], dim=8, seed=3)
        params = FusionParams.random(8, heads=4, seed=9)
        report = verify_equivalence(params, emb, trials=2, tol=1e-6, seed=2)
        assert report.text_update_divergence > 1e-3
        assert report.passed  # divergence is informational, not a failure

    def test_injected_fault_fails_the_named_layer(self):
        emb = toy_encode(["person", "dog"], dim=8, seed=4)
        params = FusionParams.random(8, heads=2, seed=10)
        report = verify_equivalence(params, emb, trials=3, tol=1e-6, seed=3,
                                    inject_fault="bu4")
        assert not report.passed
        payload = report.to_json()
        assert not payload["layers"]["bu4"]["pass"]
        for key in ("td4", "td3", "bu5"):
            assert payload["layers"][key]["pass"]

    def test_report_json_shape(self):
        emb = toy_encode(["person"], dim=8, seed=5)
        params = FusionParams.random(8, heads=2, seed=11)
        payload = verify_equivalence(params, emb, trials=1).to_json()
        assert payload["trials"] == 1 and payload["vocab_size"] == 1
        assert set(payload["layers"]) == set(TCSP_LAYERS)
        assert {"max_abs", "max_rel", "pass"} <= set(payload["layers"]["td4"])
        assert "bit_identical" in payload["tokens"]
        assert "max_divergence" in payload["text_update"]
        assert payload["pass"]

    @pytest.mark.parametrize("kwargs", [
        {"trials": 0},
        {"tol": 0.0},
        {"tol": float("inf")},
        {"inject_fault": "td9"},
    ])
    def test_bad_arguments_rejected(self, kwargs):
        emb = toy_encode(["person"], dim=8)
        params = FusionParams.random(8, heads=2, seed=12)
        with pytest.raises(InputError):
            verify_equivalence(params, emb, **kwargs)

    def test_verifier_is_deterministic(self):
        emb = toy_encode(["person", "dog"], dim=8, seed=6)
        params = FusionParams.random(8, heads=2, seed=13)
        a = verify_equivalence(params, emb, trials=3, seed=5).to_json()
        b = verify_equivalence(params, emb, trials=3, seed=5).to_json()
        assert a == b
