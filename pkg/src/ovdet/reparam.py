"""Deployment-time re-parameterization and its equivalence checks.

With a fixed vocabulary the text side of the fusion network folds into
plain tensors: each cross-stage layer's guide-projected text matrix becomes
the kernel bank of a 1x1 convolution, and the text update collapses to a
projection-free single-head attention over the pooled image tokens.  The
verifier replays a fusion forward pass, recomputes every text-dependent
site through the folded route, and reports per-site deviations.

The fused convolution route deliberately reduces over channels in a
different order (einsum) than the training route (stacked matmul), so the
verifier's tolerance measures genuine numerical agreement rather than
comparing a computation with itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DimensionError, InputError
from .fusion import (
    POOL_GRID,
    PYRAMID_LEVELS,
    TCSP_LAYERS,
    FeaturePyramid,
    FusionParams,
    max_sigmoid_attention,
    pool_image_tokens,
    repvlpan_forward,
)
from .tensorops import as_tensor, check_finite, sigmoid, softmax_lastdim
from .textembed import TextEmbeddings


def fold_tcsp(w: TextEmbeddings | np.ndarray) -> np.ndarray:
    """Arrange a (C, d) text matrix as C one-by-one conv kernels (C, d, 1, 1).

    Applying kernel j at a spatial position computes the inner product of
    the position's feature vector with text row j.
    """
    matrix = w.matrix if isinstance(w, TextEmbeddings) else as_tensor(w)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise DimensionError(f"text matrix must be nonempty (C, d), got {matrix.shape}")
    return matrix.reshape(matrix.shape[0], matrix.shape[1], 1, 1).copy()


def unfold_tcsp(folded: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fold_tcsp`; recovers the matrix bit-identically."""
    folded = np.asarray(folded)
    if folded.ndim != 4 or folded.shape[2:] != (1, 1):
        raise DimensionError(f"folded kernels must be (C, d, 1, 1), got {folded.shape}")
    return folded[:, :, 0, 0].copy()


def conv1x1(x: np.ndarray, folded: np.ndarray) -> np.ndarray:
    """Run the folded kernel bank over an (H, W, d) map, giving (H, W, C)."""
    x = as_tensor(x)
    kernels = unfold_tcsp(folded)
    if x.ndim != 3 or x.shape[2] != kernels.shape[1]:
        raise DimensionError(
            f"features {x.shape} do not match kernels {folded.shape}")
    return np.einsum("hwd,cd->hwc", x, kernels)


def reparam_tcsp_forward(x: np.ndarray, folded: np.ndarray) -> np.ndarray:
    """Fused max-sigmoid attention: conv with folded text, max over kernels,
    sigmoid gate."""
    gate = sigmoid(conv1x1(x, folded).max(axis=-1))
    return check_finite(x * gate[..., None], "fused attention output")


def pool_tokens(pyramid: FeaturePyramid) -> np.ndarray:
    """The 27 pooled image tokens of the deployment path.

    Delegates to the single shared pooling routine, so training and fused
    inference partition cells identically down to the bit.
    """
    return pool_image_tokens(pyramid)


def reparam_text_update(w: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Simplified projection-free text update over pooled tokens.

    Single-head scaled attention with the tokens serving as both keys and
    values.  With one head and identity projections the full update
    computes the same floating-point operations, so the two coincide
    bitwise in that degenerate configuration; in general they differ and
    the verifier reports the divergence instead of asserting it away.
    """
    w = as_tensor(w)
    tokens = as_tensor(tokens)
    if w.ndim != 2 or tokens.ndim != 2 or w.shape[1] != tokens.shape[1]:
        raise DimensionError(
            f"text {w.shape} and tokens {tokens.shape} must share their dim")
    scale = 1.0 / math.sqrt(w.shape[1])
    weights = softmax_lastdim(w @ tokens.T * scale)
    return check_finite(w + weights @ tokens, "simplified text update")


@dataclass(frozen=True)
class ReparamBundle:
    """Everything the text side reduces to once the vocabulary is frozen."""

    folded: Mapping[str, np.ndarray]  # cross-stage layer -> (C, D/2, 1, 1)
    text: np.ndarray                  # (C, D) baked matrix for the text update
    pool_grid: int = POOL_GRID
    pool_levels: tuple[int, ...] = PYRAMID_LEVELS

    def __post_init__(self):
        vocab = self.text.shape[0]
        if tuple(sorted(self.folded)) != tuple(sorted(TCSP_LAYERS)):
            raise InputError(f"folded kernels must cover layers {TCSP_LAYERS}")
        for key, bank in self.folded.items():
            if bank.ndim != 4 or bank.shape[0] != vocab:
                raise DimensionError(
                    f"folded bank {key!r} must have one kernel per text row")


def build_bundle(emb: TextEmbeddings, params: FusionParams) -> ReparamBundle:
    """Fold the vocabulary through every layer's guide projection."""
    if emb.dim != params.dim:
        raise DimensionError(f"embedding dim {emb.dim} != fusion dim {params.dim}")
    folded = {
        key: fold_tcsp(emb.matrix @ params.tcsp[key].guide) for key in TCSP_LAYERS
    }
    return ReparamBundle(folded=folded, text=emb.matrix.copy())


@dataclass
class SiteDeviation:
    max_abs: float = 0.0
    max_rel: float = 0.0

    def absorb(self, fused: np.ndarray, direct: np.ndarray) -> None:
        diff = float(np.abs(fused - direct).max()) if fused.size else 0.0
        denom = max(float(np.abs(direct).max()), 1e-12)
        self.max_abs = max(self.max_abs, diff)
        self.max_rel = max(self.max_rel, diff / denom)


@dataclass
class EquivalenceReport:
    trials: int
    tol: float
    vocab_size: int
    layers: dict
    tokens_bit_identical: bool
    tokens_max_abs: float
    text_update_divergence: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "tol": self.tol,
            "vocab_size": self.vocab_size,
            "layers": {
                key: {
                    "max_abs": dev.max_abs,
                    "max_rel": dev.max_rel,
                    "pass": bool(dev.max_rel <= self.tol),
                }
                for key, dev in self.layers.items()
            },
            "tokens": {
                "bit_identical": self.tokens_bit_identical,
                "max_abs": self.tokens_max_abs,
            },
            "text_update": {"max_divergence": self.text_update_divergence},
            "pass": self.passed,
        }


def _random_pyramid(rng: np.random.Generator, dim: int) -> FeaturePyramid:
    h5 = int(rng.integers(3, 5))
    w5 = int(rng.integers(3, 5))
    return FeaturePyramid({
        l: rng.standard_normal((h5 * 2 ** (5 - l), w5 * 2 ** (5 - l), dim))
        for l in PYRAMID_LEVELS
    })


def verify_equivalence(
    params: FusionParams,
    emb: TextEmbeddings,
    trials: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    inject_fault: str | None = None,
) -> EquivalenceReport:
    """Replay fusion forwards on random pyramids and compare both routes.

    Three checks per trial: (a) at every cross-stage layer, the folded conv
    route must match the direct attention within ``tol`` relative
    deviation; (b) the pooled tokens of both paths must be bit-identical;
    (c) the divergence between the full and simplified text updates is
    measured and reported, never asserted.

    ``inject_fault`` perturbs the folded kernels of the named layer, for
    exercising the failure path end to end.
    """
    if trials < 1:
        raise InputError(f"need at least one trial, got {trials}")
    if not (tol > 0 and math.isfinite(tol)):
        raise InputError(f"tolerance must be positive and finite, got {tol}")
    if inject_fault is not None and inject_fault not in TCSP_LAYERS:
        raise InputError(f"unknown layer {inject_fault!r}, have {TCSP_LAYERS}")

    bundle = build_bundle(emb, params)
    folded = dict(bundle.folded)
    if inject_fault is not None:
        folded[inject_fault] = folded[inject_fault] + 1e-3

    layers = {key: SiteDeviation() for key in TCSP_LAYERS}
    tokens_identical = True
    tokens_max_abs = 0.0
    divergence = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        pyramid = _random_pyramid(rng, params.dim)
        trace: dict = {}
        repvlpan_forward(pyramid, emb, params, trace=trace)

        for site in trace["tcsp"]:
            fused = reparam_tcsp_forward(site["attn_input"], folded[site["layer"]])
            direct = max_sigmoid_attention(site["attn_input"], site["guide"])
            layers[site["layer"]].absorb(fused, direct)

        deployed_tokens = pool_tokens(trace["mid_pyramid"])
        if not np.array_equal(deployed_tokens, trace["tokens"]):
            tokens_identical = False
        tokens_max_abs = max(
            tokens_max_abs, float(np.abs(deployed_tokens - trace["tokens"]).max()))

        simplified = reparam_text_update(trace["text_in"], trace["tokens"])
        divergence = max(
            divergence, float(np.abs(simplified - trace["text_updated"]).max()))

    passed = tokens_identical and all(
        dev.max_rel <= tol for dev in layers.values())
    return EquivalenceReport(
        trials=trials,
        tol=tol,
        vocab_size=emb.count,
        layers=layers,
        tokens_bit_identical=tokens_identical,
        tokens_max_abs=tokens_max_abs,
        text_update_divergence=divergence,
        passed=passed,
    )
