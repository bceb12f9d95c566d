"""Vision-language feature pyramid fusion.

The network takes a three-level feature pyramid (levels 3, 4, 5 at strides
8, 16, 32) plus a matrix of text embeddings and runs a path-aggregation
pass in which every merge point is a text-guided cross-stage layer, and the
text embeddings are refreshed once by attending over pooled image tokens.

Fixed structural choices (the equivalence checks in :mod:`ovdet.reparam`
depend on them):

* Lateral merges combine features by elementwise sum after 2x nearest
  upsampling (top-down) or stride-2 max pooling (bottom-up).
* Each cross-stage layer splits its D channels into equal halves; the first
  half goes through a bottleneck projection and the max-sigmoid text
  attention, the second passes through untouched, and the concatenation is
  mixed by a D x D projection.  D must therefore be even.
* The text guide entering a cross-stage layer is the embedding matrix
  projected to the half width by that layer's guide matrix.
* The text update runs between the top-down and bottom-up passes, over the
  post-top-down features.  Its output feeds the detection head; the
  cross-stage layers on the bottom-up path still consume the original
  embeddings, which is what makes the text weights foldable offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DimensionError, InputError
from .tensorops import (
    as_tensor,
    check_finite,
    max_pool_grid,
    sigmoid,
    softmax_lastdim,
    tensor_from_json,
    tensor_to_json,
)
from .textembed import TextEmbeddings

PYRAMID_LEVELS = (3, 4, 5)
TCSP_LAYERS = ("td4", "td3", "bu4", "bu5")
POOL_GRID = 3


@dataclass(frozen=True)
class FeaturePyramid:
    """Three multi-scale (H, W, D) feature maps with halving extents."""

    levels: Mapping[int, np.ndarray]

    def __post_init__(self):
        keys = tuple(sorted(self.levels))
        if keys != PYRAMID_LEVELS:
            raise DimensionError(f"pyramid must have levels {PYRAMID_LEVELS}, got {keys}")
        arrays = {l: as_tensor(self.levels[l]) for l in PYRAMID_LEVELS}
        dims = {l: a.shape for l, a in arrays.items()}
        for l, shape in dims.items():
            if len(shape) != 3:
                raise DimensionError(f"level {l} must be (H, W, D), got {shape}")
        d = dims[3][2]
        if any(dims[l][2] != d for l in PYRAMID_LEVELS):
            raise DimensionError("pyramid levels must share the channel dim")
        for axis in (0, 1):
            if not (dims[3][axis] == 2 * dims[4][axis] == 4 * dims[5][axis]):
                raise DimensionError(
                    f"spatial extents must halve per level, got "
                    f"{dims[3][axis]}/{dims[4][axis]}/{dims[5][axis]} on axis {axis}")
        object.__setattr__(self, "levels", arrays)

    @property
    def dim(self) -> int:
        return self.levels[3].shape[2]

    def level(self, l: int) -> np.ndarray:
        return self.levels[l]


@dataclass(frozen=True)
class TcspWeights:
    """Weights of one text-guided cross-stage layer."""

    guide: np.ndarray       # (D, D/2): projects text embeddings to the attention width
    bottleneck: np.ndarray  # (D/2, D/2)
    mix: np.ndarray         # (D, D)


@dataclass(frozen=True)
class AttnWeights:
    """Multi-head attention projections for the text update."""

    heads: int
    wq: np.ndarray  # (D, D)
    wk: np.ndarray  # (D, D)
    wv: np.ndarray  # (D, D)
    wo: np.ndarray  # (D, D)


@dataclass(frozen=True)
class FusionParams:
    dim: int
    tcsp: Mapping[str, TcspWeights]
    ipool: AttnWeights

    def __post_init__(self):
        d = self.dim
        if d < 2 or d % 2:
            raise DimensionError(f"channel dim must be even and >= 2, got {d}")
        if tuple(sorted(self.tcsp)) != tuple(sorted(TCSP_LAYERS)):
            raise InputError(f"cross-stage layer keys must be {TCSP_LAYERS}")
        half = d // 2
        for key, w in self.tcsp.items():
            if w.guide.shape != (d, half) or w.bottleneck.shape != (half, half) \
                    or w.mix.shape != (d, d):
                raise DimensionError(f"inconsistent projection shapes in layer {key!r}")
        h = self.ipool.heads
        if h < 1 or d % h:
            raise DimensionError(f"head count {h} must divide channel dim {d}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self.ipool, name).shape != (d, d):
                raise DimensionError(f"attention projection {name} must be ({d}, {d})")

    @classmethod
    def identity(cls, dim: int, heads: int = 4) -> "FusionParams":
        """Identity bottleneck/mix projections, identity attention projections,
        and a guide that passes the first D/2 embedding components through."""
        half = dim // 2
        guide = np.zeros((dim, half))
        guide[:half, :] = np.eye(half)
        layer = TcspWeights(guide=guide, bottleneck=np.eye(half), mix=np.eye(dim))
        eye = np.eye(dim)
        ipool = AttnWeights(heads=heads, wq=eye, wk=eye.copy(), wv=eye.copy(), wo=eye.copy())
        return cls(dim, {k: layer for k in TCSP_LAYERS}, ipool)

    @classmethod
    def random(cls, dim: int, heads: int = 4, seed: int = 0) -> "FusionParams":
        half = dim // 2
        tcsp = {}
        for i, key in enumerate(TCSP_LAYERS):
            rng = np.random.default_rng([seed, 101, i])
            tcsp[key] = TcspWeights(
                guide=rng.standard_normal((dim, half)) / math.sqrt(dim),
                bottleneck=rng.standard_normal((half, half)) / math.sqrt(half),
                mix=rng.standard_normal((dim, dim)) / math.sqrt(dim),
            )
        rng = np.random.default_rng([seed, 202])
        scale = 1.0 / math.sqrt(dim)
        ipool = AttnWeights(
            heads=heads,
            wq=rng.standard_normal((dim, dim)) * scale,
            wk=rng.standard_normal((dim, dim)) * scale,
            wv=rng.standard_normal((dim, dim)) * scale,
            wo=rng.standard_normal((dim, dim)) * scale,
        )
        return cls(dim, tcsp, ipool)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "heads": self.ipool.heads,
            "tcsp": {
                key: {
                    "guide": tensor_to_json(w.guide),
                    "bottleneck": tensor_to_json(w.bottleneck),
                    "mix": tensor_to_json(w.mix),
                }
                for key, w in sorted(self.tcsp.items())
            },
            "ipool": {
                name: tensor_to_json(getattr(self.ipool, name))
                for name in ("wq", "wk", "wv", "wo")
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FusionParams":
        tcsp = {
            key: TcspWeights(
                guide=tensor_from_json(spec["guide"]),
                bottleneck=tensor_from_json(spec["bottleneck"]),
                mix=tensor_from_json(spec["mix"]),
            )
            for key, spec in obj["tcsp"].items()
        }
        ipool = AttnWeights(
            heads=obj["heads"],
            **{name: tensor_from_json(obj["ipool"][name]) for name in ("wq", "wk", "wv", "wo")},
        )
        return cls(obj["dim"], tcsp, ipool)


def toy_backbone(image: np.ndarray, seed: int = 0, dim: int = 32) -> FeaturePyramid:
    """Deterministic seeded stand-in for a real image encoder.

    Each level applies a seeded strided linear projection: pixels in every
    stride x stride cell are combined with a per-level spatial kernel and
    projected from 3 channels to ``dim``.  There is no bias, so a zero image
    yields a zero pyramid.
    """
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise DimensionError(f"image extents must be divisible by 32, got {h}x{w}")
    levels = {}
    for l in PYRAMID_LEVELS:
        stride = 2 ** l
        rng = np.random.default_rng([seed, l])
        spatial = rng.standard_normal((stride, stride)) / stride
        channel = rng.standard_normal((3, dim)) / math.sqrt(3)
        cells = image.reshape(h // stride, stride, w // stride, stride, 3)
        pooled = np.einsum("isjtc,st->ijc", cells, spatial)
        levels[l] = pooled @ channel
    return FeaturePyramid(levels)


def max_sigmoid_attention(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Scale each position by the sigmoid of its best text logit.

    For every spatial position the feature vector is multiplied by
    sigmoid(max over text rows of the inner product with that row).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 3 or w.ndim != 2:
        raise DimensionError(f"expected (H, W, D) features and (C, D) text, "
                             f"got {x.shape} and {w.shape}")
    if w.shape[0] == 0:
        raise InputError("text matrix must have at least one row")
    if x.shape[2] != w.shape[1]:
        raise DimensionError(f"channel dims differ: {x.shape[2]} vs {w.shape[1]}")
    logits = x @ w.T                     # (H, W, C)
    gate = sigmoid(logits.max(axis=-1))  # (H, W)
    return check_finite(x * gate[..., None], "attention output")


def t_csplayer(
    x: np.ndarray,
    w: np.ndarray,
    params: FusionParams,
    layer: str,
    trace: list | None = None,
) -> np.ndarray:
    """Text-guided cross-stage layer; shape preserving.

    Channels split into halves; the first half runs through the bottleneck
    projection and max-sigmoid attention against the guide-projected text,
    the second half is carried across untouched; the concatenation is mixed
    by the layer's D x D projection.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if layer not in params.tcsp:
        raise InputError(f"unknown cross-stage layer {layer!r}")
    d = params.dim
    if x.ndim != 3 or x.shape[2] != d:
        raise DimensionError(f"features must be (H, W, {d}), got {x.shape}")
    if w.ndim != 2 or w.shape[1] != d:
        raise DimensionError(f"text matrix must be (C, {d}), got {w.shape}")
    lw = params.tcsp[layer]
    half = d // 2
    attn_in = x[..., :half] @ lw.bottleneck
    guide = w @ lw.guide
    if trace is not None:
        trace.append({"layer": layer, "attn_input": attn_in, "guide": guide})
    attended = max_sigmoid_attention(attn_in, guide)
    merged = np.concatenate([attended, x[..., half:]], axis=-1)
    return check_finite(merged @ lw.mix, "cross-stage output")


def pool_image_tokens(pyramid: FeaturePyramid) -> np.ndarray:
    """Max-pool every level onto a 3x3 grid and stack: 27 tokens of dim D.

    Level order 3, 4, 5; cells row-major within a level.  This is the one
    and only token-pooling path in the package.
    """
    return np.concatenate(
        [max_pool_grid(pyramid.level(l), POOL_GRID) for l in PYRAMID_LEVELS], axis=0)


def _multi_head_attention(query: np.ndarray, tokens: np.ndarray, p: AttnWeights) -> np.ndarray:
    d = query.shape[1]
    dh = d // p.heads
    scale = 1.0 / math.sqrt(dh)
    q = query @ p.wq
    k = tokens @ p.wk
    v = tokens @ p.wv
    out = np.empty_like(q)
    for i in range(p.heads):
        cols = slice(i * dh, (i + 1) * dh)
        weights = softmax_lastdim(q[:, cols] @ k[:, cols].T * scale)
        out[:, cols] = weights @ v[:, cols]
    return out @ p.wo


def image_pooling_attention(
    w: np.ndarray, pyramid: FeaturePyramid, params: FusionParams
) -> np.ndarray:
    """Residual multi-head attention of text rows over 27 pooled image tokens."""
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[1] != params.dim:
        raise DimensionError(f"text matrix must be (C, {params.dim}), got {w.shape}")
    tokens = pool_image_tokens(pyramid)
    return check_finite(w + _multi_head_attention(w, tokens, params.ipool),
                        "text update output")


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x spatial upsampling."""
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def downsample2x(x: np.ndarray) -> np.ndarray:
    """Stride-2 max pooling with a 2x2 window; extents must be even."""
    h, w, d = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"extents must be even for 2x downsampling, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, d).max(axis=(1, 3))


def repvlpan_forward(
    pyramid: FeaturePyramid,
    emb: TextEmbeddings | np.ndarray,
    params: FusionParams,
    trace: dict | None = None,
) -> tuple[FeaturePyramid, np.ndarray]:
    """Full fusion pass.

    Top-down merges (producing the mid features) and bottom-up merges each
    go through a text-guided cross-stage layer.  Between the two passes the
    text matrix is updated once by pooling attention over the mid features;
    the updated matrix is returned for the head while the bottom-up layers
    keep consuming the original embeddings.

    When ``trace`` is a dict it receives the intermediate products the
    re-parameterization checks compare against: per-layer attention inputs,
    the pooled tokens, and the text matrices.
    """
    w = emb.matrix if isinstance(emb, TextEmbeddings) else as_tensor(emb)
    tcsp_trace: list | None = [] if trace is not None else None

    c3, c4, c5 = (pyramid.level(l) for l in PYRAMID_LEVELS)
    m5 = c5
    m4 = t_csplayer(upsample2x(m5) + c4, w, params, "td4", trace=tcsp_trace)
    m3 = t_csplayer(upsample2x(m4) + c3, w, params, "td3", trace=tcsp_trace)
    mid = FeaturePyramid({3: m3, 4: m4, 5: m5})

    tokens = pool_image_tokens(mid)
    w_updated = check_finite(w + _multi_head_attention(w, tokens, params.ipool),
                             "text update output")

    p3 = m3
    p4 = t_csplayer(downsample2x(p3) + m4, w, params, "bu4", trace=tcsp_trace)
    p5 = t_csplayer(downsample2x(p4) + m5, w, params, "bu5", trace=tcsp_trace)
    out = FeaturePyramid({3: p3, 4: p4, 5: p5})

    if trace is not None:
        trace["tcsp"] = tcsp_trace
        trace["mid_pyramid"] = mid
        trace["tokens"] = tokens
        trace["text_in"] = w
        trace["text_updated"] = w_updated
    return out, w_updated
