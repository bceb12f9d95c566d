"""Finite-difference verification of hand-derived gradients.

Every differentiable op in the package registers a scalar-valued probe
(value = sum of a fixed random cotangent times the op output, or the loss
itself for scalar losses), an analytic gradient, and a sampler that draws
inputs away from non-smooth points (argmax ties, box-corner crossings) so
central differences are trustworthy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .assign import Assignment
from .errors import InputError
from .fusion import AttnWeights, _multi_head_attention, max_sigmoid_attention
from .head import contrastive_similarity
from .losses import contrastive_loss, dfl_loss, iou_loss
from .tensorops import matmul, sigmoid, softmax_lastdim

REL_FLOOR = 1e-8
EPS_RANGE = (1e-7, 1e-3)


@dataclass(frozen=True)
class OpCheck:
    sample: Callable[[int], dict]
    value: Callable[[Mapping], float]
    grads: Callable[[Mapping], dict[str, np.ndarray]]
    wrt: tuple[str, ...]


def _softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


# ---------------------------------------------------------------- matmul

def _matmul_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 1])
    return {
        "a": rng.standard_normal((3, 4)),
        "b": rng.standard_normal((4, 5)),
        "cot": rng.standard_normal((3, 5)),
    }


def _matmul_value(inp) -> float:
    return float((inp["cot"] * matmul(inp["a"], inp["b"])).sum())


def _matmul_grads(inp) -> dict:
    return {"a": inp["cot"] @ inp["b"].T}


# ------------------------------------------------------------ similarity

def _similarity_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 2])
    while True:
        e = rng.standard_normal((4, 6))
        w = rng.standard_normal((5, 6))
        en = e / np.linalg.norm(e, axis=1, keepdims=True)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        # stay away from the cosine clip at +-1
        if np.abs(en @ wn.T).max() < 0.99:
            break
    return {"e": e, "w": w, "cot": rng.standard_normal((4, 5)),
            "scale": 1.3, "shift": 0.2}


def _similarity_value(inp) -> float:
    sim = contrastive_similarity(inp["e"], inp["w"], inp["scale"], inp["shift"])
    return float((inp["cot"] * sim.values).sum())


def _similarity_grads(inp) -> dict:
    e, w, cot = inp["e"], inp["w"], inp["cot"]
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    e_hat = e / norms
    w_hat = w / np.linalg.norm(w, axis=1, keepdims=True)
    g_hat = inp["scale"] * cot @ w_hat                      # dV/d(e_hat)
    radial = (g_hat * e_hat).sum(axis=1, keepdims=True)
    return {"e": (g_hat - radial * e_hat) / norms}


# ----------------------------------------------------------- max_sigmoid

def _max_sigmoid_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 3])
    w = rng.standard_normal((3, 6))
    while True:
        x = rng.standard_normal((3, 4, 6))
        logits = x @ w.T
        top2 = np.partition(logits, -2, axis=-1)[..., -2:]
        # argmax must be stable under the finite-difference perturbation
        if (top2[..., 1] - top2[..., 0]).min() > 1e-2:
            break
    return {"x": x, "w": w, "cot": rng.standard_normal((3, 4, 6))}


def _max_sigmoid_value(inp) -> float:
    return float((inp["cot"] * max_sigmoid_attention(inp["x"], inp["w"])).sum())


def _max_sigmoid_grads(inp) -> dict:
    x, w, cot = inp["x"], inp["w"], inp["cot"]
    logits = x @ w.T
    best = logits.argmax(axis=-1)
    gate = sigmoid(logits.max(axis=-1))                     # (H, W)
    slope = gate * (1.0 - gate)
    inner = (cot * x).sum(axis=-1)                          # (H, W)
    grad_x = cot * gate[..., None] + (inner * slope)[..., None] * w[best]
    grad_w = np.zeros_like(w)
    contrib = (inner * slope)[..., None] * x                # (H, W, D)
    np.add.at(grad_w, best.ravel(), contrib.reshape(-1, x.shape[-1]))
    return {"x": grad_x, "w": grad_w}


# -------------------------------------------------------- pool_attention

_POOL_HEADS = 4
_POOL_DIM = 8


def _pool_params(seed: int) -> AttnWeights:
    rng = np.random.default_rng([seed, 40])
    scale = 1.0 / math.sqrt(_POOL_DIM)
    return AttnWeights(
        heads=_POOL_HEADS,
        wq=rng.standard_normal((_POOL_DIM, _POOL_DIM)) * scale,
        wk=rng.standard_normal((_POOL_DIM, _POOL_DIM)) * scale,
        wv=rng.standard_normal((_POOL_DIM, _POOL_DIM)) * scale,
        wo=rng.standard_normal((_POOL_DIM, _POOL_DIM)) * scale,
    )


def _pool_attention_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 4])
    return {
        "w": rng.standard_normal((4, _POOL_DIM)),
        "tokens": rng.standard_normal((27, _POOL_DIM)),
        "cot": rng.standard_normal((4, _POOL_DIM)),
        "params": _pool_params(seed),
    }


def _pool_attention_value(inp) -> float:
    out = inp["w"] + _multi_head_attention(inp["w"], inp["tokens"], inp["params"])
    return float((inp["cot"] * out).sum())


def _pool_attention_grads(inp) -> dict:
    w, tokens, cot, p = inp["w"], inp["tokens"], inp["cot"], inp["params"]
    d = w.shape[1]
    dh = d // p.heads
    inv = 1.0 / math.sqrt(dh)
    q_full, k_full, v_full = w @ p.wq, tokens @ p.wk, tokens @ p.wv
    g_mixed = cot @ p.wo.T
    gq_full = np.zeros_like(q_full)
    gk_full = np.zeros_like(k_full)
    gv_full = np.zeros_like(v_full)
    for i in range(p.heads):
        cols = slice(i * dh, (i + 1) * dh)
        q, k, v = q_full[:, cols], k_full[:, cols], v_full[:, cols]
        probs = softmax_lastdim(q @ k.T * inv)
        g_head = g_mixed[:, cols]
        g_probs = g_head @ v.T
        g_scores = _softmax_backward(probs, g_probs)
        gq_full[:, cols] = g_scores @ k * inv
        gk_full[:, cols] = g_scores.T @ q * inv
        gv_full[:, cols] = probs.T @ g_head
    return {
        "w": cot + gq_full @ p.wq.T,
        "tokens": gk_full @ p.wk.T + gv_full @ p.wv.T,
    }


# ------------------------------------------------------ contrastive_loss

def _contrastive_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 5])
    n_anchors, n_texts = 6, 5
    gt_index = np.full(n_anchors, -1)
    text_index = np.full(n_anchors, -1)
    positives = rng.choice(n_anchors, size=3, replace=False)
    for slot, k in enumerate(sorted(positives)):
        gt_index[k] = slot
        text_index[k] = rng.integers(n_texts)
    return {
        "values": rng.standard_normal((n_anchors, n_texts)),
        "assignment": Assignment(gt_index, text_index),
    }


def _contrastive_value(inp) -> float:
    return contrastive_loss(inp["values"], inp["assignment"])


def _contrastive_grads(inp) -> dict:
    values, assignment = inp["values"], inp["assignment"]
    grad = np.zeros_like(values)
    positives = np.nonzero(assignment.positive_mask)[0]
    for k in positives:
        probs = softmax_lastdim(values[k])
        probs[assignment.text_index[k]] -= 1.0
        grad[k] = probs / len(positives)
    return {"values": grad}


# --------------------------------------------------------------- iou_loss

def _iou_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 6])
    gt = np.array([0.0, 0.0, 1.0, 1.0]) + rng.uniform(-0.1, 0.1, 4)
    while True:
        pred = gt + rng.uniform(-0.3, 0.3, 4)
        iw = min(pred[2], gt[2]) - max(pred[0], gt[0])
        ih = min(pred[3], gt[3]) - max(pred[1], gt[1])
        # margins keep every min/max branch stable under perturbation
        if (pred[2] - pred[0] > 0.05 and pred[3] - pred[1] > 0.05
                and iw > 0.05 and ih > 0.05
                and np.abs(pred - gt).min() > 0.05):
            break
    return {"pred": pred, "gt": gt}


def _iou_value(inp) -> float:
    return iou_loss(inp["pred"], inp["gt"])


def _iou_grads(inp) -> dict:
    p, g = inp["pred"], inp["gt"]
    iw = min(p[2], g[2]) - max(p[0], g[0])
    ih = min(p[3], g[3]) - max(p[1], g[1])
    inter = iw * ih
    area_p = (p[2] - p[0]) * (p[3] - p[1])
    area_g = (g[2] - g[0]) * (g[3] - g[1])
    union = area_p + area_g - inter
    d_inter = np.array([
        -ih if p[0] > g[0] else 0.0,
        -iw if p[1] > g[1] else 0.0,
        ih if p[2] < g[2] else 0.0,
        iw if p[3] < g[3] else 0.0,
    ])
    d_area = np.array([-(p[3] - p[1]), -(p[2] - p[0]), p[3] - p[1], p[2] - p[0]])
    d_union = d_area - d_inter
    grad = -(d_inter * union - inter * d_union) / union ** 2
    return {"pred": grad}


# --------------------------------------------------------------- dfl_loss

def _dfl_sample(seed: int) -> dict:
    rng = np.random.default_rng([seed, 7])
    n_bins = 8
    return {
        "logits": rng.standard_normal((4, n_bins)),
        "targets": rng.uniform(0.2, n_bins - 1.2, 4),
    }


def _dfl_value(inp) -> float:
    return dfl_loss(inp["logits"], inp["targets"])


def _dfl_grads(inp) -> dict:
    logits, targets = inp["logits"], inp["targets"]
    grad = softmax_lastdim(logits)
    for side in range(4):
        lo = int(math.floor(targets[side]))
        w_hi = targets[side] - lo
        grad[side, lo] -= 1.0 - w_hi
        grad[side, lo + 1] -= w_hi
    return {"logits": grad / 4.0}


REGISTRY: dict[str, OpCheck] = {
    "matmul": OpCheck(_matmul_sample, _matmul_value, _matmul_grads, ("a",)),
    "similarity": OpCheck(_similarity_sample, _similarity_value,
                          _similarity_grads, ("e",)),
    "max_sigmoid": OpCheck(_max_sigmoid_sample, _max_sigmoid_value,
                           _max_sigmoid_grads, ("x", "w")),
    "pool_attention": OpCheck(_pool_attention_sample, _pool_attention_value,
                              _pool_attention_grads, ("w", "tokens")),
    "contrastive_loss": OpCheck(_contrastive_sample, _contrastive_value,
                                _contrastive_grads, ("values",)),
    "iou_loss": OpCheck(_iou_sample, _iou_value, _iou_grads, ("pred",)),
    "dfl_loss": OpCheck(_dfl_sample, _dfl_value, _dfl_grads, ("logits",)),
}

# the checked model ops; "matmul" is a calibration baseline, not a model op
MODEL_OPS = ("similarity", "max_sigmoid", "pool_attention",
             "contrastive_loss", "iou_loss", "dfl_loss")


def sample_inputs(op_id: str, seed: int) -> dict:
    if op_id not in REGISTRY:
        raise InputError(f"unknown op {op_id!r}, have {sorted(REGISTRY)}")
    return REGISTRY[op_id].sample(seed)


def _numeric_grad(value_fn, inputs: Mapping, name: str, eps: float) -> np.ndarray:
    base = np.asarray(inputs[name], dtype=float)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        hi = base.copy()
        hi[idx] += eps
        lo = base.copy()
        lo[idx] -= eps
        grad[idx] = (value_fn({**inputs, name: hi})
                     - value_fn({**inputs, name: lo})) / (2.0 * eps)
    return grad


def grad_check(op_id: str, inputs: Mapping, eps: float = 1e-5) -> float:
    """Max relative deviation between analytic and central-difference
    gradients over every differentiable input of the op."""
    if op_id not in REGISTRY:
        raise InputError(f"unknown op {op_id!r}, have {sorted(REGISTRY)}")
    if not (EPS_RANGE[0] <= eps <= EPS_RANGE[1]):
        raise InputError(f"step size must lie in {EPS_RANGE}, got {eps}")
    check = REGISTRY[op_id]
    analytic = check.grads(inputs)
    worst = 0.0
    for name in check.wrt:
        a = np.asarray(analytic[name], dtype=float)
        n = _numeric_grad(check.value, inputs, name, eps)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def run_grad_checks(
    op_ids: Sequence[str] | None = None,
    seeds: int = 100,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> dict:
    """Check each op on ``seeds`` sampled instances; returns a report with
    per-op worst deviations and an overall pass flag."""
    if seeds < 1:
        raise InputError("need at least one seed")
    if tol <= 0:
        raise InputError("tolerance must be positive")
    ops = tuple(op_ids) if op_ids is not None else MODEL_OPS
    report: dict = {"eps": eps, "tol": tol, "seeds": seeds, "ops": {}}
    for op_id in ops:
        per_seed = [
            grad_check(op_id, sample_inputs(op_id, seed), eps)
            for seed in range(seeds)
        ]
        worst = max(per_seed)
        report["ops"][op_id] = {
            "max_rel_error": worst,
            "worst_seed": int(np.argmax(per_seed)),
            "per_seed": per_seed,
            "pass": bool(worst < tol),
        }
    report["pass"] = all(entry["pass"] for entry in report["ops"].values())
    return report
