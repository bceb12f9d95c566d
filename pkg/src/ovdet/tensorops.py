"""Minimal dense numeric kernel.

All tensors are ``numpy.ndarray`` of dtype float64, row-major.  Every
operation here validates that its result is finite: NaN/Inf is treated as a
hard error, never silently propagated.  The JSON serialization used by the
CLI and the golden files is ``{"shape": [...], "data": [...]}`` with the
data flattened in row-major (C) order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DimensionError, LoadError, NonFiniteError
from .util import write_text_atomic

EPS_NORM = 1e-12


def as_tensor(values) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite values."""
    arr = np.asarray(values, dtype=np.float64)
    check_finite(arr, "input")
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m, k) and b (k, n)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale each last-axis vector to unit Euclidean norm.

    A vector with norm <= 1e-12 is rejected: normalizing it is undefined
    and downstream similarity math must never see a silent zero.
    """
    v = as_tensor(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateInputError("cannot normalize a vector with norm <= 1e-12")
    return v / norms


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise 1 / (1 + exp(-x)), computed without overflow."""
    x = as_tensor(x)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def grid_cell_edges(extent: int, g: int) -> np.ndarray:
    """Boundaries partitioning ``extent`` rows into ``g`` near-equal cells.

    The first ``g - extent % g`` cells get ``extent // g`` rows; the trailing
    cells absorb the remainder.  This rule is shared by every pooling path in
    the package; the re-parameterization equivalence depends on that.
    """
    if extent < g:
        raise DimensionError(f"extent {extent} smaller than grid size {g}")
    base, rem = divmod(extent, g)
    sizes = [base] * (g - rem) + [base + 1] * rem
    return np.concatenate([[0], np.cumsum(sizes)])


def max_pool_grid(x: np.ndarray, g: int) -> np.ndarray:
    """Pool an (H, W, D) map onto a g x g grid of per-channel maxima.

    Output is (g*g, D), cells flattened row-major.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"max_pool_grid expects an (H, W, D) map, got {x.shape}")
    h, w, d = x.shape
    if g < 1:
        raise DimensionError("grid size must be >= 1")
    rows = grid_cell_edges(h, g)
    cols = grid_cell_edges(w, g)
    out = np.empty((g * g, d), dtype=np.float64)
    for i in range(g):
        for j in range(g):
            cell = x[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            out[i * g + j] = cell.max(axis=(0, 1))
    return out


def tensor_to_json(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def tensor_from_json(obj) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise LoadError("tensor JSON must be an object with 'shape' and 'data'")
    shape = obj["shape"]
    data = obj["data"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise LoadError("tensor shape must be a list of positive integers")
    n = int(np.prod(shape))
    if not isinstance(data, list) or len(data) != n:
        raise LoadError(f"tensor data length {len(data) if isinstance(data, list) else '?'} "
                        f"does not match shape {shape}")
    arr = np.asarray(data, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise LoadError("tensor data contains non-finite values")
    return arr


def save_tensor(arr: np.ndarray, path) -> None:
    write_text_atomic(str(path), json.dumps(tensor_to_json(arr)) + "\n")


def load_tensor(path) -> np.ndarray:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read tensor file {path}: {exc}") from exc
    return tensor_from_json(obj)
