"""Text embedding provision and vocabulary construction.

The real text encoder lives out of process: this module only fixes the
embeddings file contract and ships a deterministic toy encoder so the whole
artifact runs hermetically.  Embeddings are always stored and loaded with
unit-norm rows.

File formats
------------
Embeddings JSON::

    {"dim": D, "entries": [{"noun": str, "vec": [...]}, ...]}

Vocabulary JSON::

    {"m": M, "entries": [{"noun": str, "origin": "positive"|"negative"}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, LoadError
from .tensorops import l2_normalize
from .util import write_text_atomic

DEFAULT_MAX_VOCAB = 80


@dataclass(frozen=True)
class TextEmbeddings:
    """An ordered list of nouns with one unit-norm row per noun."""

    nouns: tuple[str, ...]
    matrix: np.ndarray  # (C, D), rows unit-norm

    def __post_init__(self):
        if len(self.nouns) == 0:
            raise InputError("embeddings need at least one noun")
        if len(set(self.nouns)) != len(self.nouns):
            raise InputError("duplicate nouns in embeddings")
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != len(self.nouns):
            raise InputError(f"matrix shape {m.shape} does not match {len(self.nouns)} nouns")
        object.__setattr__(self, "matrix", m)
        norms = np.linalg.norm(m, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InputError("embedding rows must be unit-norm")

    @property
    def count(self) -> int:
        return len(self.nouns)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class Vocabulary:
    """Ordered nouns with a positive/negative origin tag per entry."""

    entries: tuple[str, ...]
    origins: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.origins) != len(self.entries):
            raise InputError("origins and entries must have equal length")
        if any(o not in ("positive", "negative") for o in self.origins):
            raise InputError("origin tags must be 'positive' or 'negative'")
        if len(set(self.entries)) != len(self.entries):
            raise InputError("duplicate nouns in vocabulary")

    def positives(self) -> list[str]:
        return [n for n, o in zip(self.entries, self.origins) if o == "positive"]


def _noun_seed(noun: str, dim: int, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}|{dim}|{noun}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def toy_encode(nouns: Sequence[str], dim: int = 32, seed: int = 0) -> TextEmbeddings:
    """Deterministic stand-in for a real text encoder.

    Each noun is expanded to ``dim`` pseudo-random normal components using a
    generator seeded from a hash of (seed, dim, noun bytes), then normalized.
    The same (noun, dim, seed) triple always yields the same unit vector.
    """
    nouns = list(nouns)
    if not nouns:
        raise InputError("noun list is empty")
    if len(set(nouns)) != len(nouns):
        raise InputError("duplicate nouns passed to toy_encode")
    if dim < 2:
        raise InputError("embedding dim must be >= 2")
    rows = np.empty((len(nouns), dim), dtype=np.float64)
    for i, noun in enumerate(nouns):
        rng = np.random.default_rng(_noun_seed(noun, dim, seed))
        rows[i] = rng.standard_normal(dim)
    rows = l2_normalize(rows)
    return TextEmbeddings(tuple(nouns), rows)


def build_online_vocabulary(
    positives: Iterable[str],
    negative_pool: Iterable[str],
    m: int = DEFAULT_MAX_VOCAB,
    seed: int = 0,
) -> Vocabulary:
    """Training-time vocabulary: all positives plus sampled negatives.

    Positives keep their input order.  If there are more than ``m`` of them,
    only the first ``m`` survive and a warning is issued.  Remaining slots
    are filled by seeded uniform sampling without replacement from the
    negative pool; an exhausted pool simply yields a shorter vocabulary.
    """
    if m < 1:
        raise InputError("vocabulary size bound must be >= 1")
    pos = list(dict.fromkeys(positives))
    pool = list(dict.fromkeys(negative_pool))
    overlap = set(pos) & set(pool)
    if overlap:
        raise InputError(f"positives and negative pool overlap: {sorted(overlap)}")
    if not pos and not pool:
        raise InputError("both positives and negative pool are empty")
    if len(pos) > m:
        warnings.warn(f"{len(pos)} positive nouns exceed the bound {m}; keeping the first {m}")
        pos = pos[:m]
    slots = m - len(pos)
    negs: list[str] = []
    if slots > 0 and pool:
        rng = np.random.default_rng(seed)
        take = min(slots, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        negs = [pool[i] for i in idx]
    entries = tuple(pos + negs)
    origins = tuple(["positive"] * len(pos) + ["negative"] * len(negs))
    return Vocabulary(entries, origins)


def embeddings_to_json(emb: TextEmbeddings) -> dict:
    return {
        "dim": emb.dim,
        "entries": [
            {"noun": noun, "vec": emb.matrix[i].tolist()} for i, noun in enumerate(emb.nouns)
        ],
    }


def embeddings_from_json(obj) -> TextEmbeddings:
    if not isinstance(obj, dict) or "dim" not in obj or "entries" not in obj:
        raise LoadError("embeddings JSON must carry 'dim' and 'entries'")
    dim = obj["dim"]
    entries = obj["entries"]
    if not isinstance(dim, int) or dim < 2:
        raise LoadError("embeddings dim must be an integer >= 2")
    if not isinstance(entries, list) or not entries:
        raise LoadError("embeddings entries must be a nonempty list")
    nouns: list[str] = []
    rows = np.empty((len(entries), dim), dtype=np.float64)
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "noun" not in entry or "vec" not in entry:
            raise LoadError(f"entry {i} must carry 'noun' and 'vec'")
        noun = entry["noun"]
        vec = entry["vec"]
        if not isinstance(noun, str) or not noun:
            raise LoadError(f"entry {i} noun must be a nonempty string")
        if not isinstance(vec, list) or len(vec) != dim:
            raise LoadError(f"entry {i} vector length differs from dim {dim}")
        arr = np.asarray(vec, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise LoadError(f"entry {i} ({noun!r}) contains non-finite values")
        nouns.append(noun)
        rows[i] = arr
    if len(set(nouns)) != len(nouns):
        raise LoadError("duplicate nouns in embeddings file")
    try:
        rows = l2_normalize(rows)  # rows re-normalized on load
    except ValueError as exc:
        raise LoadError(f"embeddings file contains a zero row: {exc}") from exc
    return TextEmbeddings(tuple(nouns), rows)


def load_embeddings(path) -> TextEmbeddings:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read embeddings file {path}: {exc}") from exc
    return embeddings_from_json(obj)


def bake_offline_vocabulary(emb: TextEmbeddings, path) -> None:
    """Write embeddings to disk for prompt-free inference.

    The baked file is everything the detection and re-parameterization
    paths need; no encoder runs at inference time.
    """
    write_text_atomic(str(path), json.dumps(embeddings_to_json(emb), indent=2) + "\n")


def vocabulary_to_json(vocab: Vocabulary, m: int = DEFAULT_MAX_VOCAB) -> dict:
    return {
        "m": m,
        "entries": [
            {"noun": n, "origin": o} for n, o in zip(vocab.entries, vocab.origins)
        ],
    }


def vocabulary_from_json(obj) -> Vocabulary:
    if not isinstance(obj, dict) or "entries" not in obj:
        raise LoadError("vocabulary JSON must carry 'entries'")
    entries = []
    origins = []
    for i, entry in enumerate(obj["entries"]):
        if not isinstance(entry, dict) or "noun" not in entry or "origin" not in entry:
            raise LoadError(f"vocabulary entry {i} must carry 'noun' and 'origin'")
        entries.append(entry["noun"])
        origins.append(entry["origin"])
    return Vocabulary(tuple(entries), tuple(origins))


def save_vocabulary(vocab: Vocabulary, path, m: int = DEFAULT_MAX_VOCAB) -> None:
    write_text_atomic(str(path), json.dumps(vocabulary_to_json(vocab, m), indent=2) + "\n")


def load_vocabulary(path) -> Vocabulary:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read vocabulary file {path}: {exc}") from exc
    return vocabulary_from_json(obj)
