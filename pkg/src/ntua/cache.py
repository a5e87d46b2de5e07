"""Weighted key-value cache and its logit formulas."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .data_store import (
    EmbeddingSet,
    FormatError,
    _read_bytes,
    _write_bytes,
    check_unit_rows,
    decode_block,
    encode_block,
)
from .pseudo_labeling import PseudoLabelSet, ShotSelection, zero_shot_logits

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 5.5
FALLBACK = "fallback"
SAMPLE = "sample"


def phi(x, beta: float):
    """Affinity map exp(-beta * (1 - x))."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return np.exp(-beta * (1.0 - np.asarray(x, dtype=np.float64)))


@dataclass
class WeightedCache:
    keys: np.ndarray  # (M, d) float32
    labels: np.ndarray  # (M,) int class of each one-hot value row
    weights: np.ndarray  # (M,) float64 in (0, 1]
    num_classes: int
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    row_ids: list[str] | None = None
    provenance: list[str] | None = None

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = self.keys.shape[0]
        if self.row_ids is None:
            self.row_ids = [f"row{i}" for i in range(m)]
        if self.provenance is None:
            self.provenance = [SAMPLE] * m
        if not (self.labels.size == self.weights.size == len(self.row_ids) == len(self.provenance) == m):
            raise FormatError("cache arrays differ in length")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError("cache value out of class range")
        if not np.all((self.weights > 0) & (self.weights <= 1)):
            raise FormatError("cache weights must lie in (0, 1]")

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @property
    def values(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def is_fallback(self) -> np.ndarray:
        return np.array([p == FALLBACK for p in self.provenance], dtype=bool)

    def with_keys(self, keys: np.ndarray) -> "WeightedCache":
        return replace(self, keys=np.asarray(keys, dtype=np.float32))

    def __eq__(self, other):
        if not isinstance(other, WeightedCache):
            return NotImplemented
        return (
            self.keys.shape == other.keys.shape
            and self.keys.tobytes() == other.keys.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.weights.tobytes() == other.weights.tobytes()
            and self.num_classes == other.num_classes
            and self.alpha == other.alpha
            and self.beta == other.beta
            and self.row_ids == other.row_ids
            and self.provenance == other.provenance
        )


def build_cache(
    selection: ShotSelection,
    features: EmbeddingSet,
    pl: PseudoLabelSet,
    fallback=None,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> WeightedCache:
    """Stack selected samples (class-major, most confident first) then fallback rows."""
    if features.rows != pl.rows:
        raise ValueError("features and pseudo-labels differ in row count")
    idx = np.array([i for _, i in selection.selected], dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= features.rows):
        raise ValueError("selection index out of range")
    keys = [features.features[idx]]
    labels = [pl.labels[idx]]
    weights = [pl.confidences[idx]]
    row_ids = [pl.sample_ids[i] for i in idx]
    provenance = [SAMPLE] * idx.size
    if fallback is not None:
        fk, fl, fc = fallback
        fk = np.asarray(fk, dtype=np.float32).reshape(-1, features.dim)
        if fk.shape[0] and fk.shape[1] != features.dim:
            raise ValueError("fallback rows dimension mismatch")
        keys.append(fk)
        labels.append(np.asarray(fl, dtype=np.int64))
        weights.append(np.asarray(fc, dtype=np.float64))
        counts: dict[int, int] = {}
        for c in np.asarray(fl).tolist():
            row_ids.append(f"{FALLBACK}:{c}:{counts.get(c, 0)}")
            counts[c] = counts.get(c, 0) + 1
        provenance += [FALLBACK] * fk.shape[0]
    keys = np.concatenate(keys, axis=0)
    if keys.shape[0] == 0:
        raise ValueError("empty cache: no selected samples and no fallback rows")
    check_unit_rows(keys)
    return WeightedCache(
        keys, np.concatenate(labels), np.concatenate(weights), pl.num_classes,
        float(alpha), float(beta), row_ids, provenance,
    )


def affinities(queries, keys, beta: float) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = np.asarray(keys, dtype=np.float64)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"dimension mismatch: query d={q.shape[1]}, cache d={k.shape[1]}")
    return phi(q @ k.T, beta)


def cache_logits(queries, cache: WeightedCache, use_weights: bool = True, keys=None) -> np.ndarray:
    """alpha * phi(q K^T) [* weights] @ values, one row per query.

    ``keys`` overrides the cache keys (used while training in float64).
    """
    a = affinities(queries, cache.keys if keys is None else keys, cache.beta)
    if use_weights:
        a = a * cache.weights[None, :]
    return cache.alpha * (a @ cache.values)


def adapter_logits(queries, cache: WeightedCache, w, use_weights: bool = True, keys=None) -> np.ndarray:
    """Cache logits plus the zero-shot term q W^T."""
    return cache_logits(queries, cache, use_weights, keys) + zero_shot_logits(np.atleast_2d(queries), w)


def refine_cache(cache: WeightedCache, teacher_pl: PseudoLabelSet) -> WeightedCache:
    """Replace values and weights of sample rows with the teacher's predictions."""
    if teacher_pl.num_classes != cache.num_classes:
        raise ValueError("teacher pseudo-labels use a different class count")
    lookup = teacher_pl.index_of()
    labels = cache.labels.copy()
    weights = cache.weights.copy()
    for r, (rid, prov) in enumerate(zip(cache.row_ids, cache.provenance)):
        if prov == FALLBACK:
            continue
        if rid not in lookup:
            raise KeyError(f"no teacher prediction for cached sample {rid!r}")
        j = lookup[rid]
        labels[r] = teacher_pl.labels[j]
        weights[r] = teacher_pl.confidences[j]
    return replace(cache, labels=labels, weights=weights)


# ---------------------------------------------------------------------------
# persistence: key matrix block + length-prefixed JSON trailer


def write_cache(cache: WeightedCache, path) -> None:
    meta = {
        "alpha": cache.alpha,
        "beta": cache.beta,
        "num_classes": cache.num_classes,
        "labels": cache.labels.tolist(),
        "weights": cache.weights.tolist(),
        "provenance": cache.provenance,
    }
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
    data = encode_block(cache.keys, cache.row_ids) + struct.pack("<I", len(trailer)) + trailer
    _write_bytes(path, data)


def read_cache(path) -> WeightedCache:
    buf = _read_bytes(path)
    keys, ids, pos = decode_block(buf)
    if len(buf) - pos < 4:
        raise FormatError("cache file missing metadata trailer")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) - pos < n:
        raise FormatError("truncated cache metadata")
    try:
        meta = json.loads(buf[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt cache metadata: {exc}") from exc
    return WeightedCache(
        keys, meta["labels"], meta["weights"], meta["num_classes"],
        meta["alpha"], meta["beta"], ids, meta["provenance"],
    )
