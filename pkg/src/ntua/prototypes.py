"""Class prototypes and prototype-affinity loss weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import FALLBACK, WeightedCache
from .data_store import EmbeddingSet, dump_json, load_json
from .pseudo_labeling import PseudoLabelSet


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (N, d), not renormalised
    counts: np.ndarray  # (N,)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def _cached_rows(teacher_features: EmbeddingSet, teacher_pl: PseudoLabelSet, row_ids):
    """Teacher feature rows and labels for the given sample ids (all rows if None)."""
    feats = np.asarray(teacher_features.features, dtype=np.float64)
    if row_ids is None:
        return feats, teacher_pl.labels
    f_idx = teacher_features.index_of()
    l_idx = teacher_pl.index_of()
    missing = [r for r in row_ids if r not in f_idx or r not in l_idx]
    if missing:
        raise KeyError(f"no teacher feature/label for cached sample {missing[0]!r}")
    return (
        feats[[f_idx[r] for r in row_ids]].reshape(-1, feats.shape[1]),
        teacher_pl.labels[[l_idx[r] for r in row_ids]],
    )


def sample_row_ids(cache: WeightedCache) -> list[str]:
    return [rid for rid, p in zip(cache.row_ids, cache.provenance) if p != FALLBACK]


def compute_prototypes(
    teacher_features: EmbeddingSet,
    teacher_pl: PseudoLabelSet,
    row_ids: list[str] | None = None,
) -> PrototypeSet:
    """Per-class mean of teacher features, restricted to ``row_ids`` when given.

    Classes without members get a zero prototype and count 0.
    """
    feats, labels = _cached_rows(teacher_features, teacher_pl, row_ids)
    n = teacher_pl.num_classes
    sums = np.zeros((n, feats.shape[1]))
    np.add.at(sums, labels, feats)
    counts = np.bincount(labels, minlength=n)
    protos = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return PrototypeSet(protos, counts)


def affinity_weights(
    teacher_features: EmbeddingSet,
    teacher_pl: PseudoLabelSet,
    protos: PrototypeSet,
    row_ids: list[str] | None = None,
) -> np.ndarray:
    """omega_i = max(0, f_i . prototype[label_i]) for each requested sample."""
    feats, labels = _cached_rows(teacher_features, teacher_pl, row_ids)
    omega = np.einsum("ij,ij->i", feats, protos.prototypes[labels])
    omega = np.maximum(omega, 0.0)
    omega[protos.counts[labels] == 0] = 0.0
    return omega


def cache_omega(cache: WeightedCache, teacher_features: EmbeddingSet, teacher_pl: PseudoLabelSet) -> np.ndarray:
    """Omega aligned to cache rows; fallback rows get 1."""
    ids = sample_row_ids(cache)
    protos = compute_prototypes(teacher_features, teacher_pl, ids)
    per_sample = dict(zip(ids, affinity_weights(teacher_features, teacher_pl, protos, ids)))
    return np.array(
        [1.0 if p == FALLBACK else per_sample[rid] for rid, p in zip(cache.row_ids, cache.provenance)]
    )


def write_omega(omega: np.ndarray, row_ids: list[str], path) -> None:
    dump_json({"row_ids": list(row_ids), "omega": np.asarray(omega, dtype=np.float64).tolist()}, path)


def read_omega(path) -> tuple[np.ndarray, list[str]]:
    d = load_json(path)
    return np.asarray(d["omega"], dtype=np.float64), list(d["row_ids"])
