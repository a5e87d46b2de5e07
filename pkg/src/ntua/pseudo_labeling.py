"""Zero-shot pseudo-labels, confidences and per-class top-k shot selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_store import ClassifierWeights, EmbeddingSet, FormatError, dump_json, load_json

DEFAULT_TEMPERATURE = 0.01
SOURCE_TAGS = ("student", "teacher", "synthetic")


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    confidences: np.ndarray
    sample_ids: list[str]
    num_classes: int
    source_tag: str = "student"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        self.sample_ids = [str(s) for s in self.sample_ids]
        if not (self.labels.size == self.confidences.size == len(self.sample_ids)):
            raise FormatError("labels, confidences and sample ids differ in length")
        if self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise FormatError("pseudo-label out of class range")
            if not np.all((self.confidences > 0) & (self.confidences <= 1)):
                raise FormatError("confidences must lie in (0, 1]")
        if self.source_tag not in SOURCE_TAGS:
            raise FormatError(f"unknown source tag {self.source_tag!r}")

    @property
    def rows(self) -> int:
        return self.labels.size

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def __eq__(self, other):
        if not isinstance(other, PseudoLabelSet):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.source_tag == other.source_tag
            and self.sample_ids == other.sample_ids
            and np.array_equal(self.labels, other.labels)
            and self.confidences.tobytes() == other.confidences.tobytes()
        )


@dataclass
class ShotSelection:
    shots_per_class: int
    selected: list[tuple[int, int]]
    padded: dict[int, int] = field(default_factory=dict)  # class -> missing count

    def __post_init__(self):
        self.selected = [(int(c), int(i)) for c, i in self.selected]
        self.padded = {int(c): int(n) for c, n in self.padded.items()}
        idx = [i for _, i in self.selected]
        if len(set(idx)) != len(idx):
            raise FormatError("selected sample indices must be unique")


def zero_shot_logits(features, w) -> np.ndarray:
    """Dot products of every feature row with every classifier row (m x N)."""
    f = features.features if isinstance(features, EmbeddingSet) else features
    wm = w.matrix if isinstance(w, ClassifierWeights) else w
    f = np.asarray(f, dtype=np.float64)
    wm = np.asarray(wm, dtype=np.float64)
    if f.ndim == 1:
        f = f[None, :]
    if f.shape[1] != wm.shape[1]:
        raise ValueError(f"dimension mismatch: features d={f.shape[1]}, classifier d={wm.shape[1]}")
    return f @ wm.T


def softmax_probs(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_pseudo_labels(
    features: EmbeddingSet,
    w: ClassifierWeights,
    temperature: float = DEFAULT_TEMPERATURE,
    source_tag: str = "student",
) -> PseudoLabelSet:
    probs = softmax_probs(zero_shot_logits(features, w), temperature)
    labels = probs.argmax(axis=1)  # first maximum wins
    conf = probs[np.arange(probs.shape[0]), labels]
    return PseudoLabelSet(labels, conf, features.sample_ids, w.num_classes, source_tag)


def select_top_k(pl: PseudoLabelSet, k: int) -> ShotSelection:
    """Keep the ``k`` most confident samples per pseudo-class.

    Classes with fewer than ``k`` candidates keep all of them and are
    reported in ``padded`` with their shortfall.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    selected = []
    padded = {}
    for c in range(pl.num_classes):
        idx = np.flatnonzero(pl.labels == c)
        # stable sort on -confidence keeps lower indices first among ties
        order = idx[np.argsort(-pl.confidences[idx], kind="stable")]
        chosen = order[:k]
        selected.extend((c, int(i)) for i in chosen)
        if chosen.size < k:
            padded[c] = k - chosen.size
    return ShotSelection(k, selected, padded)


def fallback_rows(w: ClassifierWeights, padded: dict[int, int]):
    """Classifier rows standing in for missing samples: (keys, labels, confidences)."""
    classes = [c for c in sorted(padded) for _ in range(padded[c])]
    for c in classes:
        if not 0 <= c < w.num_classes:
            raise ValueError(f"padded class {c} out of range")
    keys = w.matrix[classes].astype(np.float32) if classes else np.zeros((0, w.dim), np.float32)
    return keys, np.asarray(classes, dtype=np.int64), np.ones(len(classes))


# ---------------------------------------------------------------------------
# persistence


def write_pseudo_labels(pl: PseudoLabelSet, path) -> None:
    dump_json(
        {
            "num_classes": pl.num_classes,
            "source_tag": pl.source_tag,
            "sample_ids": pl.sample_ids,
            "labels": pl.labels.tolist(),
            "confidences": pl.confidences.tolist(),
        },
        path,
    )


def read_pseudo_labels(path) -> PseudoLabelSet:
    d = load_json(path)
    return PseudoLabelSet(d["labels"], d["confidences"], d["sample_ids"], d["num_classes"], d["source_tag"])


def write_selection(sel: ShotSelection, path) -> None:
    dump_json(
        {
            "shots_per_class": sel.shots_per_class,
            "selected": [list(p) for p in sel.selected],
            "padded": {str(c): n for c, n in sel.padded.items()},
        },
        path,
    )


def read_selection(path) -> ShotSelection:
    d = load_json(path)
    return ShotSelection(d["shots_per_class"], [tuple(p) for p in d["selected"]], d["padded"])
