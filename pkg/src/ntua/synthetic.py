"""Seeded synthetic embedding problems with controllable pseudo-label noise.

Randomness comes from numpy's PCG64 generator. Independent child streams
(``SeedSequence.spawn``) drive class directions, classifier, train pool,
test split and label noise, so the test split and classifier for a seed do
not change when only the shot count changes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_store import (
    BundleManifest,
    ClassifierWeights,
    EmbeddingSet,
    GroundTruthLabels,
    dump_json,
    read_classifier,
    read_embeddings,
    read_labels,
    read_manifest,
    write_classifier,
    write_embeddings,
    write_labels,
    write_manifest,
)
from .pseudo_labeling import PseudoLabelSet, read_pseudo_labels, write_pseudo_labels


@dataclass
class SynthSpec:
    num_classes: int = 10
    shots: int = 16
    dim: int = 64
    test_per_class: int = 100
    kappa: float = 3.0
    eta_s: float = 0.4
    eta_t: float = 0.1
    rho: float = 0.9
    seed: int = 0
    nested: bool = True
    teacher_kappa: float | None = 8.0  # None: same as kappa
    classifier_noise: float = 1.5  # norm of the perturbation applied to each class direction

    def validate(self) -> None:
        if self.num_classes < 1 or self.shots < 1 or self.test_per_class < 0:
            raise ValueError("num_classes and shots must be >= 1, test_per_class >= 0")
        if self.dim < self.num_classes:
            raise ValueError(f"dim {self.dim} < num_classes {self.num_classes}: cannot place separated directions")
        for name in ("eta_s", "eta_t", "rho"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.kappa > 0 or (self.teacher_kappa is not None and not self.teacher_kappa > 0):
            raise ValueError("kappa must be positive")
        if self.classifier_noise < 0:
            raise ValueError("classifier_noise must be non-negative")


@dataclass
class Bundle:
    classifier: ClassifierWeights
    train_student: EmbeddingSet
    train_teacher: EmbeddingSet
    test: EmbeddingSet
    test_labels: GroundTruthLabels
    train_labels: GroundTruthLabels | None = None
    student_pl: PseudoLabelSet | None = None
    teacher_pl: PseudoLabelSet | None = None
    spec: SynthSpec | None = None

    def __eq__(self, other):
        if not isinstance(other, Bundle):
            return NotImplemented
        return all(
            getattr(self, f) == getattr(other, f)
            for f in ("classifier", "train_student", "train_teacher", "test", "test_labels",
                      "train_labels", "student_pl", "teacher_pl")
        )


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _perturb(rng, directions, labels, kappa):
    noise = rng.standard_normal((labels.size, directions.shape[1]))
    return _unit(directions[labels] + noise / kappa).astype(np.float32)


def _confidences(rng, correct: np.ndarray, rho: float, num_classes: int) -> np.ndarray:
    """Scores mix an independent uniform with a correctness-shifted uniform.

    rho=0: independent of correctness; rho=1: correct scores in [0.5, 1),
    incorrect in [0, 0.5). Mapped into [1/N, 1) like a max-softmax value.
    """
    u = rng.random(correct.size)
    v = rng.random(correct.size)
    s = (1.0 - rho) * u + rho * (correct.astype(np.float64) + v) / 2.0
    floor = 1.0 / num_classes
    return floor + (1.0 - floor) * s if num_classes > 1 else np.ones(correct.size)


def generate(spec: SynthSpec) -> Bundle:
    spec.validate()
    n, k, d = spec.num_classes, spec.shots, spec.dim
    s_dir, s_clf, s_train, s_test, s_noise = np.random.SeedSequence(spec.seed).spawn(5)

    g = np.random.default_rng(s_dir).standard_normal((d, n))
    q, _ = np.linalg.qr(g)
    directions = q.T[:n]  # orthonormal rows

    clf_rng = np.random.default_rng(s_clf)
    pert = clf_rng.standard_normal((n, d))
    w = _unit(directions + spec.classifier_noise * _unit(pert)) if spec.classifier_noise else directions
    names = [f"class_{c}" for c in range(n)]
    classifier = ClassifierWeights(w.astype(np.float32), names)

    train_rng = np.random.default_rng(s_train)
    y_train = np.repeat(np.arange(n), k)
    student = _perturb(train_rng, directions, y_train, spec.kappa)
    teacher = _perturb(train_rng, directions, y_train, spec.teacher_kappa or spec.kappa)
    ids = [f"train-{i:05d}" for i in range(y_train.size)]

    test_rng = np.random.default_rng(s_test)
    y_test = np.repeat(np.arange(n), spec.test_per_class)
    test = _perturb(test_rng, directions, y_test, spec.kappa)

    noise_rng = np.random.default_rng(s_noise)
    m = y_train.size
    u_s = noise_rng.random(m)
    u_t = u_s if spec.nested else noise_rng.random(m)
    shift_s = noise_rng.integers(0, max(n - 1, 1), m)
    shift_t = shift_s if spec.nested else noise_rng.integers(0, max(n - 1, 1), m)
    flip_s = (u_s < spec.eta_s) & (n > 1)
    flip_t = (u_t < spec.eta_t) & (n > 1)
    if spec.nested:
        flip_t &= flip_s
    lab_s = np.where(flip_s, (y_train + 1 + shift_s) % n, y_train)
    lab_t = np.where(flip_t, (y_train + 1 + shift_t) % n, y_train)
    conf_s = _confidences(noise_rng, lab_s == y_train, spec.rho, n)
    conf_t = _confidences(noise_rng, lab_t == y_train, spec.rho, n)

    return Bundle(
        classifier=classifier,
        train_student=EmbeddingSet(student, ids),
        train_teacher=EmbeddingSet(teacher, ids),
        test=EmbeddingSet(test, [f"test-{i:05d}" for i in range(y_test.size)]),
        test_labels=GroundTruthLabels(y_test, n),
        train_labels=GroundTruthLabels(y_train, n),
        student_pl=PseudoLabelSet(lab_s, conf_s, ids, n, "synthetic"),
        teacher_pl=PseudoLabelSet(lab_t, conf_t, ids, n, "synthetic"),
        spec=spec,
    )


def confidence_gap(pl: PseudoLabelSet, truth: GroundTruthLabels) -> dict:
    """Mean confidence of correct vs incorrect pseudo-labels and their gap."""
    correct = pl.labels == truth.labels
    out = {"n_correct": int(correct.sum()), "n_incorrect": int((~correct).sum())}
    out["mean_correct"] = float(pl.confidences[correct].mean()) if correct.any() else None
    out["mean_incorrect"] = float(pl.confidences[~correct].mean()) if (~correct).any() else None
    if out["mean_correct"] is None or out["mean_incorrect"] is None:
        out["gap"] = None
    else:
        out["gap"] = out["mean_correct"] - out["mean_incorrect"]
    return out


def point_biserial(pl: PseudoLabelSet, truth: GroundTruthLabels) -> float:
    correct = (pl.labels == truth.labels).astype(np.float64)
    return float(np.corrcoef(correct, pl.confidences)[0, 1])


# ---------------------------------------------------------------------------
# bundle directories

FILES = {
    "classifier": "classifier.ntua",
    "train_student": "train_student.ntua",
    "train_teacher": "train_teacher.ntua",
    "test": "test.ntua",
    "test_labels": "test_labels.json",
    "train_labels": "train_labels.json",
    "student_pl": "student_pl.json",
    "teacher_pl": "teacher_pl.json",
}


def write_bundle(bundle: Bundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_classifier(bundle.classifier, out / FILES["classifier"])
    splits = {"classifier": bundle.classifier.num_classes}
    for name in ("train_student", "train_teacher", "test"):
        emb = getattr(bundle, name)
        write_embeddings(emb, out / FILES[name])
        splits[name] = emb.rows
    for name in ("test_labels", "train_labels"):
        lab = getattr(bundle, name)
        if lab is not None:
            write_labels(lab, out / FILES[name])
            splits[name] = lab.rows
    for name in ("student_pl", "teacher_pl"):
        pl = getattr(bundle, name)
        if pl is not None:
            write_pseudo_labels(pl, out / FILES[name])
            splits[name] = pl.rows
    manifest = BundleManifest(
        dim=bundle.classifier.dim,
        num_classes=bundle.classifier.num_classes,
        class_names=bundle.classifier.class_names,
        splits={name: {"path": FILES[name], "rows": rows} for name, rows in splits.items()},
        base_dir=out,
    )
    if bundle.spec is not None:
        dump_json(asdict(bundle.spec), out / "synth_spec.json")
    write_manifest(manifest, out / "manifest.json")
    return out / "manifest.json"


def read_bundle(manifest_path) -> Bundle:
    m = read_manifest(manifest_path)
    opt = lambda name, fn: fn(m.path(name)) if m.has(name) else None  # noqa: E731
    return Bundle(
        classifier=read_classifier(m.path("classifier")),
        train_student=read_embeddings(m.path("train_student")),
        train_teacher=read_embeddings(m.path("train_teacher")),
        test=read_embeddings(m.path("test")),
        test_labels=read_labels(m.path("test_labels")),
        train_labels=opt("train_labels", read_labels),
        student_pl=opt("student_pl", read_pseudo_labels),
        teacher_pl=opt("teacher_pl", read_pseudo_labels),
    )
