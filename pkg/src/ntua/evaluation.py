"""Accuracy reports, the end-to-end pipeline and the four-variant ablation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cache import DEFAULT_ALPHA, DEFAULT_BETA, WeightedCache, adapter_logits, build_cache, refine_cache
from .data_store import ClassifierWeights, EmbeddingSet, GroundTruthLabels
from .prototypes import cache_omega
from .pseudo_labeling import DEFAULT_TEMPERATURE, fallback_rows, make_pseudo_labels, select_top_k
from .synthetic import Bundle
from .trainer import TrainConfig, TrainReport, train_keys, training_queries

VARIANTS = ("KC", "KCR", "KCR+CKC", "KCR+CKC+omega")


@dataclass
class EvalReport:
    split: str
    accuracy: float
    per_class_accuracy: list[float | None]
    class_counts: list[int]
    confusion: list[list[int]]
    use_weights: bool
    correct: int
    total: int
    config: dict = field(default_factory=dict)
    alternate_accuracy: float | None = None  # the other inference mode, when requested

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy"] = round(self.accuracy, 4)
        d["per_class_accuracy"] = [None if a is None else round(a, 4) for a in self.per_class_accuracy]
        if self.alternate_accuracy is not None:
            d["alternate_accuracy"] = round(self.alternate_accuracy, 4)
        return d


def predict(cache: WeightedCache, queries, w: ClassifierWeights, use_weights: bool = False) -> np.ndarray:
    return adapter_logits(queries, cache, w, use_weights).argmax(axis=1)


def accuracy_report(pred: np.ndarray, truth: np.ndarray, num_classes: int, split: str = "test", use_weights: bool = False, config=None) -> EvalReport:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    counts = conf.sum(axis=1)
    per_class = [None if counts[c] == 0 else float(conf[c, c] / counts[c]) for c in range(num_classes)]
    correct = int(np.trace(conf))
    return EvalReport(
        split=split,
        accuracy=correct / truth.size,
        per_class_accuracy=per_class,
        class_counts=counts.tolist(),
        confusion=conf.tolist(),
        use_weights=use_weights,
        correct=correct,
        total=int(truth.size),
        config=dict(config or {}),
    )


def evaluate(
    cache: WeightedCache,
    test: EmbeddingSet,
    labels: GroundTruthLabels,
    w: ClassifierWeights,
    use_weights: bool = False,
    split: str = "test",
    report_alternate: bool = False,
) -> EvalReport:
    """Top-1 accuracy of argmax adapter logits. Default inference leaves cache weights out."""
    if test.rows == 0:
        raise ValueError("empty test set")
    if test.rows != labels.rows:
        raise ValueError("test features and labels differ in length")
    if test.dim != cache.dim or w.dim != cache.dim:
        raise ValueError("dimension mismatch between test features, cache and classifier")
    if labels.labels.max() >= cache.num_classes:
        raise ValueError("test label out of class range")
    pred = predict(cache, test.features, w, use_weights)
    rep = accuracy_report(pred, labels.labels, cache.num_classes, split, use_weights,
                          {"alpha": cache.alpha, "beta": cache.beta, "cache_rows": cache.size})
    if report_alternate:
        alt = predict(cache, test.features, w, not use_weights)
        rep.alternate_accuracy = float(np.mean(alt == labels.labels))
    return rep


def zero_shot_accuracy(test: EmbeddingSet, labels: GroundTruthLabels, w: ClassifierWeights) -> float:
    pred = (test.features.astype(np.float64) @ w.matrix.astype(np.float64).T).argmax(axis=1)
    return float(np.mean(pred == labels.labels))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineConfig:
    shots: int = 16
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    temperature: float = DEFAULT_TEMPERATURE
    refine: bool = True
    use_weights: bool = True  # confidence weights in the cache during training
    use_omega: bool = True
    inference_weights: bool | None = False  # None: follow use_weights
    train: TrainConfig = field(default_factory=TrainConfig)

    def variant(self, name: str) -> "PipelineConfig":
        flags = {
            "KC": (False, False, False),
            "KCR": (True, False, False),
            "KCR+CKC": (True, True, False),
            "KCR+CKC+omega": (True, True, True),
        }[name]
        return replace(self, refine=flags[0], use_weights=flags[1], use_omega=flags[2])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    cache: WeightedCache
    initial_cache: WeightedCache
    omega: np.ndarray
    train_report: TrainReport
    eval_report: EvalReport


def pseudo_labels_for(bundle: Bundle, temperature: float):
    student = bundle.student_pl or make_pseudo_labels(bundle.train_student, bundle.classifier, temperature, "student")
    teacher = bundle.teacher_pl or make_pseudo_labels(bundle.train_teacher, bundle.classifier, temperature, "teacher")
    return student, teacher


def initial_cache(bundle: Bundle, cfg: PipelineConfig) -> WeightedCache:
    student, _ = pseudo_labels_for(bundle, cfg.temperature)
    sel = select_top_k(student, cfg.shots)
    fb = fallback_rows(bundle.classifier, sel.padded)
    return build_cache(sel, bundle.train_student, student, fb, cfg.alpha, cfg.beta)


def run_pipeline(bundle: Bundle, cfg: PipelineConfig) -> PipelineResult:
    """Select, build, optionally refine, weight and train; then evaluate on the test split."""
    student, teacher = pseudo_labels_for(bundle, cfg.temperature)
    cache0 = initial_cache(bundle, cfg)
    cache = refine_cache(cache0, teacher) if cfg.refine else cache0
    if cfg.use_omega:
        omega = cache_omega(cache, bundle.train_teacher, teacher if cfg.refine else student)
    else:
        omega = np.ones(cache.size)
    tcfg = replace(cfg.train, use_weights_in_loss=cfg.use_weights, include_omega=cfg.use_omega)
    queries = training_queries(cache, bundle.train_student, bundle.classifier)
    trained, report = train_keys(cache, queries, cache.labels, omega, bundle.classifier, tcfg)
    inf = cfg.use_weights if cfg.inference_weights is None else cfg.inference_weights
    ev = evaluate(trained, bundle.test, bundle.test_labels, bundle.classifier, inf,
                  report_alternate=inf != cfg.use_weights)
    ev.config.update(cfg.to_dict())
    return PipelineResult(trained, cache, omega, report, ev)


@dataclass
class AblationResult:
    accuracies: dict[str, float]
    seed: int
    data: dict = field(default_factory=dict)
    train_losses: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": self.data,
            "accuracies": {k: round(v, 4) for k, v in self.accuracies.items()},
            "final_losses": self.train_losses,
        }


def run_ablation(bundle: Bundle, cfg: PipelineConfig) -> AblationResult:
    """KC, KCR, KCR+CKC and KCR+CKC+omega on identical data and seed."""
    acc, losses = {}, {}
    for name in VARIANTS:
        res = run_pipeline(bundle, cfg.variant(name))
        acc[name] = res.eval_report.accuracy
        losses[name] = res.train_report.final_loss
    data = {
        "train_rows": bundle.train_student.rows,
        "test_rows": bundle.test.rows,
        "num_classes": bundle.classifier.num_classes,
        "dim": bundle.classifier.dim,
        "zero_shot_accuracy": round(zero_shot_accuracy(bundle.test, bundle.test_labels, bundle.classifier), 4),
    }
    return AblationResult(acc, cfg.train.seed, data, losses)
