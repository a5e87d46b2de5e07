from dataclasses import replace

import numpy as np
import pytest
from conftest import random_cache, random_classifier, random_embeddings, unit_rows

from ntua.cache import WeightedCache, adapter_logits
from ntua.data_store import EmbeddingSet, GroundTruthLabels
from ntua.evaluation import (
    VARIANTS,
    PipelineConfig,
    evaluate,
    initial_cache,
    run_ablation,
    run_pipeline,
    zero_shot_accuracy,
)
from ntua.pseudo_labeling import PseudoLabelSet
from ntua.synthetic import SynthSpec, generate
from ntua.trainer import TrainConfig

FAST = PipelineConfig(train=TrainConfig(epochs=3))


def test_alpha_zero_gives_zero_shot_accuracy(rng):
    cache = random_cache(rng, 4, 3, 8, alpha=0.0)
    w = random_classifier(rng, 4, 8)
    test = random_embeddings(rng, 50, 8)
    y = GroundTruthLabels(rng.integers(0, 4, 50), 4)
    assert evaluate(cache, test, y, w).accuracy == zero_shot_accuracy(test, y, w)


def test_self_retrieval_dominates(rng):
    keys = unit_rows(rng, 12, 16)
    labels = rng.integers(0, 4, 12)
    cache = WeightedCache(keys, labels, np.ones(12), 4, alpha=50.0, beta=20.0)
    rep = evaluate(cache, EmbeddingSet(keys, [str(i) for i in range(12)]), GroundTruthLabels(labels, 4),
                   random_classifier(rng, 4, 16))
    assert rep.accuracy == 1.0


def test_single_row(rng):
    cache = random_cache(rng, 2, 2, 4)
    rep = evaluate(cache, random_embeddings(rng, 1, 4), GroundTruthLabels([1], 2), random_classifier(rng, 2, 4))
    assert rep.accuracy in (0.0, 1.0)


def test_report_consistency(rng):
    cache = random_cache(rng, 5, 3, 8)
    w = random_classifier(rng, 5, 8)
    test = random_embeddings(rng, 80, 8)
    y = GroundTruthLabels(rng.integers(0, 5, 80), 5)
    rep = evaluate(cache, test, y, w, report_alternate=True)
    assert rep.accuracy == rep.correct / rep.total
    weighted = sum(a * n for a, n in zip(rep.per_class_accuracy, rep.class_counts) if a is not None)
    assert weighted / rep.total == pytest.approx(rep.accuracy, abs=1e-12)
    assert sum(map(sum, rep.confusion)) == 80
    assert rep.alternate_accuracy is not None


def test_positive_scaling_keeps_predictions(rng):
    cache = random_cache(rng, 4, 3, 8)
    w = random_classifier(rng, 4, 8)
    q = unit_rows(rng, 30, 8)
    z = adapter_logits(q, cache, w, False)
    np.testing.assert_array_equal((z * 3.7).argmax(1), z.argmax(1))


def test_order_independent(rng):
    cache = random_cache(rng, 4, 3, 8)
    w = random_classifier(rng, 4, 8)
    test = random_embeddings(rng, 40, 8)
    y = rng.integers(0, 4, 40)
    perm = rng.permutation(40)
    a = evaluate(cache, test, GroundTruthLabels(y, 4), w)
    b = evaluate(cache, EmbeddingSet(test.features[perm], [test.sample_ids[i] for i in perm]),
                 GroundTruthLabels(y[perm], 4), w)
    assert a.accuracy == b.accuracy and a.confusion == b.confusion


def test_empty_test_set(rng):
    with pytest.raises(ValueError, match="empty"):
        evaluate(random_cache(rng, 2, 2, 4), EmbeddingSet(np.zeros((0, 4)), []),
                 GroundTruthLabels([], 2), random_classifier(rng, 2, 4))


def test_identical_teacher_makes_kc_equal_kcr():
    b = generate(SynthSpec(shots=4, test_per_class=10, seed=0))
    ones = PseudoLabelSet(b.student_pl.labels, np.ones(b.student_pl.rows), b.student_pl.sample_ids, 10, "synthetic")
    b = replace(b, student_pl=ones, teacher_pl=ones)
    res = run_ablation(b, replace(FAST, shots=4))
    assert res.accuracies["KC"] == res.accuracies["KCR"]


def test_unit_omega_makes_last_two_variants_equal():
    b = generate(SynthSpec(shots=4, test_per_class=10, eta_t=0.0, seed=1))
    # identical teacher features per class -> every omega equals 1
    truth = b.train_labels.labels
    teacher = EmbeddingSet(b.classifier.matrix[truth], b.train_teacher.sample_ids)
    b = replace(b, train_teacher=teacher)
    cfg = replace(FAST, shots=4)
    res = run_pipeline(b, cfg.variant("KCR+CKC+omega"))
    np.testing.assert_allclose(res.omega, 1.0, atol=1e-6)
    acc = run_ablation(b, cfg).accuracies
    assert acc["KCR+CKC"] == acc["KCR+CKC+omega"]


def test_variants_share_initial_keys():
    b = generate(SynthSpec(shots=4, test_per_class=5, seed=2))
    keys = {run_pipeline(b, FAST.variant(v)).initial_cache.keys.tobytes() for v in VARIANTS}
    assert len(keys) == 1
    assert initial_cache(b, FAST).keys.tobytes() in keys


def test_perfect_teacher_helps_on_most_seeds():
    wins = 0
    for seed in range(20):
        b = generate(SynthSpec(shots=8, test_per_class=50, eta_s=0.4, eta_t=0.0, seed=seed))
        cfg = replace(FAST, shots=8, train=TrainConfig(epochs=5, seed=seed))
        kc = run_pipeline(b, cfg.variant("KC")).eval_report.accuracy
        kcr = run_pipeline(b, cfg.variant("KCR")).eval_report.accuracy
        wins += kcr >= kc
    assert wins >= 16
