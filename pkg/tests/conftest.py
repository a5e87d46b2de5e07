import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ntua.cache import WeightedCache  # noqa: E402
from ntua.data_store import ClassifierWeights, EmbeddingSet  # noqa: E402


def unit_rows(rng, m, d):
    x = rng.standard_normal((m, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def random_cache(rng, n, k, d, alpha=1.0, beta=5.5, weights=None):
    m = n * k
    labels = rng.integers(0, n, m)
    if weights is None:
        weights = rng.uniform(0.1, 1.0, m)
    return WeightedCache(unit_rows(rng, m, d), labels, weights, n, alpha, beta)


def random_classifier(rng, n, d):
    return ClassifierWeights(unit_rows(rng, n, d), [f"c{i}" for i in range(n)])


def random_embeddings(rng, m, d, prefix="s"):
    return EmbeddingSet(unit_rows(rng, m, d), [f"{prefix}{i}" for i in range(m)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def cli_pipeline(out_dir, seed, shots=8, test_per_class=20, epochs=4):
    """Run every stage through the CLI, writing all artifacts under ``out_dir``."""
    from ntua.cli import main

    d = Path(out_dir)
    b = d / "bundle"
    steps = [
        ("synth", "--shots", shots, "--test-per-class", test_per_class, "--seed", seed, "--out", b),
        ("select", "--pl", b / "student_pl.json", "--k", shots, "--out", d / "sel.json"),
        ("build-cache", "--sel", d / "sel.json", "--features", b / "train_student.ntua",
         "--pl", b / "student_pl.json", "--classifier", b / "classifier.ntua", "--out", d / "c0.ntua"),
        ("refine", "--cache", d / "c0.ntua", "--teacher-pl", b / "teacher_pl.json", "--out", d / "c1.ntua"),
        ("weights", "--teacher-features", b / "train_teacher.ntua", "--teacher-pl", b / "teacher_pl.json",
         "--cache", d / "c1.ntua", "--out", d / "omega.json"),
        ("train", "--cache", d / "c1.ntua", "--features", b / "train_student.ntua", "--omega", d / "omega.json",
         "--classifier", b / "classifier.ntua", "--epochs", epochs, "--seed", seed,
         "--out", d / "c2.ntua", "--report", d / "train.json"),
        ("eval", "--cache", d / "c2.ntua", "--features", b / "test.ntua", "--labels", b / "test_labels.json",
         "--classifier", b / "classifier.ntua", "--out", d / "eval.json"),
    ]
    for step in steps:
        code = main([str(a) for a in step])
        assert code == 0, (step, code)
    return d
