import math

import numpy as np
import pytest
from conftest import random_classifier, random_embeddings
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ntua.data_store import ClassifierWeights, EmbeddingSet
from ntua.pseudo_labeling import (
    PseudoLabelSet,
    fallback_rows,
    make_pseudo_labels,
    read_pseudo_labels,
    read_selection,
    select_top_k,
    softmax_probs,
    write_pseudo_labels,
    write_selection,
    zero_shot_logits,
)


def basis(n, d):
    return ClassifierWeights(np.eye(d)[:n], [f"c{i}" for i in range(n)])


class TestZeroShotLogits:
    def test_basis(self):
        f = EmbeddingSet(np.eye(4)[:1], ["a"])
        np.testing.assert_array_equal(zero_shot_logits(f, basis(4, 4)), [[1, 0, 0, 0]])

    def test_orthogonal(self):
        f = EmbeddingSet(np.array([[0, 0, 0, 1.0]]), ["a"])
        np.testing.assert_array_equal(zero_shot_logits(f, basis(3, 4)), [[0, 0, 0]])

    def test_matches_loop_oracle(self, rng):
        f = random_embeddings(rng, 3, 4)
        w = random_classifier(rng, 2, 4)
        ref = oracles.zero_shot_logits(f.features, w.matrix)
        np.testing.assert_allclose(zero_shot_logits(f, w), ref, atol=1e-6)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension"):
            zero_shot_logits(random_embeddings(rng, 2, 4), random_classifier(rng, 2, 5))


class TestSoftmax:
    def test_symmetric(self):
        for t in (0.01, 1.0, 7.0):
            np.testing.assert_allclose(softmax_probs([[0.0, 0.0]], t), [[0.5, 0.5]])

    def test_two_class_value(self):
        e = math.e
        np.testing.assert_allclose(softmax_probs([[1.0, 0.0]], 1.0), [[e / (e + 1), 1 / (e + 1)]], rtol=1e-12)
        assert softmax_probs([[1.0, 0.0]], 1.0)[0, 0] == pytest.approx(0.73106, abs=1e-5)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            softmax_probs([[0.0, np.inf]])
        with pytest.raises(ValueError):
            softmax_probs([[0.0, 1.0]], 0.0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), st.floats(-50, 50), st.floats(0.01, 10))
    def test_shift_invariance_and_normalisation(self, z, c, t):
        p = softmax_probs(z, t)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p >= 0)
        np.testing.assert_allclose(softmax_probs(z + c, t), p, atol=1e-9)


class TestMakePseudoLabels:
    def test_tie_breaks_to_lowest(self):
        f = EmbeddingSet(np.array([[0, 0, 1.0]]), ["a"])
        pl = make_pseudo_labels(f, basis(2, 3), 1.0)
        assert pl.labels.tolist() == [0]
        assert pl.confidences[0] == 0.5

    def test_single_class(self, rng):
        f = random_embeddings(rng, 4, 3)
        pl = make_pseudo_labels(f, basis(1, 3), 0.01)
        assert pl.labels.tolist() == [0] * 4
        np.testing.assert_array_equal(pl.confidences, 1.0)

    def test_matches_softmax_composition(self, rng):
        f = random_embeddings(rng, 20, 6)
        w = random_classifier(rng, 5, 6)
        p = softmax_probs(zero_shot_logits(f, w), 0.05)
        pl = make_pseudo_labels(f, w, 0.05)
        np.testing.assert_array_equal(pl.labels, p.argmax(1))
        np.testing.assert_array_equal(pl.confidences, p.max(1))

    def test_sample_permutation_equivariance(self, rng):
        f = random_embeddings(rng, 12, 6)
        w = random_classifier(rng, 4, 6)
        perm = rng.permutation(12)
        pl = make_pseudo_labels(f, w)
        pp = make_pseudo_labels(EmbeddingSet(f.features[perm], [f.sample_ids[i] for i in perm]), w)
        np.testing.assert_array_equal(pp.labels, pl.labels[perm])
        np.testing.assert_array_equal(pp.confidences, pl.confidences[perm])


def _pl(labels, conf, n):
    return PseudoLabelSet(labels, conf, [f"s{i}" for i in range(len(labels))], n)


class TestSelectTopK:
    def test_sort_oracle(self):
        sel = select_top_k(_pl([0, 0, 1], [0.9, 0.3, 0.7], 2), 1)
        assert sel.selected == [(0, 0), (1, 2)]
        assert sel.padded == {}

    def test_padded_classes(self):
        sel = select_top_k(_pl([0, 0, 0], [0.4, 0.5, 0.6], 3), 2)
        assert sel.selected == [(0, 2), (0, 1)]
        assert sel.padded == {1: 2, 2: 2}

    def test_k_exceeds_every_class(self):
        sel = select_top_k(_pl([0, 1, 1, 2], [0.5, 0.6, 0.9, 0.3], 3), 5)
        assert sorted(i for _, i in sel.selected) == [0, 1, 2, 3]
        assert sel.padded == {0: 4, 1: 3, 2: 4}

    def test_ties_prefer_lower_index(self):
        sel = select_top_k(_pl([1, 1, 1], [0.5, 0.8, 0.8], 2), 2)
        assert sel.selected == [(1, 1), (1, 2)]

    def test_random_against_sort_oracle(self, rng):
        labels = rng.integers(0, 4, 50)
        conf = rng.uniform(0.3, 1.0, 50)
        sel = select_top_k(_pl(labels, conf, 4), 3)
        for c in range(4):
            members = sorted((i for i in range(50) if labels[i] == c), key=lambda i: (-conf[i], i))
            assert [i for cc, i in sel.selected if cc == c] == members[:3]

    def test_rejects_k_zero(self):
        with pytest.raises(ValueError):
            select_top_k(_pl([0], [0.5], 1), 0)


class TestFallbackRows:
    def test_none(self, rng):
        keys, labels, conf = fallback_rows(random_classifier(rng, 3, 4), {})
        assert keys.shape == (0, 4) and labels.size == 0 and conf.size == 0

    def test_single(self, rng):
        w = random_classifier(rng, 3, 4)
        keys, labels, conf = fallback_rows(w, {2: 1})
        np.testing.assert_array_equal(keys, w.matrix[[2]])
        assert labels.tolist() == [2] and conf.tolist() == [1.0]

    def test_deficiency_count_matches_selection(self, rng):
        w = random_classifier(rng, 3, 4)
        sel = select_top_k(_pl([1, 1, 1, 2, 2, 2], [0.5] * 6, 3), 3)
        assert sel.padded == {0: 3}
        keys, labels, _ = fallback_rows(w, sel.padded)
        assert keys.shape[0] == 3 and set(labels.tolist()) == {0}
        assert np.all(keys == w.matrix[0])


def test_persistence_round_trip(tmp_path, rng):
    pl = make_pseudo_labels(random_embeddings(rng, 9, 5), random_classifier(rng, 3, 5), source_tag="teacher")
    write_pseudo_labels(pl, tmp_path / "pl.json")
    assert read_pseudo_labels(tmp_path / "pl.json") == pl
    sel = select_top_k(pl, 2)
    write_selection(sel, tmp_path / "sel.json")
    assert read_selection(tmp_path / "sel.json") == sel
