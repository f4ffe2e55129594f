#!/usr/bin/env python3
"""
Unit tests for query context generation.
Tests embeddings, task classification, online clustering, readability
scoring and context vector layout.
"""

import json
import os
import sys

import numpy as np
import pytest

# Add paths
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ml_engine.complexity import ComplexityBinner, flesch_breakdown, flesch_score
from ml_engine.context_generator import (
    FeatureConfig,
    build_context,
    expand_feature_configs,
)
from ml_engine.embeddings import (
    EmbeddingVector,
    HashingEmbeddingProvider,
    PrecomputedEmbeddingProvider,
    text_key,
)
from ml_engine.errors import (
    DegenerateTrainingError,
    InvalidInputError,
    NotReadyError,
    ProviderError,
    StageError,
)
from ml_engine.experiments import build_pipeline
from ml_engine.query_stream import QueryStream, build_training_pairs, generate_queries
from ml_engine.semantic_clustering import ClusterModel
from ml_engine.task_classifier import (
    TaskClassifier,
    TrainingConfig,
    classify_task,
    extract_instruction,
    loss_and_gradient,
    softmax,
    train_task_classifier,
)


def reference_flesch(text):
    """Character-level reimplementation of the counting rules."""
    words, current = [], ""
    for ch in text:
        if ch.isalnum():
            current += ch
        else:
            if current:
                words.append(current)
            current = ""
    if current:
        words.append(current)

    sentences = 0
    for i, ch in enumerate(text):
        if ch in ".!?" and (i + 1 == len(text) or text[i + 1].isspace()):
            sentences += 1
    sentences = max(1, sentences)

    syllables = 0
    for word in words:
        w = word.lower()
        groups, in_group = 0, False
        for ch in w:
            if ch in "aeiouy":
                if not in_group:
                    groups += 1
                in_group = True
            else:
                in_group = False
        if w.endswith("e"):
            groups -= 1
        syllables += max(1, groups)

    return 206.835 - 1.015 * len(words) / sentences - 84.6 * syllables / len(words)


def gaussian_pairs(n_per_class=50, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for label, center in (("left", -3.0), ("right", 3.0)):
        for point in rng.normal(center, 1.0, size=(n_per_class, dim)):
            pairs.append((EmbeddingVector(point), label))
    return pairs


class TestEmbeddings:
    """Tests for the embedding providers"""

    @pytest.fixture
    def provider(self):
        return HashingEmbeddingProvider(d_emb=64)

    def test_deterministic_unit_vectors(self, provider):
        """Test identical text embeds to identical unit vectors"""
        a = provider.embed("Summarize the following news article.")
        b = provider.embed("Summarize the following news article.")
        assert a.dim == 64
        assert np.array_equal(a.values, b.values)
        assert a.norm == pytest.approx(1.0)

    def test_empty_text_rejected(self, provider):
        """Test empty and whitespace text is rejected"""
        with pytest.raises(InvalidInputError):
            provider.embed("")
        with pytest.raises(InvalidInputError):
            provider.embed("   \n ")

    def test_truncates_to_max_tokens(self):
        """Test tokens past the limit do not change the vector"""
        provider = HashingEmbeddingProvider(d_emb=32, max_tokens=4)
        a = provider.embed("one two three four five six")
        b = provider.embed("one two three four seven eight nine")
        assert np.array_equal(a.values, b.values)

    def test_vectors_are_read_only(self, provider):
        """Test embedding values cannot be mutated"""
        e = provider.embed("hello world")
        with pytest.raises(ValueError):
            e.values[0] = 1.0

    def test_precomputed_provider(self, tmp_path):
        """Test lookups by text key and by id"""
        path = tmp_path / "vectors.jsonl"
        with open(path, "w") as f:
            f.write(json.dumps({"id": text_key("hello there"), "vector": [1.0, 0.0, 0.0]}) + "\n")
            f.write(json.dumps({"id": "doc-2", "vector": [0.0, 2.0, 0.0]}) + "\n")
        provider = PrecomputedEmbeddingProvider(path)
        assert provider.d_emb == 3
        assert provider.embed("hello there").values.tolist() == [1.0, 0.0, 0.0]
        assert provider.embed_id("doc-2").norm == pytest.approx(2.0)
        with pytest.raises(ProviderError):
            provider.embed("never stored")

    def test_precomputed_provider_rejects_mixed_dimensions(self, tmp_path):
        """Test a file with mixed vector sizes is refused"""
        path = tmp_path / "vectors.jsonl"
        with open(path, "w") as f:
            f.write(json.dumps({"id": "a", "vector": [1.0, 0.0]}) + "\n")
            f.write(json.dumps({"id": "b", "vector": [1.0, 0.0, 0.0]}) + "\n")
        with pytest.raises(ProviderError):
            PrecomputedEmbeddingProvider(path)


class TestFlesch:
    """Tests for readability scoring and binning"""

    def test_golden_corpus_matches_reference(self):
        """Test scores match a character-level reference on 50 texts"""
        queries = generate_queries(QueryStream(horizon=45, seed=11))
        corpus = [q.text for q in queries] + [
            "The cat sat.",
            "Wait! Really? Yes.",
            "Photosynthesis transforms electromagnetic radiation into chemical energy",
            "e.g. this has 3.5 dots but one sentence",
            "Snake_case words_and numbers 42 count too.",
        ]
        assert len(corpus) == 50
        for text in corpus:
            assert flesch_breakdown(text).raw == pytest.approx(reference_flesch(text), abs=1e-6)

    def test_known_counts(self):
        """Test word, sentence and syllable counts of a short sentence"""
        fb = flesch_breakdown("The cat sat.")
        assert (fb.words, fb.sentences, fb.syllables) == (3, 1, 3)
        assert fb.raw == pytest.approx(206.835 - 1.015 * 3 - 84.6)
        assert fb.score == 100.0

    def test_score_is_clamped(self):
        """Test very hard text clamps to zero"""
        hard = " ".join(["incomprehensibility"] * 60)
        assert flesch_score(hard) == 0.0

    def test_no_words_rejected(self):
        """Test punctuation-only text is rejected"""
        with pytest.raises(InvalidInputError):
            flesch_breakdown("?! ... --")

    def test_binning_edges(self):
        """Test equal-width bin edges and the closed upper end"""
        binner = ComplexityBinner(3)
        assert binner.bin(0.0) == 0
        assert binner.bin(33.3) == 0
        assert binner.bin(50.0) == 1
        assert binner.bin(66.7) == 2
        assert binner.bin(100.0) == 2
        with pytest.raises(InvalidInputError):
            binner.bin(100.5)

    def test_generated_queries_cover_all_bins(self):
        """Test the synthetic stream reaches every complexity bin"""
        queries = generate_queries(QueryStream(horizon=300, seed=3))
        assert {q.complexity_bin for q in queries} == {0, 1, 2}


class TestTaskClassifier:
    """Tests for the softmax task classifier"""

    def test_gradient_matches_finite_differences(self):
        """Test analytic gradients against central differences"""
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 4))
        y = np.array([0, 1, 2, 0, 1, 2])
        W = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        _, grad_W, grad_b = loss_and_gradient(W, b, X, y, 0.01)

        eps = 1e-6
        for i in range(3):
            for j in range(4):
                Wp, Wm = W.copy(), W.copy()
                Wp[i, j] += eps
                Wm[i, j] -= eps
                numeric = (
                    loss_and_gradient(Wp, b, X, y, 0.01)[0] - loss_and_gradient(Wm, b, X, y, 0.01)[0]
                ) / (2 * eps)
                assert grad_W[i, j] == pytest.approx(numeric, rel=1e-5, abs=1e-8)
            bp, bm = b.copy(), b.copy()
            bp[i] += eps
            bm[i] -= eps
            numeric = (
                loss_and_gradient(W, bp, X, y, 0.01)[0] - loss_and_gradient(W, bm, X, y, 0.01)[0]
            ) / (2 * eps)
            assert grad_b[i] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    def test_softmax_rows_sum_to_one(self):
        """Test softmax is a distribution for 1,000 random and extreme inputs"""
        rng = np.random.default_rng(1)
        logits = rng.normal(0.0, 50.0, size=(1000, 5))
        logits[0] = [1000.0, -1000.0, 0.0, 700.0, -5.0]
        probs = softmax(logits)
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_weights_tie_to_first_label(self):
        """Test zero weights give uniform probabilities and the first label"""
        clf = TaskClassifier(np.zeros((2, 3)), np.zeros(2), ["first", "second"])
        label, probs = classify_task(clf, EmbeddingVector(np.array([0.3, -1.0, 2.0])))
        assert label == "first"
        assert probs.tolist() == [0.5, 0.5]

    def test_learns_instruction_templates(self):
        """Test the classifier separates the instruction templates"""
        provider = HashingEmbeddingProvider(64)
        pairs = build_training_pairs(provider, per_task=40, seed=0)
        clf, report = train_task_classifier(
            pairs, TrainingConfig(learning_rate=1.0, iterations=1000)
        )
        assert report.macro_f1 >= 0.9
        assert report.train_size + report.validation_size == len(pairs)
        probs = clf.predict_proba(pairs[0][0])
        assert probs.sum() == pytest.approx(1.0)

    def test_separable_gaussians_reach_perfect_f1(self):
        """Test two well separated clusters are classified perfectly"""
        pairs = gaussian_pairs()
        clf, report = train_task_classifier(pairs, TrainingConfig(learning_rate=0.5, iterations=300))
        assert report.macro_f1 == 1.0
        assert clf.classify(EmbeddingVector(np.full(8, -3.0)))[0] == "left"
        assert clf.classify(EmbeddingVector(np.full(8, 3.0)))[0] == "right"

    def test_fixed_seed_is_deterministic(self):
        """Test training twice with one seed gives identical weights"""
        pairs = gaussian_pairs(seed=2)
        config = TrainingConfig(iterations=50, seed=13)
        first, _ = train_task_classifier(pairs, config)
        second, _ = train_task_classifier(pairs, config)
        assert np.array_equal(first.W, second.W)
        assert np.array_equal(first.b, second.b)

    def test_single_label_is_degenerate(self):
        """Test one label cannot be trained"""
        provider = HashingEmbeddingProvider(16)
        pairs = [(provider.embed(f"text {i}"), "only") for i in range(5)]
        with pytest.raises(DegenerateTrainingError):
            train_task_classifier(pairs)

    def test_mixed_dimensions_rejected(self):
        """Test embeddings of different sizes are rejected"""
        pairs = [
            (EmbeddingVector(np.ones(4)), "a"),
            (EmbeddingVector(np.ones(5)), "b"),
        ]
        with pytest.raises(InvalidInputError):
            train_task_classifier(pairs)

    def test_save_and_load(self, tmp_path):
        """Test the classifier file round-trips"""
        clf = TaskClassifier(np.arange(6.0).reshape(2, 3), np.array([0.5, -0.5]), ["x", "y"])
        clf.save(tmp_path / "clf.json")
        loaded = TaskClassifier.load(tmp_path / "clf.json")
        e = EmbeddingVector(np.array([0.2, -0.1, 0.7]))
        assert loaded.labels == ["x", "y"]
        assert np.allclose(loaded.predict_proba(e), clf.predict_proba(e))

    def test_instruction_slice(self):
        """Test the instruction is the shorter of two lines and 200 characters"""
        assert extract_instruction("first\nsecond\nthird") == "first\nsecond"
        long_line = "word " * 100
        assert extract_instruction(long_line) == long_line[:200]

    def test_instruction_skips_lines_without_tokens(self):
        """Test leading blank and punctuation lines are skipped"""
        assert extract_instruction("\n\n  \nTranslate this.\nSecond line.\nThird.") == (
            "Translate this.\nSecond line."
        )
        assert extract_instruction("---\n***\nSolve for x.\n") == "Solve for x."
        long_line = "word " * 100
        assert extract_instruction("\n\n" + long_line) == long_line[:200]

    def test_instruction_without_token_lines_is_whole_text(self):
        """Test text without any token line is returned unchanged"""
        assert extract_instruction("?!\n...") == "?!\n..."


class TestSemanticClustering:
    """Tests for the streaming K-means model"""

    def test_first_distinct_embeddings_seed_centroids(self):
        """Test the first K distinct embeddings become the centroids"""
        cm = ClusterModel(3, 3)
        assert not cm.ready
        for i, vec in enumerate(np.eye(3)):
            assert cm.observe(EmbeddingVector(vec)) == i
        assert cm.ready
        assert cm.snapshot().counts.tolist() == [1, 1, 1]

    def test_near_duplicate_does_not_seed(self):
        """Test a parallel embedding joins the existing centroid"""
        cm = ClusterModel(2, 3)
        cm.observe(EmbeddingVector(np.array([1.0, 0.0, 0.0])))
        c = cm.observe(EmbeddingVector(np.array([2.0, 0.0, 0.0])))
        assert c == 0
        assert cm.size == 1

    def test_incremental_mean_update(self):
        """Test one update moves the centroid to the running mean"""
        cm = ClusterModel.from_centroids([[1.0, 0.0], [0.0, 1.0]], counts=[1, 1])
        cm.update(EmbeddingVector(np.array([3.0, 4.0])), 0)
        snap = cm.snapshot()
        assert snap.centroids[0].tolist() == [2.0, 2.0]
        assert snap.counts.tolist() == [2, 1]

    def test_repeated_point_on_fresh_centroid(self):
        """Test a fresh centroid jumps to the first point and stays there"""
        cm = ClusterModel.from_centroids([[0.0, 0.0, 0.0]], counts=[0])
        point = EmbeddingVector(np.array([0.3, -0.7, 0.2]))
        for _ in range(5):
            cm.update(point, 0)
            assert np.max(np.abs(cm.snapshot().centroids[0] - point.values)) <= 1e-9

    def test_assign_by_cosine(self):
        """Test assignment picks the most similar centroid"""
        cm = ClusterModel.from_centroids([[1.0, 0.0], [0.0, 1.0]])
        assert cm.assign(EmbeddingVector(np.array([0.1, 5.0]))) == 1
        assert cm.assign(EmbeddingVector(np.array([5.0, 0.1]))) == 0

    def test_assign_tie_goes_to_lowest_index(self):
        """Test an equidistant embedding goes to cluster 0"""
        cm = ClusterModel.from_centroids([[1.0, 0.0], [0.0, 1.0]])
        assert cm.assign(EmbeddingVector(np.array([1.0, 1.0]))) == 0

    def test_mass_and_means_match_brute_force(self):
        """Test counts sum to the observations and centroids equal member means"""
        provider = HashingEmbeddingProvider(32)
        queries = generate_queries(QueryStream(horizon=150, seed=4))
        cm = ClusterModel(3, 32)
        members = {c: [] for c in range(3)}
        for n, q in enumerate(queries, 1):
            e = provider.embed(q.text)
            members[cm.observe(e)].append(e.values)
            assert cm.snapshot().counts.sum() == n

        snap = cm.snapshot()
        for c in range(3):
            assert snap.counts[c] == len(members[c])
            assert np.allclose(snap.centroids[c], np.mean(members[c], axis=0), atol=1e-9)

    def test_observe_without_learning_keeps_counts(self):
        """Test frozen observation leaves the model unchanged"""
        cm = ClusterModel.from_centroids([[1.0, 0.0], [0.0, 1.0]], counts=[4, 4])
        cm.observe(EmbeddingVector(np.array([1.0, 1.0])), learn=False)
        assert cm.snapshot().counts.tolist() == [4, 4]

    def test_errors(self):
        """Test unready, zero and misshapen inputs are rejected"""
        cm = ClusterModel(2, 2)
        with pytest.raises(NotReadyError):
            cm.assign(EmbeddingVector(np.array([1.0, 0.0])))
        with pytest.raises(InvalidInputError):
            cm.observe(EmbeddingVector(np.zeros(2)))
        with pytest.raises(InvalidInputError):
            cm.observe(EmbeddingVector(np.ones(3)))


class TestContextVector:
    """Tests for context layout and the full pipeline"""

    @pytest.fixture
    def pipeline(self):
        return build_pipeline(FeatureConfig(), seed=0)

    def test_layout(self):
        """Test one-hot positions of task, cluster, bin and bias"""
        ctx = build_context(2, 1, 0, (5, 3, 3))
        assert ctx.d == 12
        assert np.flatnonzero(ctx.values).tolist() == [2, 6, 8, 11]

    def test_feature_subsets(self):
        """Test restricted feature blocks shrink the vector"""
        assert build_context(2, 1, 0, (5, 3, 3), FeatureConfig.named("none")).values.tolist() == [1.0]
        task_only = build_context(4, 1, 0, (5, 3, 3), FeatureConfig.named("task"))
        assert task_only.values.tolist() == [0, 0, 0, 0, 1, 1]
        assert FeatureConfig.named("cluster+complexity").dimension((5, 3, 3)) == 7

    def test_indices_range_checked(self):
        """Test out-of-range indices are rejected"""
        with pytest.raises(InvalidInputError):
            build_context(5, 0, 0, (5, 3, 3))
        with pytest.raises(InvalidInputError):
            build_context(0, 0, -1, (5, 3, 3))

    def test_expand_feature_configs(self):
        """Test 'pairs' expands and duplicates drop"""
        names = expand_feature_configs(["none", "pairs", "task", "task"])
        assert names == ["none", "task+cluster", "task+complexity", "cluster+complexity", "task"]
        with pytest.raises(InvalidInputError):
            expand_feature_configs(["task", "bogus"])

    def test_generate_context(self, pipeline):
        """Test the pipeline builds the full context and times every stage"""
        query = next(
            q for q in generate_queries(QueryStream(horizon=20, seed=5))
            if q.task == "math_reasoning"
        )
        ctx = pipeline.generate_context(query.text)
        assert ctx.vector.d == 12
        assert ctx.task == "math_reasoning"
        assert ctx.complexity_bin == ComplexityBinner(3).bin(query.flesch)
        assert set(ctx.timings_ms) == {
            "embed_instruction",
            "task_classification",
            "embed_full",
            "cluster_assignment",
            "complexity",
            "complexity_bin",
            "context_build",
        }

    def test_leading_noise_lines_keep_the_task(self, pipeline):
        """Test blank and punctuation lines before a prompt do not break routing features"""
        query = next(
            q for q in generate_queries(QueryStream(horizon=20, seed=5))
            if q.task == "math_reasoning"
        )
        for prefix in ("\n\n", "---\n***\n"):
            ctx = pipeline.generate_context(prefix + query.text)
            assert ctx.task == "math_reasoning"

    def test_stage_error_names_the_stage(self, pipeline):
        """Test a failing stage is reported by name"""
        with pytest.raises(StageError) as info:
            pipeline.generate_context("   ")
        assert info.value.stage == "embed_instruction"
        assert isinstance(info.value.error, InvalidInputError)
