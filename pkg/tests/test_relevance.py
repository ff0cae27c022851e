import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optiweave.model_gateway import HashingEmbedder
from optiweave.relevance import (
    DeterministicDependencyScorer,
    OptimizingFunctionSequence,
    RelevanceConfig,
    RelevanceScore,
    RelevanceScorer,
    ScriptedRelevanceScorer,
    ScriptedScorer,
    build_sequence,
    combine,
    dependency_score,
    semantic_score,
)
from optiweave.syntax_graph import build_call_graph, load_corpus_from_dir

from conftest import make_corpus

FIG_SCORES = {"mod.f_d": 0.9, "mod.f_a": 0.8, "mod.f_b": 0.6, "mod.f_c": 0.12}


class FixedEmbedder:
    """Test embedder returning preset vectors keyed by exact text."""

    def __init__(self, table, dim=2):
        self.table = table
        self.dim = dim

    def embed(self, texts):
        return [list(self.table[t]) for t in texts]


class TestDependencyScore:
    def test_direct_call_scores_at_least_half(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        graph = build_call_graph(corpus.units.values())
        scorer = DeterministicDependencyScorer(graph)
        f_t = corpus.get_function("mod.f_t")
        f_d = corpus.get_function("mod.f_d")
        # oracle: 0.5 * edge + 0.5 * jaccard, edge exists
        value = dependency_score(f_t.id, f_t.body, f_d.id, f_d.body, scorer)
        assert value >= 0.5

    def test_disjoint_functions_score_zero(self):
        scorer = DeterministicDependencyScorer(None)
        assert dependency_score("a.f", "def f():\n    pass\n",
                                "b.g", "def g():\n    pass\n", scorer) == 0.0

    def test_scripted_scorer_passthrough(self):
        scorer = ScriptedScorer({"b.g": 0.73})
        assert dependency_score("a.f", "", "b.g", "", scorer) == 0.73

    def test_clamping(self):
        scorer = ScriptedScorer({"b.g": 7.3})
        assert dependency_score("a.f", "", "b.g", "", scorer) == 1.0


class TestSemanticScore:
    def test_identical_texts(self):
        embedder = HashingEmbedder(dim=16, seed=1)
        assert semantic_score("def f(): return 1", "def f(): return 1", embedder) == 1.0

    def test_orthogonal_mock_vectors(self):
        embedder = FixedEmbedder({"a": (1.0, 0.0), "b": (0.0, 1.0)})
        assert semantic_score("a", "b", embedder) == 0.5
        assert semantic_score("a", "b", embedder, nonnegative_embeddings=True) == 0.0

    def test_mapped_cosine_value(self):
        # direct dot-product oracle: cos((1,1),(1,0)) = 1/sqrt(2)
        expected_cos = 1.0 / math.sqrt(2.0)
        embedder = FixedEmbedder({"a": (1.0, 1.0), "b": (1.0, 0.0)})
        got = semantic_score("a", "b", embedder)
        assert got == pytest.approx((expected_cos + 1) / 2, abs=1e-12)
        assert got == pytest.approx(0.8535533905932737, abs=1e-12)


class TestCombine:
    @pytest.mark.parametrize("dep,sem,expected", [
        (1.0, 1.0, 1.0),
        (0.0, 0.0, 0.0),
        (0.6, 0.8, 0.7),
    ])
    def test_arithmetic_mean_default(self, dep, sem, expected):
        assert combine(dep, sem) == pytest.approx(expected, abs=1e-12)

    def test_weighted(self):
        assert combine(1.0, 0.0, weight=0.25) == pytest.approx(0.25)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            combine(0.5, 0.5, weight=1.5)


class TestRelevanceScore:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            RelevanceScore(1.2, 0.5, 0.6)


def build_fig_sequence(toy_repo_dir, scores=None, threshold=0.5):
    corpus = load_corpus_from_dir(toy_repo_dir)
    graph = build_call_graph(corpus.units.values())
    scorer = ScriptedRelevanceScorer(scores or FIG_SCORES)
    return build_sequence(graph, corpus, "mod.f_t", scorer, threshold=threshold)


class TestBuildSequence:
    def test_fig_fixture_order(self, toy_repo_dir):
        sequence = build_fig_sequence(toy_repo_dir)
        assert sequence.ids() == ("mod.f_d", "mod.f_t", "mod.f_a", "mod.f_b")

    def test_low_score_callee_excluded(self, toy_repo_dir):
        sequence = build_fig_sequence(toy_repo_dir)
        assert "mod.f_c" not in sequence.ids()

    def test_roles_and_order_invariant(self, toy_repo_dir):
        sequence = build_fig_sequence(toy_repo_dir)
        roles = [e.role for e in sequence.entries]
        assert roles == ["callee", "target", "caller", "caller"]
        target_pos = roles.index("target")
        assert all(r == "callee" for r in roles[:target_pos])
        assert all(r == "caller" for r in roles[target_pos + 1:])

    def test_isolated_target(self):
        corpus = make_corpus({"m.py": "def lonely():\n    return 1\n"})
        graph = build_call_graph(corpus.units.values())
        scorer = ScriptedRelevanceScorer({})
        sequence = build_sequence(graph, corpus, "m.lonely", scorer)
        assert sequence.ids() == ("m.lonely",)
        assert sequence.entries[0].role == "target"

    def test_threshold_boundary_keeps_equal(self, toy_repo_dir):
        sequence = build_fig_sequence(toy_repo_dir, scores={
            "mod.f_d": 0.5, "mod.f_a": 0.49, "mod.f_b": 0.49, "mod.f_c": 0.49,
        })
        assert sequence.ids() == ("mod.f_d", "mod.f_t")

    def test_tie_break_lexicographic(self, toy_repo_dir):
        sequence = build_fig_sequence(toy_repo_dir, scores={
            "mod.f_d": 0.9, "mod.f_a": 0.7, "mod.f_b": 0.7, "mod.f_c": 0.9,
        })
        assert sequence.ids() == ("mod.f_c", "mod.f_d", "mod.f_t", "mod.f_a", "mod.f_b")

    def test_threshold_monotonicity(self, toy_repo_dir):
        # raising the threshold never adds entries; higher is a subsequence
        thresholds = [0.0, 0.3, 0.5, 0.7, 0.85, 1.0]
        sequences = [build_fig_sequence(toy_repo_dir, threshold=t).ids() for t in thresholds]
        for lower, higher in zip(sequences, sequences[1:]):
            assert set(higher) <= set(lower)
            positions = [lower.index(x) for x in higher]
            assert positions == sorted(positions)  # order preserved (subsequence)
            assert "mod.f_t" in higher  # target always retained

    @settings(max_examples=60, deadline=None)
    @given(
        scores=st.fixed_dictionaries({
            "mod.f_d": st.floats(0.05, 0.95),
            "mod.f_a": st.floats(0.05, 0.95),
            "mod.f_b": st.floats(0.05, 0.95),
            "mod.f_c": st.floats(0.05, 0.95),
        }),
        scale=st.floats(0.1, 1.0),
        shift=st.floats(0.0, 0.05),
        threshold=st.floats(0.1, 0.9),
    )
    def test_affine_rescale_order_invariance(self, scores, scale, shift, threshold):
        # rescaling all combined scores and the threshold together keeps order
        import os

        from conftest import FIXTURES

        toy = os.path.join(FIXTURES, "toy")
        base = build_fig_sequence(toy, scores=scores, threshold=threshold)
        rescaled_scores = {k: scale * v + shift for k, v in scores.items()}
        rescaled = build_fig_sequence(toy, scores=rescaled_scores,
                                      threshold=scale * threshold + shift)
        assert base.ids() == rescaled.ids()

    def test_pure_function_of_snapshot_with_fallback_scorer(self, toy_repo_dir):
        def run() -> OptimizingFunctionSequence:
            corpus = load_corpus_from_dir(toy_repo_dir)
            graph = build_call_graph(corpus.units.values())
            scorer = RelevanceScorer(
                DeterministicDependencyScorer(graph),
                HashingEmbedder(dim=32, seed=0),
                RelevanceConfig(threshold=0.0),
            )
            return build_sequence(graph, corpus, "mod.f_t", scorer, threshold=0.0)

        first, second = run(), run()
        assert first == second

    def test_unknown_target(self, toy_repo_dir):
        from optiweave.errors import UnknownFunctionError

        corpus = load_corpus_from_dir(toy_repo_dir)
        graph = build_call_graph(corpus.units.values())
        with pytest.raises(UnknownFunctionError):
            build_sequence(graph, corpus, "mod.nope", ScriptedRelevanceScorer({}))


class TestScorerFallback:
    def test_unavailable_scorer_falls_back_when_configured(self):
        from optiweave.errors import ScorerUnavailableError
        from optiweave.model_gateway import HashingEmbedder

        class DownScorer:
            def score(self, a_id, a_text, b_id, b_text):
                raise ScorerUnavailableError("endpoint down")

        scorer = RelevanceScorer(
            DownScorer(), HashingEmbedder(dim=16, seed=0),
            fallback_scorer=DeterministicDependencyScorer(None),
        )
        score = scorer.score_pair("a.f", "def f(): g()", "b.g", "def g(): pass")
        assert 0.0 <= score.combined <= 1.0

    def test_unavailable_scorer_propagates_without_fallback(self):
        from optiweave.errors import ScorerUnavailableError
        from optiweave.model_gateway import HashingEmbedder

        class DownScorer:
            def score(self, a_id, a_text, b_id, b_text):
                raise ScorerUnavailableError("endpoint down")

        scorer = RelevanceScorer(DownScorer(), HashingEmbedder(dim=16, seed=0))
        with pytest.raises(ScorerUnavailableError):
            scorer.score_pair("a.f", "x", "b.g", "y")
