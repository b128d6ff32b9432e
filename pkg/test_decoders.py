import itertools
from collections import Counter

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import chisquare

from conftest import A, B, C, D, TOY_INPUT
from decoders import (
    DecodeResult,
    Scorer,
    SearchBudgetExceeded,
    beam_search,
    exact_map,
    greedy_decode,
    run_rule,
    sample_decode,
    score_sequence,
    sequence_log_prob,
)
from q_models import DecisionContext, TabularNGramSpec, init_model
from random_streams import stream
from synthetic_tasks import MaxLengthRule
from theory_checks import tabular_fixed_point


def all_outputs(vocab_size, limit):
    for length in range(limit + 1):
        for body in itertools.product(range(1, vocab_size), repeat=length):
            yield body + (0,)


def brute_force_map(model, x, scorer):
    limit = MaxLengthRule().limit(x)
    scored = [score_sequence(model, x, y, scorer) for y in all_outputs(model.vocab_size, limit)]
    return min(scored, key=lambda r: (-r.total_log_prob, r.tokens))


class TestDecodeResult:
    def test_zero_step_absorbs(self):
        result = DecodeResult.from_steps([2, 0], [-0.5, -np.inf], False, 2, Scorer.DUAL)
        assert result.total_log_prob == -np.inf
        assert result.zero_step == 1
        record = result.to_record()
        assert record["total_log10_prob"] == "-inf"
        assert record["step_log_probs"] == [-0.5, "-inf"]

    def test_log10(self):
        result = DecodeResult.from_steps([0], [np.log(0.01)], False, 1, "softmax")
        assert result.total_log10_prob == pytest.approx(-2.0)
        assert result.scorer is Scorer.SOFTMAX


class TestToyModel:
    def test_greedy_is_not_map(self, toy_model):
        greedy = greedy_decode(toy_model, TOY_INPUT)
        assert greedy.tokens == (A, C, 0)
        assert np.exp(greedy.total_log_prob) == pytest.approx(0.30)

        best = exact_map(toy_model, TOY_INPUT, Scorer.SOFTMAX)
        assert best.tokens == (B, C, 0)
        assert np.exp(best.total_log_prob) == pytest.approx(0.36)

    def test_beam_sizes(self, toy_model):
        assert beam_search(toy_model, TOY_INPUT, Scorer.SOFTMAX, 1).tokens == (A, C, 0)
        two = beam_search(toy_model, TOY_INPUT, Scorer.SOFTMAX, 2)
        assert two.tokens == (B, C, 0)
        assert np.exp(two.total_log_prob) == pytest.approx(0.36)

    def test_greedy_forced_eos_flag(self, toy_model):
        result = greedy_decode(toy_model, TOY_INPUT)
        assert result.forced_eos
        assert len(result.tokens) == 2 * len(TOY_INPUT) + 1

    def test_sequence_log_prob(self, toy_model):
        assert sequence_log_prob(toy_model, TOY_INPUT, (B, C, 0), Scorer.SOFTMAX) == pytest.approx(np.log(0.36))
        empty = score_sequence(toy_model, TOY_INPUT, (0,), Scorer.SOFTMAX)
        assert empty.total_log_prob == pytest.approx(-60.0 - np.log(1.0 + 3 * np.exp(-60.0)), abs=1e-9)

    def test_dual_zero_reported(self, toy_model):
        result = score_sequence(toy_model, TOY_INPUT, (C, 0), Scorer.DUAL)
        assert result.total_log_prob == -np.inf
        assert result.zero_step == 0

    def test_score_sequence_rejects_bad_outputs(self, toy_model):
        with pytest.raises(ValueError, match="EOS"):
            score_sequence(toy_model, TOY_INPUT, (A, C), Scorer.SOFTMAX)
        with pytest.raises(ValueError, match="limit"):
            score_sequence(toy_model, TOY_INPUT, (A, C, D, 0), Scorer.SOFTMAX)

    def test_sampling_matches_leaf_probabilities(self, toy_model):
        rng = stream(1, purpose="decode")
        n = 100_000
        counts = Counter(sample_decode(toy_model, TOY_INPUT, Scorer.SOFTMAX, 1.0, rng).tokens for _ in range(n))
        leaves = [(A, C, 0), (A, D, 0), (B, C, 0), (B, D, 0)]
        assert set(counts) <= set(leaves)
        observed = [counts[leaf] for leaf in leaves]
        assert chisquare(observed, np.array([0.30, 0.30, 0.36, 0.04]) * n).pvalue > 0.001

    def test_budget_exceeded_carries_best_so_far(self, toy_model):
        with pytest.raises(SearchBudgetExceeded) as info:
            exact_map(toy_model, TOY_INPUT, Scorer.SOFTMAX, node_budget=3)
        partial = info.value.best_so_far
        assert partial.tokens == (A, C, 0)
        assert partial.budget_exceeded
        assert run_rule("map", toy_model, TOY_INPUT, Scorer.SOFTMAX, node_budget=3).tokens == (A, C, 0)
        with pytest.raises(SearchBudgetExceeded):
            run_rule("map", toy_model, TOY_INPUT, Scorer.SOFTMAX, node_budget=1)


class TestDecoderIdentities:
    def test_beam_one_is_greedy(self, random_tabular_models):
        for model, x in random_tabular_models(30, seed=1):
            greedy = greedy_decode(model, x)
            beam = beam_search(model, x, Scorer.SOFTMAX, 1)
            assert beam.tokens == greedy.tokens
            assert beam.total_log_prob == pytest.approx(greedy.total_log_prob)

    def test_zero_temperature_sampling_is_greedy(self, random_tabular_models):
        rng = stream(2, purpose="decode")
        for model, x in random_tabular_models(20, seed=2):
            assert sample_decode(model, x, Scorer.SOFTMAX, 0.0, rng).tokens == greedy_decode(model, x).tokens

    @pytest.mark.parametrize("scorer", [Scorer.SOFTMAX, Scorer.DUAL])
    def test_exact_map_matches_enumeration(self, random_tabular_models, scorer):
        for model, x in random_tabular_models(50, seed=3):
            expected = brute_force_map(model, x, scorer)
            found = exact_map(model, x, scorer)
            assert found.tokens == expected.tokens
            assert found.total_log_prob == pytest.approx(expected.total_log_prob)

    @pytest.mark.parametrize("scorer", [Scorer.SOFTMAX, Scorer.DUAL])
    def test_exhaustive_beam_is_map(self, random_tabular_models, scorer):
        for model, x in random_tabular_models(15, seed=4, max_vocab=5):
            limit = MaxLengthRule().limit(x)
            leaves = sum((model.vocab_size - 1) ** k for k in range(limit + 1))
            assert beam_search(model, x, scorer, leaves).tokens == exact_map(model, x, scorer).tokens

    @pytest.mark.parametrize("scorer", [Scorer.SOFTMAX, Scorer.DUAL])
    def test_map_dominates_other_rules(self, random_tabular_models, scorer):
        rng = stream(5, purpose="decode")
        for model, x in random_tabular_models(20, seed=5):
            best = exact_map(model, x, scorer).total_log_prob
            others = [
                greedy_decode(model, x, scorer=scorer),
                beam_search(model, x, scorer, 2),
                beam_search(model, x, scorer, 4),
                sample_decode(model, x, scorer, 1.0, rng),
            ]
            for result in others:
                assert best >= result.total_log_prob

    def test_deterministic_model_prunes_to_a_path(self):
        model = init_model(TabularNGramSpec(order=1), 5)
        model.params[:] = 0.0
        x = (1, 2)
        path = [3, 1, 4, 0]
        prefix = ()
        for token in path:
            row = np.zeros(5)
            row[token] = 40.0
            model.set_row(DecisionContext(x, prefix), row)
            prefix += (token,)
        result = exact_map(model, x, Scorer.SOFTMAX)
        assert result.tokens == (3, 1, 4, 0)
        assert result.candidates_expanded <= MaxLengthRule().limit(x) + 1


class TestSampling:
    def test_negative_temperature_rejected(self, toy_model):
        with pytest.raises(ValueError):
            sample_decode(toy_model, TOY_INPUT, Scorer.SOFTMAX, -1.0, stream(0, purpose="decode"))

    def test_dual_sampling_recovers_target_at_fixed_point(self):
        p_true = np.array([0.0, 0.7, 0.3])
        report = tabular_fixed_point(p_true)
        model = init_model(TabularNGramSpec(order=1), 3)
        model.set_row(DecisionContext(()), report.q_star)
        rng = stream(6, purpose="decode")
        n = 20_000
        actions = np.bincount([sample_decode(model, (), Scorer.DUAL, 1.0, rng).tokens[0] for _ in range(n)],
                              minlength=3)
        assert 0.5 * np.abs(actions / n - p_true).sum() < 0.01

    def test_dual_zero_temperature_is_dual_argmax(self, toy_model):
        result = sample_decode(toy_model, TOY_INPUT, Scorer.DUAL, 0.0, stream(0, purpose="decode"))
        assert result.tokens == (A, C, 0)
        assert_allclose(result.step_log_probs[-1], 0.0, atol=1e-12)
