import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decouple.corpus import SynthConfig, response_pairs, synthesize_corpus
from decouple.errors import ConfigError, DataError
from decouple.evaluation import (
    DEFAULT_LENGTHS,
    FULL,
    EvalReport,
    GapCurve,
    emit_report,
    gap_sweep,
    gap_variance,
    generation_f1,
    hits_at_1,
    knowledge_lm_ppl,
    perplexity,
    read_curves_csv,
    resolve_lengths,
    unigram_f1,
)
from decouple.seqmodel import ModelConfig, init_params

from conftest import constant_logit_params, make_dialogue


@pytest.fixture(scope="module")
def eval_corpus():
    return synthesize_corpus(SynthConfig(vocab_size=150, n_dialogues=30, seed=31))


@pytest.fixture(scope="module")
def eval_pairs(eval_corpus):
    return response_pairs(eval_corpus.dialogues)


@pytest.fixture(scope="module")
def eval_params(eval_corpus):
    cfg = ModelConfig(vocab_size=len(eval_corpus.vocab), d_model=16,
                      n_layers=1, n_heads=2, max_seq_len=64)
    return init_params(cfg, seed=1)


class TestPerplexity:
    def test_single_token_quarter_probability(self, tiny_vocab, tiny_model_cfg):
        V = tiny_model_cfg.vocab_size
        tok = tiny_vocab.encode("w05")[0]
        probs = np.full(V, 0.75 / (V - 1))
        probs[tok] = 0.25
        params = constant_logit_params(tiny_model_cfg, np.log(probs))
        d = make_dialogue(tiny_vocab, "w01 w02", "w05")
        ppl = perplexity(params, response_pairs([d]), 0)
        assert abs(ppl - 4.0) < 1e-9

    def test_two_tokens_half_and_eighth(self, tiny_vocab, tiny_model_cfg):
        V = tiny_model_cfg.vocab_size
        a, b = tiny_vocab.encode("w05 w06")
        probs = np.full(V, 0.375 / (V - 2))
        probs[a] = 0.5
        probs[b] = 0.125
        params = constant_logit_params(tiny_model_cfg, np.log(probs))
        d = make_dialogue(tiny_vocab, "w01", "w05 w06")
        ppl = perplexity(params, response_pairs([d]), 0)
        assert abs(ppl - 4.0) < 1e-9

    def test_uniform_model_ppl_equals_vocab_size(self, tiny_vocab, tiny_model_cfg):
        V = tiny_model_cfg.vocab_size
        params = constant_logit_params(tiny_model_cfg, np.zeros(V))
        d = make_dialogue(tiny_vocab, "w01 w02", "w03 w04 w05")
        ppl = perplexity(params, response_pairs([d]), 0)
        assert abs(ppl - V) < 1e-9

    def test_empty_dataset_rejected(self, eval_params):
        with pytest.raises(DataError):
            perplexity(eval_params, [], 0)

    def test_knowledge_required_for_positive_length(self, tiny_vocab,
                                                    tiny_model_cfg):
        params = constant_logit_params(tiny_model_cfg,
                                       np.zeros(tiny_model_cfg.vocab_size))
        d = make_dialogue(tiny_vocab, "w01", "w02")
        with pytest.raises(DataError):
            perplexity(params, response_pairs([d]), 4)


class TestHits:
    def test_untrained_twenty_candidates_near_chance(self, eval_corpus):
        cfg = ModelConfig(vocab_size=len(eval_corpus.vocab), d_model=16,
                          n_layers=1, n_heads=2, max_seq_len=64)
        params = init_params(cfg, seed=9)
        big = synthesize_corpus(
            SynthConfig(vocab_size=150, n_dialogues=2000, seed=33)
        )
        pairs = response_pairs(big.dialogues)
        rate = hits_at_1(params, pairs, 0, n_candidates=20, seed=0)
        assert 3.0 <= rate <= 7.0

    def test_insufficient_distractors_rejected(self, eval_params, eval_corpus):
        pairs = response_pairs(eval_corpus.dialogues[:2])
        with pytest.raises(DataError):
            hits_at_1(eval_params, pairs, 0, n_candidates=50, seed=0)

    def test_provided_candidate_lists_used(self, tiny_vocab, tiny_model_cfg):
        from decouple.corpus import Dialogue, Utterance

        V = tiny_model_cfg.vocab_size
        gold_tok = tiny_vocab.encode("w09")[0]
        probs = np.full(V, 1e-9)
        probs[gold_tok] = 1.0
        probs[3] = 0.5  # EOS mass keeps normalization sane
        probs /= probs.sum()
        params = constant_logit_params(tiny_model_cfg, np.log(probs))
        gold = (gold_tok,)
        d = Dialogue(
            utterances=(Utterance("A", tuple(tiny_vocab.encode("w01"))),
                        Utterance("B", gold)),
            knowledge=None,
            candidates={1: (tuple(tiny_vocab.encode("w03")), gold,
                            tuple(tiny_vocab.encode("w05")))},
        )
        rate = hits_at_1(params, response_pairs([d]), 0, n_candidates=3, seed=0)
        assert rate == 100.0


class TestUnigramF1:
    def test_identical_sequences(self):
        assert unigram_f1([1, 2, 3], [1, 2, 3]) == 100.0

    def test_half_overlap(self):
        assert abs(unigram_f1([1, 2], [2, 3]) - 50.0) < 1e-12

    def test_empty_prediction_scores_zero(self):
        assert unigram_f1([], [1, 2]) == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(DataError):
            unigram_f1([1], [])

    @settings(max_examples=50, deadline=None)
    @given(a=st.lists(st.integers(0, 8), min_size=1, max_size=10),
           b=st.lists(st.integers(0, 8), min_size=1, max_size=10))
    def test_symmetry(self, a, b):
        assert abs(unigram_f1(a, b) - unigram_f1(b, a)) < 1e-9


class TestGapCurves:
    def _curve(self, values, metric="ppl"):
        return GapCurve(metric=metric, method="m", dataset="d",
                        points=tuple((2 * i, v) for i, v in enumerate(values)))

    def test_variance_of_constant_curve_is_zero(self):
        assert gap_variance(self._curve([5.0, 5.0, 5.0])) == 0.0

    def test_variance_hand_case(self):
        assert abs(gap_variance(self._curve([10.0, 20.0])) - 25.0) < 1e-12

    def test_variance_scales_quadratically(self):
        base = self._curve([3.0, 7.0, 11.0])
        scaled = self._curve([9.0, 21.0, 33.0])
        assert abs(gap_variance(scaled) - 9.0 * gap_variance(base)) < 1e-9

    def test_single_point_curve_rejected(self):
        with pytest.raises(DataError):
            gap_variance(GapCurve(metric="ppl", method="m", dataset="d",
                                  points=((0, 1.0),)))

    def test_variance_invariant_to_point_order(self):
        vals = [4.0, 9.0, 1.0, 16.0]
        a = self._curve(vals)
        assert abs(gap_variance(a) - float(np.var(vals))) < 1e-12

    def test_curves_must_start_at_zero_and_increase(self):
        with pytest.raises(ConfigError):
            GapCurve(metric="ppl", method="m", dataset="d",
                     points=((2, 1.0), (4, 2.0)))
        with pytest.raises(ConfigError):
            GapCurve(metric="ppl", method="m", dataset="d",
                     points=((0, 1.0), (0, 2.0)))


class TestGapSweep:
    def test_grid_resolution_drops_overshoot(self, eval_pairs):
        resolved = resolve_lengths((0, 2, 4, 50, FULL), eval_pairs)
        assert resolved[0] == 0
        assert resolved[-1] <= 50
        assert all(b > a for a, b in zip(resolved, resolved[1:]))

    def test_grid_requires_zero_and_full(self, eval_pairs):
        with pytest.raises(ConfigError):
            resolve_lengths((2, 4), eval_pairs)

    def test_two_point_sweep_matches_endpoint_metrics(self, eval_params,
                                                      eval_pairs):
        curves = gap_sweep(eval_params, eval_pairs, lengths=(0, FULL),
                           metrics=("ppl",), method="m", dataset="d")
        curve = curves[0]
        assert curve.points[0][1] == perplexity(eval_params, eval_pairs, 0)
        assert curve.points[-1][1] == perplexity(eval_params, eval_pairs, None)

    def test_unknown_metric_rejected(self, eval_params, eval_pairs):
        with pytest.raises(ConfigError):
            gap_sweep(eval_params, eval_pairs, metrics=("bleu",))

    def test_endpoint_consistency_knowledge_stripped(self, eval_params,
                                                     eval_corpus):
        from decouple.corpus import Dialogue

        pairs = response_pairs(eval_corpus.dialogues)
        stripped = response_pairs([
            Dialogue(utterances=d.utterances) for d in eval_corpus.dialogues
        ])
        curves = gap_sweep(eval_params, pairs, lengths=(0, FULL),
                           metrics=("ppl",))
        assert curves[0].points[0][1] == perplexity(eval_params, stripped, 0)


class TestKnowledgeLMPpl:
    def test_requires_knowledge(self, eval_params, tiny_vocab):
        d = make_dialogue(tiny_vocab, "w01", "w02")
        with pytest.raises(DataError):
            knowledge_lm_ppl(eval_params, response_pairs([d]))

    def test_conditional_equals_unconditional_for_constant_model(
        self, tiny_vocab, tiny_model_cfg
    ):
        # a constant-distribution model ignores all conditioning, so feeding
        # the history cannot change the knowledge perplexity
        V = tiny_model_cfg.vocab_size
        probs = np.arange(1, V + 1, dtype=np.float64)
        probs /= probs.sum()
        params = constant_logit_params(tiny_model_cfg, np.log(probs))
        d = make_dialogue(tiny_vocab, "w01 w02", "w03", ["w04 w05 w06"])
        pairs = response_pairs([d])
        cond = knowledge_lm_ppl(params, pairs, conditioned_on_history=True)
        uncond = knowledge_lm_ppl(params, pairs, conditioned_on_history=False)
        assert abs(cond - uncond) < 1e-9


class TestReportEmission:
    def _report(self):
        curves = []
        for method in ("full", "vanilla"):
            for metric in ("ppl", "hits1"):
                curves.append(GapCurve(
                    metric=metric, method=method, dataset="synth",
                    points=((0, 10.0 + len(curves)), (4, 8.5), (9, 7.25)),
                ))
        return EvalReport(dataset="synth", curves=tuple(curves),
                          knowledge_ppl={"lm": 30.0})

    def test_csv_roundtrip_exact(self, tmp_path):
        report = self._report()
        emit_report(report, tmp_path)
        curves = read_curves_csv(tmp_path / "curves.csv")
        assert sorted((c.method, c.metric) for c in curves) == sorted(
            (c.method, c.metric) for c in report.curves
        )
        by_key = {(c.method, c.metric): c for c in curves}
        for c in report.curves:
            assert by_key[(c.method, c.metric)].points == c.points

    def test_deterministic_bytes(self, tmp_path):
        report = self._report()
        emit_report(report, tmp_path / "a")
        emit_report(report, tmp_path / "b")
        for name in ("curves.csv", "summary.json", "ppl.svg", "hits1.svg"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_empty_report_rejected_without_partial_files(self, tmp_path):
        out = tmp_path / "out"
        with pytest.raises(ConfigError):
            emit_report(EvalReport(dataset="d", curves=()), out)
        assert not out.exists()

    def test_summary_contains_variances_and_endpoints(self, tmp_path):
        report = self._report()
        emit_report(report, tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        entry = summary["methods"]["full"]["ppl"]
        assert entry["endpoints"]["zero"] == entry["curve"][0][1]
        assert entry["variance"] >= 0
        assert summary["knowledge_ppl"] == {"lm": 30.0}

    def test_svg_has_one_polyline_per_method(self, tmp_path):
        report = self._report()
        emit_report(report, tmp_path)
        svg = (tmp_path / "ppl.svg").read_text()
        assert svg.count("<polyline") == 2
        assert "knowledge length" in svg


class TestGenerationF1:
    def test_constant_argmax_model_repeats_its_token(self, tiny_vocab,
                                                     tiny_model_cfg):
        # greedy decoding from a constant distribution emits the argmax token
        # until the length cap; F1 is exact against a matching reference
        V = tiny_model_cfg.vocab_size
        tok = tiny_vocab.encode("w07")[0]
        probs = np.full(V, 1e-12)
        probs[tok] = 0.6
        probs[3] = 0.4  # EOS keeps some mass but never wins greedy
        probs /= probs.sum()
        params = constant_logit_params(tiny_model_cfg, np.log(probs))
        d = make_dialogue(tiny_vocab, "w01", "w07 w07 w07 w07")
        score = generation_f1(params, response_pairs([d]), 0, max_gen_len=4)
        assert score == 100.0
        d2 = make_dialogue(tiny_vocab, "w01", "w07")
        score2 = generation_f1(params, response_pairs([d2]), 0, max_gen_len=4)
        assert abs(score2 - 40.0) < 1e-9  # overlap 1, |pred|=4, |ref|=1
