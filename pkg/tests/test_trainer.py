import math

import numpy as np
import pytest

from decouple.corpus import (
    Dialogue,
    KnowledgeCollection,
    SynthConfig,
    Utterance,
    response_pairs,
    synthesize_corpus,
)
from decouple.errors import ConfigError, DataError, FrozenParametersError
from decouple.seqmodel import ModelConfig, init_params
from decouple.trainer import (
    Adam,
    RewardBaseline,
    TrainConfig,
    decoupling_step,
    mle_step,
    pretrain_knowledge_lm,
    reallm_step,
    run_training,
    validation_length,
)


@pytest.fixture(scope="module")
def corpus():
    return synthesize_corpus(SynthConfig(vocab_size=150, n_dialogues=40, seed=21))


@pytest.fixture(scope="module")
def model_cfg(corpus):
    return ModelConfig(vocab_size=len(corpus.vocab), d_model=16, n_layers=1,
                       n_heads=2, max_seq_len=64)


@pytest.fixture(scope="module")
def frozen_lm(corpus, model_cfg):
    cfg = TrainConfig(method="decoupling", epochs=1, batch_size=16, lr=2e-3, seed=1)
    lm, _ = pretrain_knowledge_lm(corpus.knowledge, model_cfg, cfg)
    return lm


def _cfg(**kw):
    base = dict(method="decoupling", epochs=1, batch_size=8, lr=2e-3, seed=0,
                z_max_len=6)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults_validate(self):
        cfg = TrainConfig()
        cfg.validate()
        assert cfg.alpha == 1.0 and cfg.beta == 1.0
        assert 0.1 <= cfg.gamma <= 1.0

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(method="sft").validate()

    def test_gamma_above_one_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(gamma=1.5).validate()

    def test_roundtrip_dict(self):
        cfg = TrainConfig(method="full", epochs=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestAdamAndFreezing:
    def test_frozen_params_refuse_updates(self, model_cfg):
        params = init_params(model_cfg, seed=0)
        params.frozen = True
        opt = Adam(params, lr=1e-3)
        with pytest.raises(FrozenParametersError):
            opt.step(params, params.zeros_like())

    def test_pretrained_lm_is_frozen(self, frozen_lm):
        assert frozen_lm.frozen
        opt = Adam(frozen_lm, lr=1e-3)
        with pytest.raises(FrozenParametersError):
            opt.step(frozen_lm, frozen_lm.zeros_like())


class TestPretrainKnowledgeLM:
    def test_empty_collection_rejected(self, model_cfg):
        with pytest.raises((ConfigError, DataError)):
            pretrain_knowledge_lm(
                KnowledgeCollection(sentences=()), model_cfg, _cfg()
            )

    def test_loss_decreases(self, corpus, model_cfg):
        cfg = _cfg(epochs=6, batch_size=16, lr=3e-3)
        _, records = pretrain_knowledge_lm(corpus.knowledge, model_cfg, cfg)
        first = np.mean([r.loss for r in records[:3]])
        last = np.mean([r.loss for r in records[-3:]])
        assert last < first

    def test_degenerate_single_sentence_memorized(self, model_cfg, corpus):
        single = KnowledgeCollection(sentences=(corpus.knowledge.sentences[0],))
        cfg = _cfg(epochs=60, batch_size=4, lr=5e-3)
        lm, records = pretrain_knowledge_lm(single, model_cfg, cfg)
        assert records[-1].valid_ppl < 1.6

    def test_heldout_ppl_reported(self, corpus, model_cfg):
        cfg = _cfg(epochs=1, batch_size=16)
        _, records = pretrain_knowledge_lm(corpus.knowledge, model_cfg, cfg)
        assert records[-1].valid_ppl is not None
        assert math.isfinite(records[-1].valid_ppl)


class TestMleStep:
    def test_mode_none_ignores_knowledge(self, corpus, model_cfg):
        pairs = response_pairs(corpus.dialogues[:8])
        p1 = init_params(model_cfg, seed=3)
        p2 = init_params(model_cfg, seed=3)
        rng = np.random.default_rng(0)
        cfg = _cfg(method="vanilla")
        rec1 = mle_step(p1, pairs, "none", cfg, Adam(p1, cfg.lr),
                        np.random.default_rng(0))
        stripped = [
            type(p)(**{**p.__dict__, "knowledge": None}) for p in pairs
        ]
        rec2 = mle_step(p2, stripped, "none", cfg, Adam(p2, cfg.lr),
                        np.random.default_rng(0))
        assert rec1.loss == rec2.loss
        for k in p1.arrays:
            np.testing.assert_array_equal(p1.arrays[k], p2.arrays[k])

    def test_loss_is_token_mean_nll(self, corpus, model_cfg):
        from decouple.seqmodel import response_logprob
        from decouple.corpus import concat_knowledge

        pairs = response_pairs(corpus.dialogues[:4])
        params = init_params(model_cfg, seed=4)
        expected = 0.0
        for p in pairs:
            total, per_tok = response_logprob(
                params, p.history, concat_knowledge(p.knowledge),
                p.response.tokens, append_eos=True,
            )
            expected += -total / len(per_tok) / len(pairs)
        cfg = _cfg(method="full")
        rec = mle_step(params, pairs, "full", cfg, Adam(params, cfg.lr),
                       np.random.default_rng(0))
        assert abs(rec.loss - expected) < 1e-9

    def test_missing_knowledge_rejected(self, corpus, model_cfg, tiny_vocab):
        params = init_params(model_cfg, seed=5)
        bare = Dialogue(utterances=(
            Utterance("A", (9, 10)), Utterance("B", (11,)),
        ))
        cfg = _cfg(method="full")
        with pytest.raises(DataError):
            mle_step(params, response_pairs([bare]), "full", cfg,
                     Adam(params, cfg.lr), np.random.default_rng(0))

    def test_tenlen_uses_ten_token_windows(self, corpus, model_cfg):
        params = init_params(model_cfg, seed=6)
        pairs = response_pairs(corpus.dialogues[:6])
        cfg = _cfg(method="tenlen")
        rec = mle_step(params, pairs, "tenlen-window", cfg,
                       Adam(params, cfg.lr), np.random.default_rng(0))
        assert math.isfinite(rec.loss)


class TestDecouplingStep:
    def test_requires_frozen_lm(self, corpus, model_cfg, frozen_lm):
        params = init_params(model_cfg, seed=7)
        pairs = response_pairs(corpus.dialogues[:4])
        thawed = frozen_lm.copy()
        thawed.frozen = False
        cfg = _cfg()
        with pytest.raises(ConfigError):
            decoupling_step(params, thawed, pairs, cfg, Adam(params, cfg.lr),
                            np.random.default_rng(0))

    def test_gamma_zero_runs_without_lm(self, corpus, model_cfg):
        params = init_params(model_cfg, seed=7)
        pairs = response_pairs(corpus.dialogues[:4])
        cfg = _cfg(gamma=0.0, baseline=False)
        rec = decoupling_step(params, None, pairs, cfg, Adam(params, cfg.lr),
                              np.random.default_rng(0))
        assert rec.mean_kl == 0.0

    def test_beta_gamma_zero_equals_mle_on_sampled_knowledge(
        self, corpus, model_cfg, frozen_lm
    ):
        from decouple.seqmodel import sample_knowledge_batch

        pairs = response_pairs(corpus.dialogues[:6])
        cfg = _cfg(beta=0.0, gamma=0.0, baseline=False)

        params_a = init_params(model_cfg, seed=8)
        rng_a = np.random.default_rng(5)
        opt_a = Adam(params_a, cfg.lr)
        rec_a = decoupling_step(params_a, frozen_lm, pairs, cfg, opt_a, rng_a)

        # replay the same sampling stream against identical init, then feed
        # the sampled z as if it were the dialogue's paired knowledge
        params_b = init_params(model_cfg, seed=8)
        rng_b = np.random.default_rng(5)
        samples = sample_knowledge_batch(params_b, [p.history for p in pairs],
                                         cfg.z_max_len, cfg.temperature, rng_b)
        with_z = [
            type(p)(**{**p.__dict__,
                       "knowledge": (tuple(s.context_tokens()),)
                       if s.context_tokens() else None})
            for p, s in zip(pairs, samples)
        ]
        # decoupling keeps an empty knowledge marker when z collapsed to EOS;
        # restrict the comparison to batches where every z is non-empty
        assert all(s.context_tokens() for s in samples)
        opt_b = Adam(params_b, cfg.lr)
        rec_b = mle_step(params_b, with_z, "full", cfg, opt_b,
                         np.random.default_rng(99))
        assert abs(rec_a.loss - rec_b.loss) < 1e-12
        for k in params_a.arrays:
            np.testing.assert_allclose(
                params_a.arrays[k], params_b.arrays[k], atol=1e-12
            )

    def test_alpha_beta_zero_updates_via_kl_only(self, corpus, model_cfg, frozen_lm):
        params = init_params(model_cfg, seed=9)
        pairs = response_pairs(corpus.dialogues[:4])
        cfg = _cfg(alpha=0.0, beta=0.0, gamma=0.5, baseline=False)
        rec = decoupling_step(params, frozen_lm, pairs, cfg,
                              Adam(params, cfg.lr), np.random.default_rng(1))
        assert rec.grad_norm_phi == 0.0
        assert rec.grad_norm_sigma > 0.0
        assert rec.mean_kl >= -1e-9

    def test_kl_bound_value_nonnegative_every_step(self, corpus, model_cfg, frozen_lm):
        params = init_params(model_cfg, seed=10)
        pairs = response_pairs(corpus.dialogues[:16])
        cfg = _cfg(baseline=True)
        opt = Adam(params, cfg.lr)
        rng = np.random.default_rng(2)
        baseline = RewardBaseline()
        for step in range(5):
            rec = decoupling_step(params, frozen_lm, pairs[:8], cfg, opt, rng,
                                  baseline, step=step)
            assert rec.mean_kl >= -1e-9
            assert math.isfinite(rec.loss)

    def test_reward_detached_from_sigma_gradient(self, corpus, model_cfg, frozen_lm):
        # isolate the beta term and rebuild its update by hand: the gradient
        # must equal reward * d log P(z|x), with the reward a bare constant
        # (no response-path contribution), pushed through clipping and Adam
        from decouple.corpus import EOS
        from decouple.seqmodel import (
            backward,
            encode_example,
            forward,
            log_softmax,
            response_logprob,
            sample_knowledge_batch,
        )
        from decouple.seqmodel.ops import LOGPROB_FLOOR
        from decouple.trainer import clip_grads

        pairs = response_pairs(corpus.dialogues[:5])
        cfg = _cfg(alpha=0.0, gamma=0.0, beta=1.0, baseline=False)

        params_a = init_params(model_cfg, seed=11)
        decoupling_step(params_a, frozen_lm, pairs, cfg,
                        Adam(params_a, cfg.lr), np.random.default_rng(3))

        params_b = init_params(model_cfg, seed=11)
        samples = sample_knowledge_batch(
            params_b, [p.history for p in pairs], cfg.z_max_len,
            cfg.temperature, np.random.default_rng(3),
        )
        B = len(pairs)
        grads = params_b.zeros_like()
        for pair, s in zip(pairs, samples):
            z_ctx = s.context_tokens()
            y = list(pair.response.tokens) + [EOS]
            total, per_tok = response_logprob(params_b, pair.history, z_ctx, y)
            reward = float(np.exp(max(per_tok.mean(), LOGPROB_FLOOR)))
            ex = encode_example(pair.history, z_ctx, None,
                                keep_empty_knowledge_marker=True)
            logits, cache = forward(params_b, ex.tokens[None], ex.tags[None])
            lp = log_softmax(logits)
            rows = ex.knowledge_marker + np.arange(len(s.tokens))
            dlogits = np.zeros_like(logits)
            w = cfg.beta * reward / B
            block = np.exp(lp[0, rows]) * w
            block[np.arange(len(rows)), np.array(s.tokens)] -= w
            dlogits[0, rows] = block
            g = backward(params_b, cache, dlogits)
            for k in grads:
                grads[k] += g[k]
        clip_grads(grads, cfg.grad_clip)
        Adam(params_b, cfg.lr).step(params_b, grads)
        for k in params_a.arrays:
            np.testing.assert_allclose(
                params_a.arrays[k], params_b.arrays[k], atol=1e-10,
                err_msg=k,
            )


class TestReallmStep:
    def test_requires_paired_knowledge(self, model_cfg):
        bare = Dialogue(utterances=(
            Utterance("A", (9,)), Utterance("B", (10,)),
        ))
        params = init_params(model_cfg, seed=12)
        cfg = _cfg(method="reallm")
        with pytest.raises(DataError):
            reallm_step(params, None, response_pairs([bare]), cfg,
                        Adam(params, cfg.lr), np.random.default_rng(0))

    def test_loss_decomposes_into_knowledge_nll_plus_response_nll(
        self, corpus, model_cfg
    ):
        from decouple.corpus import EOS, concat_knowledge
        from decouple.seqmodel import (
            encode_example,
            forward_logprobs,
            response_logprob,
            sample_knowledge_batch,
        )

        pairs = response_pairs(corpus.dialogues[:3])
        params = init_params(model_cfg, seed=13)
        cfg = _cfg(method="reallm")

        expected_sup = 0.0
        for p in pairs:
            z = concat_knowledge(p.knowledge)
            ex = encode_example(p.history, z, None)
            lp = forward_logprobs(params, ex)
            rows = ex.knowledge_marker + np.arange(len(z) + 1)
            targets = np.append(ex.tokens[ex.knowledge_marker + 1:], EOS)
            expected_sup += float(-lp[rows, targets].sum()) / len(rows) / len(pairs)

        samples = sample_knowledge_batch(
            params, [p.history for p in pairs], cfg.z_max_len,
            cfg.temperature, np.random.default_rng(0),
        )
        expected_phi = 0.0
        for p, s in zip(pairs, samples):
            y = list(p.response.tokens) + [EOS]
            total, per_tok = response_logprob(
                params, p.history, s.context_tokens() or None, y
            )
            expected_phi += -total / len(per_tok) / len(pairs)

        rec = reallm_step(params, None, pairs, cfg, Adam(params, cfg.lr),
                          np.random.default_rng(0))
        assert abs(rec.loss - (expected_sup + expected_phi)) < 1e-9

    def test_memorizes_single_knowledge_sentence(self, model_cfg, corpus):
        # one dialogue, many steps: greedy sampling reproduces the paired z
        from decouple.seqmodel import sample_knowledge
        from decouple.corpus import EOS, concat_knowledge

        dlg = corpus.dialogues[0]
        pairs = response_pairs([dlg])
        params = init_params(model_cfg, seed=14)
        cfg = _cfg(method="reallm", lr=5e-3)
        opt = Adam(params, cfg.lr)
        rng = np.random.default_rng(4)
        for _ in range(80):
            reallm_step(params, None, pairs, cfg, opt, rng)
        z_greedy = sample_knowledge(params, pairs[0].history, max_len=12,
                                    temperature=0.0, seed=0)
        want = concat_knowledge(dlg.knowledge) + [EOS]
        assert list(z_greedy.tokens) == want


class TestRunTraining:
    def test_method_dataset_mismatch_fails_before_training(self, model_cfg):
        bare = [Dialogue(utterances=(
            Utterance("A", (9,)), Utterance("B", (10,)),
        )) for _ in range(4)]
        cfg = _cfg(method="full", epochs=1)
        with pytest.raises(ConfigError, match="knowledge"):
            run_training(bare, _FakeVocab(), model_cfg, cfg)

    def test_vanilla_runs_on_knowledge_free_data(self, model_cfg, corpus):
        bare = [Dialogue(utterances=d.utterances) for d in corpus.dialogues[:12]]
        cfg = _cfg(method="vanilla", epochs=1, batch_size=8)
        result = run_training(bare, corpus.vocab, model_cfg, cfg)
        assert math.isfinite(result.best_valid_ppl)

    def test_same_seed_same_checkpoint(self, corpus, model_cfg):
        cfg = _cfg(method="full", epochs=2, batch_size=16, seed=42)
        a = run_training(corpus.dialogues, corpus.vocab, model_cfg, cfg)
        b = run_training(corpus.dialogues, corpus.vocab, model_cfg, cfg)
        for k in a.params.arrays:
            np.testing.assert_array_equal(a.params.arrays[k], b.params.arrays[k])
        assert a.best_valid_ppl == b.best_valid_ppl

    def test_decoupling_pretrains_lm_when_missing(self, corpus, model_cfg):
        cfg = _cfg(method="decoupling", epochs=1, batch_size=16)
        result = run_training(corpus.dialogues[:20], corpus.vocab, model_cfg,
                              cfg, knowledge=corpus.knowledge)
        assert result.lm is not None and result.lm.frozen

    def test_checkpoints_written(self, corpus, model_cfg, tmp_path):
        cfg = _cfg(method="vanilla", epochs=2, batch_size=16)
        result = run_training(corpus.dialogues, corpus.vocab, model_cfg, cfg,
                              out_dir=tmp_path)
        assert (tmp_path / "best.ckpt").exists()
        assert result.best_checkpoint == tmp_path / "best.ckpt"
        assert any(p.name.startswith("step-") for p in tmp_path.iterdir())

    def test_validation_lengths_by_method(self):
        assert validation_length("full") is None
        assert validation_length("vanilla") == 0
        assert validation_length("decoupling") == 0
        assert validation_length("tenlen") == 10


class _FakeVocab:
    def content_hash(self):
        return "x"

    def __len__(self):
        return 150


class TestClassificationHead:
    def test_cls_weight_trains_the_head(self, corpus):
        cfg_model = ModelConfig(vocab_size=len(corpus.vocab), d_model=16,
                                n_layers=1, n_heads=2, max_seq_len=64,
                                cls_head=True)
        params = init_params(cfg_model, seed=15)
        whead_before = params.arrays["whead"].copy()
        pairs = response_pairs(corpus.dialogues[:8])
        cfg = _cfg(method="full", cls_weight=1.0)
        rec = mle_step(params, pairs, "full", cfg, Adam(params, cfg.lr),
                       np.random.default_rng(0))
        assert math.isfinite(rec.loss)
        assert not np.array_equal(params.arrays["whead"], whead_before)

    def test_cls_weight_without_head_rejected(self, corpus, model_cfg):
        params = init_params(model_cfg, seed=16)
        pairs = response_pairs(corpus.dialogues[:4])
        cfg = _cfg(method="full", cls_weight=0.5)
        with pytest.raises(ConfigError):
            mle_step(params, pairs, "full", cfg, Adam(params, cfg.lr),
                     np.random.default_rng(0))

    def test_head_learns_to_rank_gold_first(self, corpus):
        from decouple.seqmodel import rank_candidates

        cfg_model = ModelConfig(vocab_size=len(corpus.vocab), d_model=16,
                                n_layers=1, n_heads=2, max_seq_len=64,
                                cls_head=True)
        params = init_params(cfg_model, seed=17)
        pairs = response_pairs(corpus.dialogues[:16])
        cfg = _cfg(method="full", cls_weight=1.0, lr=5e-3)
        opt = Adam(params, cfg.lr)
        rng = np.random.default_rng(1)
        for _ in range(40):
            mle_step(params, pairs, "full", cfg, opt, rng)
        hits = 0
        for i, p in enumerate(pairs[:8]):
            distractor = pairs[(i + 3) % len(pairs)].response.tokens
            from decouple.corpus import concat_knowledge

            res = rank_candidates(params, p.history,
                                  concat_knowledge(p.knowledge),
                                  [p.response.tokens, distractor],
                                  gold_index=0)
            hits += res.hit
        assert hits >= 6
