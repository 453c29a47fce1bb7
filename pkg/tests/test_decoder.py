import math

import numpy as np
import pytest

from patentsum import autodiff as ad
from patentsum import decoder as dec
from patentsum.autodiff import Tape
from patentsum.config import TrainConfig
from patentsum.corpus import STOP_ID, PatentRecord, build_vocab
from patentsum.training import encode_for_config, init_model_params


def tiny_config(**overrides):
    base = dict(
        hidden_master=3, hidden_slave=3, hidden_decoder=3, d_c=3, embedding=3,
        K=2, dropout=0.0, tokenizer="whitespace", max_out=12, seed=7,
        batch_size=2, epochs=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_model(cfg, corpus_text="w x y z the a b"):
    vocab = build_vocab([corpus_text.split()], max_size=50)
    params = init_model_params(cfg, len(vocab))
    return vocab, params


def example_for(vocab, cfg, spec="w x y", claims="w z", abstract="w x"):
    rec = PatentRecord("t", "EX1", abstract, spec, claims)
    return encode_for_config(rec, vocab, cfg)


class TestAttentionScores:
    def _params(self, rng, attn=2, dh=3, mh=2):
        return dec.AttentionParams(
            v_a=ad.tensor(rng.normal(size=(1, attn)), track=True),
            W_a=ad.tensor(rng.normal(size=(attn, dh)), track=True),
            U_a=ad.tensor(rng.normal(size=(attn, 2 * mh)), track=True),
            W_c=ad.tensor(rng.normal(size=(attn, 1)), track=True),
        )

    def test_zero_coverage_matches_coverage_off(self):
        rng = np.random.default_rng(1)
        p = self._params(rng)
        h = ad.tensor(rng.normal(size=(3, 1)))
        H = ad.tensor(rng.normal(size=(4, 5)))
        cov = ad.tensor(np.zeros((1, 5)))
        on = dec.attention_scores(h, H, cov, p, use_coverage=True)
        off = dec.attention_scores(h, H, cov, p, use_coverage=False)
        np.testing.assert_array_equal(on.data, off.data)

    def test_zero_match_vector_gives_uniform(self):
        rng = np.random.default_rng(2)
        p = self._params(rng)
        p.v_a.data[:] = 0.0
        h = ad.tensor(rng.normal(size=(3, 1)))
        H = ad.tensor(rng.normal(size=(4, 6)))
        scores = dec.attention_scores(h, H, ad.tensor(np.zeros((1, 6))), p)
        np.testing.assert_array_equal(scores.data, np.zeros((1, 6)))
        a = ad.softmax(scores)
        np.testing.assert_allclose(a.data, np.full((1, 6), 1 / 6), atol=1e-12)

    def test_hand_computed_two_positions(self):
        one = lambda *s: ad.tensor(np.ones(s))
        p = dec.AttentionParams(v_a=one(1, 1), W_a=one(1, 1), U_a=one(1, 2), W_c=one(1, 1))
        h = ad.tensor([[0.5]])
        H = ad.tensor(np.array([[1.0, -1.0], [0.0, 2.0]]))
        cov = ad.tensor([[0.25, 0.75]])
        scores = dec.attention_scores(h, H, cov, p, use_coverage=True)
        exp0 = math.tanh(0.5 + 1.0 + 0.25)
        exp1 = math.tanh(0.5 + 1.0 + 0.75)
        np.testing.assert_allclose(scores.data, [[exp0, exp1]], atol=1e-12)

    def test_coverage_length_mismatch(self):
        rng = np.random.default_rng(3)
        p = self._params(rng)
        with pytest.raises(ad.ShapeError):
            dec.attention_scores(
                ad.tensor(rng.normal(size=(3, 1))),
                ad.tensor(rng.normal(size=(4, 5))),
                ad.tensor(np.zeros((1, 4))),
                p,
            )

    def test_precomputed_cache_identical(self):
        rng = np.random.default_rng(4)
        p = self._params(rng)
        h = ad.tensor(rng.normal(size=(3, 1)))
        H = ad.tensor(rng.normal(size=(4, 5)))
        cov = ad.tensor(rng.uniform(size=(1, 5)))
        ua = ad.matmul(p.U_a, H)
        a = dec.attention_scores(h, H, cov, p, ua_states=ua)
        b = dec.attention_scores(h, H, cov, p)
        np.testing.assert_allclose(a.data, b.data, atol=1e-15)


class TestContextVector:
    def test_one_hot_selects_state(self):
        H = ad.tensor(np.array([[1.0, 5.0], [2.0, 6.0]]))
        c = dec.context_vector(ad.tensor([[0.0, 1.0]]), H)
        np.testing.assert_array_equal(c.data, [[5.0], [6.0]])

    def test_uniform_is_mean(self):
        H = ad.tensor(np.array([[1.0, 3.0], [2.0, 4.0]]))
        c = dec.context_vector(ad.tensor([[0.5, 0.5]]), H)
        np.testing.assert_allclose(c.data, [[2.0], [3.0]])

    def test_hand_mix(self):
        H = ad.tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        c = dec.context_vector(ad.tensor([[0.25, 0.75]]), H)
        np.testing.assert_allclose(c.data, [[0.25], [0.75]])

    def test_rejects_unnormalized(self):
        with pytest.raises(ad.ShapeError):
            dec.context_vector(ad.tensor([[0.5, 0.1]]), ad.tensor(np.ones((2, 2))))


class TestPartialContent:
    def test_empty_prefix_is_tanh_bias(self):
        W = ad.tensor(np.ones((2, 3)))
        b = ad.tensor([[0.2], [-0.4]])
        out = dec.partial_content([], W, b)
        np.testing.assert_allclose(out.data, np.tanh(b.data))

    def test_constant_states(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=(3, 1))
        W = ad.tensor(rng.normal(size=(2, 3)))
        b = ad.tensor(rng.normal(size=(2, 1)))
        out = dec.partial_content([ad.tensor(s)] * 3, W, b)
        np.testing.assert_allclose(out.data, np.tanh(W.data @ s + b.data), atol=1e-12)

    def test_two_state_hand_value(self):
        W = ad.tensor([[2.0]])
        b = ad.tensor([[0.5]])
        states = [ad.tensor([[1.0]]), ad.tensor([[3.0]])]
        out = dec.partial_content(states, W, b)
        assert out.item() == pytest.approx(math.tanh(2.0 * 2.0 + 0.5))


class TestDecoderStep:
    def test_schedule_error_on_non_boundary(self):
        rng = np.random.default_rng(6)
        cfg = tiny_config()
        _, params = tiny_model(cfg)
        y = ad.tensor(rng.normal(size=(3, 1)))
        h = ad.tensor(rng.normal(size=(3, 1)))
        s = ad.tensor(rng.normal(size=(3, 1)))
        with pytest.raises(ad.ShapeError):
            dec.decoder_step(y, h, s, params.dec_gru, params.P_f, step=3, K=2)
        with pytest.raises(ad.ShapeError):
            dec.decoder_step(y, h, None, params.dec_gru, params.P_f, step=2, K=2)

    def test_fused_branch_projects_concat(self):
        rng = np.random.default_rng(7)
        cfg = tiny_config()
        _, params = tiny_model(cfg)
        y = ad.tensor(rng.normal(size=(3, 1)))
        h = ad.tensor(rng.normal(size=(3, 1)))
        s = ad.tensor(rng.normal(size=(3, 1)))
        fused = dec.decoder_step(y, h, s, params.dec_gru, params.P_f, step=2, K=2)
        manual_h = params.P_f.data @ np.vstack([h.data, s.data])
        from patentsum.encoders import gru_step
        manual = gru_step(params.dec_gru, y, ad.tensor(manual_h))
        np.testing.assert_allclose(fused.data, manual.data, atol=1e-12)


class TestVocabDistribution:
    def test_zero_params_uniform(self):
        h = ad.tensor(np.ones((2, 1)))
        c = ad.tensor(np.ones((3, 1)))
        P = dec.vocab_distribution(h, c, ad.tensor(np.zeros((5, 5))), ad.tensor(np.zeros((5, 1))))
        np.testing.assert_allclose(P.data, np.full((5, 1), 0.2), atol=1e-12)

    def test_saturating_bias(self):
        h = ad.tensor(np.zeros((2, 1)))
        c = ad.tensor(np.zeros((2, 1)))
        b = np.zeros((4, 1)); b[2, 0] = 20.0
        P = dec.vocab_distribution(h, c, ad.tensor(np.zeros((4, 4))), ad.tensor(b))
        assert P.data[2, 0] > 0.999999

    def test_hand_softmax(self):
        h = ad.tensor([[1.0]])
        c = ad.tensor([[2.0]])
        W = ad.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        b = ad.tensor(np.zeros((3, 1)))
        P = dec.vocab_distribution(h, c, W, b)
        logits = np.array([1.0, 2.0, 3.0])
        expect = np.exp(logits - 3.0) / np.exp(logits - 3.0).sum()
        np.testing.assert_allclose(P.data[:, 0], expect, atol=1e-12)


class TestGenerationProbability:
    def _pp(self, fill):
        mk = lambda *s: ad.tensor(np.full(s, fill))
        return dec.PointerParams(w_c=mk(2, 1), w_h=mk(2, 1), w_y=mk(2, 1), w_d=mk(2, 1),
                                 b_g=mk(1, 1))

    def test_zero_params_give_half(self):
        pp = self._pp(0.0)
        v = ad.tensor(np.ones((2, 1)))
        assert dec.generation_probability(v, v, v, v, pp).item() == pytest.approx(0.5)

    def test_large_negative_bias_copies(self):
        pp = self._pp(0.0)
        pp.b_g.data[:] = -20.0
        v = ad.tensor(np.ones((2, 1)))
        assert dec.generation_probability(v, v, v, v, pp).item() < 1e-8

    def test_one_dim_hand_value(self):
        mk = lambda x: ad.tensor([[x]])
        pp = dec.PointerParams(w_c=mk(0.5), w_h=mk(-1.0), w_y=mk(2.0), w_d=mk(0.25), b_g=mk(0.1))
        c, h, y, Cd = mk(2.0), mk(1.0), mk(0.5), mk(-2.0)
        z = 0.5 * 2.0 - 1.0 * 1.0 + 2.0 * 0.5 + 0.25 * -2.0 + 0.1
        got = dec.generation_probability(c, h, y, Cd, pp).item()
        assert got == pytest.approx(1.0 / (1.0 + math.exp(-z)), abs=1e-12)


class TestExtendedDistribution:
    def test_pure_generation_pads_oov_with_zeros(self):
        P_v = ad.tensor([[0.2], [0.3], [0.5]])
        P_p = ad.tensor([[1.0]])
        a = ad.tensor([[0.6, 0.4]])
        P_w = dec.extended_distribution(P_v, P_p, a, [3, 4], 5)
        np.testing.assert_allclose(P_w.data[:, 0], [0.2, 0.3, 0.5, 0.0, 0.0], atol=1e-12)

    def test_pure_copy_aggregates_repeated_oov(self):
        P_v = ad.tensor([[0.5], [0.5]])
        P_p = ad.tensor([[0.0]])
        a = ad.tensor([[0.4, 0.6]])
        P_w = dec.extended_distribution(P_v, P_p, a, [2, 2], 3)
        assert P_w.data[2, 0] == pytest.approx(1.0)

    def test_hand_mixture(self):
        # vocab = [w, r]; source tokens [w, q, w] with q OOV at extended id 2
        P_v = ad.tensor([[0.9], [0.1]])
        P_p = ad.tensor([[0.4]])
        a = ad.tensor([[0.5, 0.3, 0.2]])
        P_w = dec.extended_distribution(P_v, P_p, a, [0, 2, 0], 3)
        assert P_w.data[0, 0] == pytest.approx(0.4 * 0.9 + 0.6 * 0.7)
        assert P_w.data[2, 0] == pytest.approx(0.6 * 0.3)
        assert P_w.data[1, 0] == pytest.approx(0.4 * 0.1)
        assert P_w.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_sums_to_one_for_random_mixtures(self):
        rng = np.random.default_rng(8)
        for p_gen in (0.0, 0.5, 1.0):
            for _ in range(50):
                V, T = 6, 5
                logits = rng.normal(size=(V, 1))
                P_v = ad.softmax(ad.tensor(logits))
                a = ad.softmax(ad.tensor(rng.normal(size=(1, T))))
                ids = rng.integers(0, V + 2, size=T).tolist()
                P_w = dec.extended_distribution(P_v, ad.tensor([[p_gen]]), a, ids, V + 2)
                assert (P_w.data >= 0).all()
                assert P_w.data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_extended_id_out_of_range(self):
        P_v = ad.tensor([[1.0]])
        with pytest.raises(ad.ShapeError):
            dec.extended_distribution(P_v, ad.tensor([[0.5]]), ad.tensor([[1.0]]), [5], 3)


class TestCoverageUpdate:
    def test_initial_coverage_is_zero_then_first_attention(self):
        cov = ad.tensor(np.zeros((1, 3)))
        a0 = ad.tensor([[0.2, 0.3, 0.5]])
        np.testing.assert_array_equal(dec.coverage_update(cov, a0).data, a0.data)

    def test_three_uniform_steps(self):
        cov = ad.tensor(np.zeros((1, 4)))
        a = ad.tensor(np.full((1, 4), 0.25))
        for _ in range(3):
            cov = dec.coverage_update(cov, a)
        np.testing.assert_allclose(cov.data, np.full((1, 4), 0.75))

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            dec.coverage_update(ad.tensor(np.zeros((1, 3))), ad.tensor([[1.0]]))


class TestDecodeSequence:
    def test_untrained_model_terminates_and_normalizes(self):
        cfg = tiny_config(max_out=15)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="w x y q w", abstract="w x")
        res = dec.decode_sequence(ex, params, cfg)
        assert len(res.ids) <= 15
        for step in res.trace.steps:
            assert step.checksum == pytest.approx(1.0, abs=1e-6)

    def test_trace_has_one_record_per_emitted_token(self):
        cfg = tiny_config(max_out=9)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg)
        res = dec.decode_sequence(ex, params, cfg)
        emitted = len(res.ids) + (1 if res.trace.steps[-1].emitted_id == STOP_ID else 0)
        assert len(res.trace.steps) == emitted
        assert [s.step for s in res.trace.steps] == list(range(1, emitted + 1))

    def test_coverage_in_trace_sums_to_step_index(self):
        cfg = tiny_config(max_out=10)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="w x y z w x")
        res = dec.decode_sequence(ex, params, cfg)
        for step in res.trace.steps:
            assert sum(step.coverage) == pytest.approx(step.step, abs=1e-6)

    def test_coverage_monotone_nondecreasing(self):
        cfg = tiny_config(max_out=10)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="w x y z")
        res = dec.decode_sequence(ex, params, cfg)
        prev = np.zeros(len(res.trace.steps[0].coverage))
        for step in res.trace.steps:
            cur = np.asarray(step.coverage)
            assert (cur >= prev - 1e-12).all()
            prev = cur

    def test_fusion_schedule_is_multiples_of_k(self):
        for K in (1, 2, 5):
            cfg = tiny_config(K=K, max_out=11)
            vocab, params = tiny_model(cfg)
            ex = example_for(vocab, cfg)
            res = dec.decode_sequence(ex, params, cfg)
            L = len(res.trace.steps)
            assert res.trace.fused_steps() == [s for s in range(1, L + 1) if s % K == 0]

    def test_large_k_never_fuses(self):
        cfg = tiny_config(K=200, max_out=10)
        vocab, params = tiny_model(cfg)
        res = dec.decode_sequence(example_for(vocab, cfg), params, cfg)
        assert res.trace.fused_steps() == []

    def test_slave_off_never_fuses_even_with_small_k(self):
        cfg = tiny_config(K=1, slave=False)
        vocab, params = tiny_model(cfg)
        res = dec.decode_sequence(example_for(vocab, cfg), params, cfg)
        assert res.trace.fused_steps() == []

    def test_pointer_off_never_emits_extended_ids(self):
        cfg = tiny_config(pointer=False, max_out=20)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="w q1 q2 q3 x")  # several OOV source tokens
        assert len(ex.oov_words) == 3
        res = dec.decode_sequence(ex, params, cfg)
        assert all(i < len(vocab) for i in res.ids)
        assert all(s.p_gen is None for s in res.trace.steps)

    def test_forced_copy_emits_oov(self):
        # pointer gate pushed to copy, attention pinned on the OOV position
        cfg = tiny_config(max_out=4, K=50)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="q q q", abstract="w")
        params.pointer.b_g.data[:] = -40.0          # pure copy mode
        res = dec.decode_sequence(ex, params, cfg)
        assert res.ids
        assert all(i == len(vocab) for i in res.ids)  # every source position is the OOV q
        assert all(s.p_gen < 1e-10 for s in res.trace.steps)

    def test_traces_differ_only_at_fusion_boundaries(self):
        cfg_small = tiny_config(K=3, max_out=9)
        cfg_large = tiny_config(K=200, max_out=9)
        vocab, params = tiny_model(cfg_small)
        ex = example_for(vocab, cfg_small)
        res_small = dec.decode_sequence(ex, params, cfg_small)
        res_large = dec.decode_sequence(ex, params, cfg_large)
        first_fusion = res_small.trace.fused_steps()[0]
        for s_small, s_large in zip(res_small.trace.steps, res_large.trace.steps):
            if s_small.step < first_fusion:
                np.testing.assert_allclose(s_small.attention, s_large.attention, atol=1e-12)
                assert s_small.emitted_id == s_large.emitted_id
        assert res_small.trace.fused_steps() != res_large.trace.fused_steps()

    def test_beam_width_one_matches_greedy(self):
        cfg = tiny_config(max_out=8)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg)
        greedy = dec.decode_sequence(ex, params, cfg, mode="greedy")
        beam = dec.decode_sequence(ex, params, cfg, mode="beam", beam_width=1)
        assert greedy.ids == beam.ids

    def test_beam_log_prob_at_least_greedy(self):
        cfg = tiny_config(max_out=8)
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="w x y z w", abstract="w x y")
        greedy = dec.decode_sequence(ex, params, cfg, mode="greedy")
        beam = dec.decode_sequence(ex, params, cfg, mode="beam", beam_width=4)
        assert beam.log_prob >= greedy.log_prob - 1e-9

    def test_unknown_mode(self):
        cfg = tiny_config()
        vocab, params = tiny_model(cfg)
        with pytest.raises(ValueError):
            dec.decode_sequence(example_for(vocab, cfg), params, cfg, mode="sampling")


class TestTraceSerialization:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_config(max_out=6)
        vocab, params = tiny_model(cfg)
        res = dec.decode_sequence(example_for(vocab, cfg), params, cfg)
        path = tmp_path / "trace.jsonl"
        res.trace.save(path)
        loaded = dec.DecodeTrace.load(path)
        assert loaded == res.trace


class TestSingleStepGradient:
    def test_full_step_loss_gradient_settings(self):
        """One decode step through attention, pointer and coverage passes FD."""
        cfg = tiny_config(K=1)  # step 1 fuses, exercising the slave path too
        vocab, params = tiny_model(cfg)
        ex = example_for(vocab, cfg, spec="w x q", abstract="w")
        gold = ex.summary_extended_ids[1]
        pd = params.as_dict()
        leaves = [pd[k] for k in (
            "embedding", "master_fwd.W_u", "W_p", "gate.W_s", "gate.W_k", "slave_gru.W_h",
            "dec_gru.W_u", "P_f", "P_0", "attn.v_a", "attn.W_a", "attn.U_a", "attn.W_c",
            "W_v", "b_v", "pointer.w_c", "pointer.w_d", "W_d", "b_d",
        )]

        def f():
            src = dec.encode_sources(params, cfg, ex)
            state = dec.initial_state(params, cfg, src)
            out = dec.advance(params, cfg, src, state,
                              ad.embed_row(params.embedding, ex.summary_ids[0]))
            nll = ad.neg(ad.log(ad.pick(out.dist, gold)))
            pen = ad.sum_all(ad.minimum(out.attention, out.coverage_before))
            return ad.add(nll, pen)

        err = ad.grad_check(f, leaves)
        assert err < 1e-4
