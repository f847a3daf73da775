import hashlib

import numpy as np
import pytest

from ctctiming.ctc import LabelSequence, ctc_loss, log_softmax_rows
from ctctiming.pfr import PfrParams
from ctctiming.synth import (
    Classifier,
    CorpusSpec,
    TrainConfig,
    TrainingDivergedError,
    corpus_blank_occupancy,
    evaluate,
    generate_corpus,
    model_forward,
    model_backward,
    model_inputs,
    predict_timings,
    split_corpus,
    train,
)

from oracles import central_difference_grad, grad_relative_error


def small_spec(**kw):
    base = dict(n_utts=6, vocab_size=4, words_per_utt=(1, 2), seed=11)
    base.update(kw)
    return CorpusSpec(**base)


def corpus_digest(corpus):
    h = hashlib.sha256()
    for utt in corpus:
        h.update(utt.utt_id.encode())
        h.update(utt.features_lo.tobytes())
        h.update(utt.features_hi.tobytes())
        h.update(repr(utt.labels.tokens).encode())
        h.update(repr(utt.word_map.words).encode())
        h.update(repr([(w.start_ms, w.end_ms) for w in utt.ref_timings]).encode())
    return h.hexdigest()


class TestGenerateCorpus:
    def test_seed_determinism(self):
        a = generate_corpus(small_spec())
        b = generate_corpus(small_spec())
        assert corpus_digest(a) == corpus_digest(b)

    def test_different_seeds_differ(self):
        a = generate_corpus(small_spec())
        b = generate_corpus(small_spec(seed=12))
        assert corpus_digest(a) != corpus_digest(b)

    def test_noiseless_spans_constant_and_separable(self):
        # with zero noise, single-piece words are constant across their span
        # and distinct words with distinct tokens have distinct rows
        corpus = generate_corpus(small_spec(noise_sigma=0.0, pieces_per_word=(1, 1)))
        for utt in corpus:
            rows = {}
            for token, ref in zip(utt.labels.tokens, utt.ref_timings):
                lo, hi = int(ref.start_ms / 10), int(ref.end_ms / 10)
                span = utt.features_lo[lo:hi]
                assert np.ptp(span, axis=0).max() == 0.0
                rows[token] = span[0]
            for a in rows:
                for b in rows:
                    if a != b:
                        assert not np.allclose(rows[a], rows[b])

    def test_ref_timings_tile_spans(self):
        corpus = generate_corpus(small_spec())
        for utt in corpus:
            for timing in utt.ref_timings:
                assert 0.0 <= timing.start_ms < timing.end_ms <= utt.n_frames * 10.0
                assert timing.start_ms % 10.0 == 0.0 and timing.end_ms % 10.0 == 0.0
            # words ordered and non-overlapping
            for a, b in zip(utt.ref_timings, utt.ref_timings[1:]):
                assert a.end_ms <= b.start_ms

    def test_word_durations_within_construction_bounds(self):
        spec = CorpusSpec(n_utts=20, span_frames=(3, 10), pieces_per_word=(1, 3), seed=5)
        corpus = generate_corpus(spec)
        durations = [w.duration_ms for u in corpus for w in u.ref_timings]
        assert min(durations) >= 30.0 * 1
        assert max(durations) <= 100.0 * 3
        assert 30.0 <= np.mean(durations) <= 300.0

    def test_labels_have_no_adjacent_repeats(self):
        corpus = generate_corpus(small_spec(n_utts=20))
        for utt in corpus:
            toks = utt.labels.tokens
            assert all(a != b for a, b in zip(toks, toks[1:]))

    def test_hi_stream_is_smoothed(self):
        corpus = generate_corpus(small_spec(noise_sigma=1.0))
        utt = corpus[0]
        # averaging shrinks frame-to-frame variation
        lo_diff = np.abs(np.diff(utt.features_lo, axis=0)).mean()
        hi_diff = np.abs(np.diff(utt.features_hi, axis=0)).mean()
        assert hi_diff < lo_diff

    def test_infeasible_spec_rejected(self):
        with pytest.raises(ValueError):
            CorpusSpec(span_frames=(0, 3))
        with pytest.raises(ValueError):
            CorpusSpec(words_per_utt=(3, 2))
        with pytest.raises(ValueError):
            CorpusSpec(vocab_size=1)
        with pytest.raises(ValueError):
            CorpusSpec(noise_sigma=-0.1)


class TestSplit:
    def test_deterministic_partition(self):
        corpus = generate_corpus(small_spec(n_utts=10))
        a, b = split_corpus(corpus, holdout_every=5)
        assert len(a) == 8 and len(b) == 2
        assert {u.utt_id for u in a} | {u.utt_id for u in b} == {u.utt_id for u in corpus}


class TestModel:
    def test_zero_weights_uniform_posteriors(self):
        clf = Classifier.init(4, 8, 5, seed=0)
        for name, p in clf.params().items():
            p *= 0.0
        logits, _ = model_forward(clf, np.random.default_rng(0).normal(size=(6, 4)))
        assert np.allclose(logits.frames, 0.0)

    def test_forward_deterministic(self):
        clf = Classifier.init(4, 8, 5, seed=3)
        x = np.random.default_rng(1).normal(size=(7, 4))
        a, _ = model_forward(clf, x)
        b, _ = model_forward(clf, x)
        assert np.array_equal(a.frames, b.frames)

    def test_dim_mismatch_rejected(self):
        clf = Classifier.init(4, 8, 5, seed=3)
        with pytest.raises(ValueError):
            model_forward(clf, np.zeros((3, 5)))

    def test_zero_dlogits_zero_grads(self):
        clf = Classifier.init(3, 6, 4, seed=2)
        x = np.random.default_rng(2).normal(size=(5, 3))
        _, cache = model_forward(clf, x)
        grads = model_backward(clf, cache, np.zeros((5, 4)))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_stale_cache_rejected(self):
        clf = Classifier.init(3, 6, 4, seed=2)
        x = np.random.default_rng(2).normal(size=(5, 3))
        _, cache = model_forward(clf, x)
        clf.apply_update({k: np.zeros_like(v) for k, v in clf.params().items()}, 0.1)
        with pytest.raises(ValueError, match="stale"):
            model_backward(clf, cache, np.zeros((5, 4)))

    def test_full_chain_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            clf = Classifier.init(3, 4, 3, seed=int(rng.integers(1000)))
            x = rng.normal(size=(5, 3))
            labels = LabelSequence((1, 2))

            _, cache = model_forward(clf, x)
            from ctctiming.ctc import ctc_grad
            logits, _ = model_forward(clf, x)
            _, dlogits = ctc_grad(logits, labels)
            grads = model_backward(clf, cache, dlogits)

            for name, param in clf.params().items():
                def loss_at(p):
                    saved = param.copy()
                    param[...] = p
                    out, _ = model_forward(clf, x)
                    value = ctc_loss(log_softmax_rows(out), labels)[0]
                    param[...] = saved
                    return value

                fd = central_difference_grad(loss_at, param.copy())
                assert grad_relative_error(grads[name], fd) <= 1e-4, name

    def test_linear_network_matches_closed_form(self):
        # with tanh ~ identity for tiny inputs, the chain is near-linear and
        # the squared-error gradient matches the analytic least-squares one
        clf = Classifier.init(2, 3, 2, seed=4)
        x = np.random.default_rng(4).normal(size=(6, 2)) * 1e-4
        target = np.zeros((6, 2))
        logits, cache = model_forward(clf, x)
        dlogits = 2.0 * (logits.frames - target)
        grads = model_backward(clf, cache, dlogits)
        w_eff = clf.w1 @ clf.w2 @ clf.w3

        def quad_loss(w1):
            saved = clf.w1.copy()
            clf.w1[...] = w1
            out, _ = model_forward(clf, x)
            clf.w1[...] = saved
            return float(((out.frames - target) ** 2).sum())

        fd = central_difference_grad(quad_loss, clf.w1.copy(), step=1e-7)
        assert grad_relative_error(grads["w1"], fd) <= 1e-3
        assert w_eff.shape == (2, 2)


class TestTrain:
    def test_zero_learning_rate_freezes(self):
        corpus = generate_corpus(small_spec())
        config = TrainConfig(method="peaky", epochs=3, learning_rate=0.0, batch_size=4, seed=1)
        clf, records = train(config, corpus)
        losses = [r.mean_loss for r in records]
        assert np.ptp(losses) < 1e-12
        assert np.allclose(clf.w1, Classifier.init(clf.input_dim, 64, clf.n_classes, 1).w1)

    def test_loss_decreases_every_method(self):
        corpus = generate_corpus(small_spec(n_utts=8))
        for method, extra in [
            ("peaky", {}),
            ("npc", {}),
            ("cetc", {}),
            ("pfr", {"pfr": PfrParams(lambda_pfr=1.0, tau=7.0)}),
        ]:
            config = TrainConfig(method=method, epochs=20, learning_rate=0.05,
                                 batch_size=8, seed=2, **extra)
            _, records = train(config, corpus)
            stages = {r.stage for r in records}
            for stage in stages:
                recs = [r for r in records if r.stage == stage]
                assert recs[-1].mean_loss < recs[0].mean_loss, (method, stage)

    def test_training_deterministic(self):
        corpus = generate_corpus(small_spec())
        config = TrainConfig(method="npc", epochs=5, batch_size=4, seed=9)
        clf_a, rec_a = train(config, corpus)
        clf_b, rec_b = train(config, corpus)
        assert np.array_equal(clf_a.w3, clf_b.w3)
        assert [r.mean_loss for r in rec_a] == [r.mean_loss for r in rec_b]

    def test_pfr_requires_params(self):
        with pytest.raises(ValueError):
            TrainConfig(method="pfr")

    def test_gamma_defaults(self):
        config = TrainConfig(method="npc")
        assert (config.gamma_train, config.gamma_inf) == (0.25, 1.0)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(method="magic")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported_with_batch(self):
        # weights overflow to inf within a few steps at this rate
        corpus = generate_corpus(small_spec())
        config = TrainConfig(method="peaky", epochs=60, learning_rate=1e160, batch_size=4, seed=1)
        with pytest.raises(TrainingDivergedError, match="batch"):
            train(config, corpus)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train(TrainConfig(method="peaky"), [])


class TestEvaluate:
    def test_oracle_posteriors_give_zero_deltas(self):
        # one-hot posteriors built from the construction align exactly
        from ctctiming.ctc import forced_align, token_spans
        from ctctiming.boundary import words_from_spans
        from ctctiming.metrics import MatchedPair, timing_metrics

        corpus = generate_corpus(small_spec(pieces_per_word=(1, 1), n_utts=8))
        pairs = []
        for utt in corpus:
            log_probs = np.full((utt.n_frames, 5), -np.inf)
            log_probs[:, 0] = 0.0
            for token, ref in zip(utt.labels.tokens, utt.ref_timings):
                lo, hi = int(ref.start_ms / 10), int(ref.end_ms / 10)
                log_probs[lo:hi, 0] = -np.inf
                log_probs[lo:hi, token] = 0.0
            path = forced_align(log_probs, utt.labels)
            spans = token_spans(path, np.exp(log_probs))
            hyp = words_from_spans(spans, utt.word_map, 10.0, n_frames=utt.n_frames)
            pairs.extend(MatchedPair(h, r) for h, r in zip(hyp, utt.ref_timings))
        report = timing_metrics(pairs, [20.0])
        assert report.ave_st_delta_ms == 0.0
        assert report.ave_ed_delta_ms == 0.0
        assert report.pct_ws[20.0] == 100.0

    def test_offset_translation_equivariance(self):
        corpus = generate_corpus(small_spec())
        config = TrainConfig(method="npc", epochs=10, batch_size=8, seed=3)
        clf, _ = train(config, corpus)
        base = predict_timings(clf, corpus, 1.0, offset_ms=0.0)
        shifted = predict_timings(clf, corpus, 1.0, offset_ms=30.0)
        for utt_id in base:
            for a, b in zip(base[utt_id], shifted[utt_id]):
                if a.start_ms > 0:  # clamping exempt
                    assert b.start_ms - a.start_ms == pytest.approx(30.0)

    def test_blank_occupancy_bounds(self):
        corpus = generate_corpus(small_spec())
        clf = Classifier.init(corpus[0].features_hi.shape[1], 8, 5, seed=0)
        occ = corpus_blank_occupancy(clf, corpus)
        assert 0.0 <= occ <= 1.0

    def test_fusion_input_dims(self):
        corpus = generate_corpus(small_spec())
        fused = model_inputs(corpus[0], fuse_features=True)
        plain = model_inputs(corpus[0], fuse_features=False)
        assert fused.shape[1] == 2 * plain.shape[1]
        assert np.array_equal(fused[:, : plain.shape[1]], corpus[0].features_hi)

    def test_shifted_references_match_shifted_offset(self):
        # translating references and predictions together leaves all
        # percentage metrics unchanged (no clamping in play)
        from dataclasses import replace as dc_replace
        from ctctiming.boundary import WordTiming

        corpus = generate_corpus(small_spec(gap_frames=(4, 6)))
        config = TrainConfig(method="npc", epochs=15, batch_size=8, seed=3)
        clf, _ = train(config, corpus)
        base = evaluate(clf, corpus, 1.0, offset_ms=0.0, thresholds_ms=(20.0,))

        delta = 20.0
        shifted_corpus = [
            dc_replace(
                utt,
                ref_timings=[
                    WordTiming(w.word, w.start_ms + delta, w.end_ms + delta)
                    for w in utt.ref_timings
                ],
            )
            for utt in corpus
        ]
        shifted = evaluate(clf, shifted_corpus, 1.0, offset_ms=delta, thresholds_ms=(20.0,))
        assert shifted.pct_ws == base.pct_ws
        assert shifted.pct_we == base.pct_we
        assert shifted.ave_st_delta_ms == pytest.approx(base.ave_st_delta_ms)


class TestCetcTargets:
    def test_stage2_targets_valid_for_all_utterances(self):
        from ctctiming.boundary import CetcParams
        from ctctiming.synth import cetc_targets

        corpus = generate_corpus(small_spec(n_utts=10))
        config = TrainConfig(method="peaky", epochs=25, learning_rate=0.1,
                             batch_size=64, seed=2)
        clf, _ = train(config, corpus)
        targets = cetc_targets(clf, corpus, CetcParams(), n_classes=5)
        assert set(targets) == {u.utt_id for u in corpus}
        by_id = {u.utt_id: u for u in corpus}
        for utt_id, gt in targets.items():
            assert gt.targets.min() >= 0.0 and gt.targets.max() <= 1.0
            # apex: each token contributes at least one full-confidence frame
            utt = by_id[utt_id]
            for token in set(utt.labels.tokens):
                assert gt.targets[:, token].max() == pytest.approx(1.0)
