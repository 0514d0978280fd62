"""Streaming decode: arrival-order encoding, trigger gating, latency records."""

import numpy as np
import pytest

from ctxasr.blocks import ModelConfig, subsampled_length
from ctxasr.data import UtteranceRecord
from ctxasr.decoding import (ActivationCache, dense_encode_window,
                             encode_incremental, joint_beam_search)
from ctxasr.errors import ContractError
from ctxasr.lm import UniformLm
from ctxasr.model import Recognizer
from ctxasr.streaming import (StreamConfig, StreamEncoder, TokenEmission,
                              stream_conversation, stream_decode,
                              theoretical_delay_ms)


def small_config(arch: str, **overrides) -> ModelConfig:
    kw = dict(arch=arch, input_dim=8, d_model=16, n_heads=2, d_ffn=24,
              n_enc_blocks=2, n_dec_blocks=1, vocab_size=6,
              pos_encoding="relative")
    if arch == "conformer":
        kw.update(conv_mode="causal", conv_kernel=3)
    kw.update(overrides)
    return ModelConfig(**kw)


def small_model(arch: str, seed: int = 0) -> Recognizer:
    return Recognizer(small_config(arch), np.random.default_rng(seed))


def make_record(index: int, feats: np.ndarray) -> UtteranceRecord:
    return UtteranceRecord(conversation_id="conv", utterance_index=index,
                           speaker_id="spk", feature_path="",
                           transcript=np.array([], dtype=np.int64),
                           num_frames=len(feats), features=feats)


def run_encoder(model, feats, lookahead, chunk, cache=None) -> np.ndarray:
    enc = StreamEncoder(model, lookahead, cache)
    for lo in range(0, len(feats), chunk):
        enc.feed_raw(feats[lo:lo + chunk])
    enc.finish()
    return enc.out_rows


ARCHS = ("transformer", "conformer")


class TestStreamConfig:
    @pytest.mark.parametrize("bad", [
        dict(enc_lookahead=-1), dict(src_lookahead=-1), dict(ctc_beam=0),
        dict(candidate_factor=0), dict(lam=1.5), dict(lam=-0.1),
        dict(max_len=0), dict(chunk_raw_frames=0),
    ])
    def test_rejects_invalid_values(self, bad):
        with pytest.raises(ContractError):
            StreamConfig(**bad)

    def test_defaults_are_valid(self):
        cfg = StreamConfig()
        assert cfg.enc_lookahead == 1 and cfg.src_lookahead == 12


class TestDelayCalculator:
    def test_reference_operating_point(self):
        d = theoretical_delay_ms(12, 1, 12)
        assert d["encoder_ms"] == 480.0
        assert d["source_ms"] == 480.0
        assert d["total_ms"] == 960.0

    def test_scales_with_frame_geometry(self):
        d = theoretical_delay_ms(6, 2, 4, frame_period_ms=5.0,
                                 subsample_factor=2)
        assert d["encoder_ms"] == 6 * 2 * 10.0
        assert d["source_ms"] == 4 * 10.0
        assert d["total_ms"] == d["encoder_ms"] + d["source_ms"]


class TestStreamEncoder:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_chunk_grouping_never_changes_rows(self, arch, rng):
        model = small_model(arch)
        feats = rng.normal(size=(65, 8)).astype(np.float32)
        base = run_encoder(model, feats, 1, 1)
        for chunk in (3, 8, 31, len(feats)):
            assert np.array_equal(run_encoder(model, feats, 1, chunk), base)

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("lookahead", [0, 1, 3])
    def test_matches_dense_lookahead_mask(self, arch, lookahead, rng):
        model = small_model(arch)
        feats = rng.normal(size=(57, 8)).astype(np.float32)
        rows = run_encoder(model, feats, lookahead, 5)
        dense, _ = dense_encode_window(model, [feats],
                                       enc_lookahead=lookahead)
        assert rows.shape == np.asarray(dense).shape
        assert np.max(np.abs(rows.astype(np.float64)
                             - np.asarray(dense, dtype=np.float64))) < 1e-5

    @pytest.mark.parametrize("arch", ARCHS)
    def test_unbounded_lookahead_matches_offline_encoder(self, arch, rng):
        model = small_model(arch)
        feats = rng.normal(size=(49, 8)).astype(np.float32)
        rows = run_encoder(model, feats, 10 ** 6, 7)
        cache = ActivationCache(len(model.enc_blocks), len(model.dec_blocks))
        offline = encode_incremental(model, feats, cache)
        assert np.max(np.abs(rows.astype(np.float64)
                             - offline.astype(np.float64))) < 1e-5

    @pytest.mark.parametrize("arch", ARCHS)
    def test_cached_context_enters_attention(self, arch, rng):
        model = small_model(arch)
        ctx_feats = [rng.normal(size=(n, 8)).astype(np.float32)
                     for n in (33, 25)]
        feats = rng.normal(size=(41, 8)).astype(np.float32)
        cache = ActivationCache(len(model.enc_blocks), len(model.dec_blocks))
        for f in ctx_feats:
            encode_incremental(model, f, cache)
        rows = run_encoder(model, feats, 10 ** 6, 9, cache=cache)
        offline = encode_incremental(model, feats, cache)
        assert np.max(np.abs(rows.astype(np.float64)
                             - offline.astype(np.float64))) < 1e-5
        solo = run_encoder(model, feats, 10 ** 6, 9)
        assert np.max(np.abs(rows - solo)) > 1e-6

    @pytest.mark.parametrize("arch", ARCHS)
    def test_cache_payload_matches_offline_cache(self, arch, rng):
        model = small_model(arch)
        feats = rng.normal(size=(45, 8)).astype(np.float32)
        enc = StreamEncoder(model, 10 ** 6, None)
        enc.feed_raw(feats)
        enc.finish()
        enc_kv, tails = enc.cache_payload()
        cache = ActivationCache(len(model.enc_blocks), len(model.dec_blocks))
        encode_incremental(model, feats, cache)
        cached = cache.utterances[0]
        for li in range(len(model.enc_blocks)):
            assert enc_kv[li].shape == cached.enc_kv[li].shape
            assert np.max(np.abs(enc_kv[li].astype(np.float64)
                                 - cached.enc_kv[li].astype(np.float64))) < 1e-5
        if arch == "transformer":
            assert tails is None
            assert np.array_equal(enc_kv[0], cached.enc_kv[0])
        else:
            for li in range(len(model.enc_blocks)):
                assert tails[li].shape == cached.conv_tails[li].shape
                assert np.max(np.abs(tails[li].astype(np.float64)
                                     - cached.conv_tails[li]
                                     .astype(np.float64))) < 1e-5

    def test_empty_stream_cannot_be_cached(self):
        model = small_model("transformer")
        enc = StreamEncoder(model, 1, None)
        with pytest.raises(ContractError):
            enc.cache_payload()


class TestStreamDecode:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_chunk_grouping_never_changes_decode(self, arch, rng):
        model = small_model(arch)
        feats = rng.normal(size=(61, 8)).astype(np.float32)
        results = []
        for chunk in (5, 17, len(feats)):
            cfg = StreamConfig(enc_lookahead=1, src_lookahead=3, ctc_beam=4,
                               lam=0.5, max_len=8, chunk_raw_frames=chunk)
            results.append(stream_decode(model, feats, cfg))
        base = results[0]
        for res in results[1:]:
            assert res.tokens == base.tokens
            assert res.score == base.score
            assert np.array_equal(res.enc_states, base.enc_states)
            assert res.source_spans == base.source_spans
            assert ([(e.token, e.position, e.trigger_frame, e.source_span)
                     for e in res.emissions]
                    == [(e.token, e.position, e.trigger_frame, e.source_span)
                        for e in base.emissions])

    @pytest.mark.parametrize("arch", ARCHS)
    def test_exhaustive_label_sync_agreement(self, arch, rng):
        """Pure-CTC ranking: frame-synchronous search with no pruning must
        find the same winner as the label-synchronous offline search with
        near-identical score.  The shortlist must cover every merged
        candidate per frame (341 live prefixes times 5 extensions here);
        anything smaller drops and later recreates prefixes, losing part
        of their accumulated path probability."""
        model = small_model(arch, seed=1)
        feats = rng.normal(size=(53, 8)).astype(np.float32)
        cfg = StreamConfig(enc_lookahead=10 ** 6, src_lookahead=10 ** 6,
                           ctc_beam=400, candidate_factor=5, lam=0.0,
                           max_len=4)
        sres = stream_decode(model, feats, cfg)
        off = joint_beam_search(model, sres.enc_states, beam_size=2000,
                                lam=0.0, max_len=4, length_normalize=True)
        assert sres.tokens == off.best.tokens
        assert abs(sres.score
                   - off.best.selection_score(0.0, 0.0, True)) < 1e-9

    def test_source_spans_follow_triggers(self, rng):
        model = small_model("transformer")
        feats = rng.normal(size=(61, 8)).astype(np.float32)
        total = subsampled_length(len(feats))
        cfg = StreamConfig(enc_lookahead=1, src_lookahead=3, ctc_beam=4,
                           lam=0.5, max_len=8)
        res = stream_decode(model, feats, cfg)
        assert len(res.source_spans) == len(res.tokens)
        for e in res.emissions:
            assert e.source_span == min(e.trigger_frame + 3 + 1, total)
            assert res.source_spans[e.position] == e.source_span
        wide = stream_decode(model, feats, StreamConfig(
            enc_lookahead=1, src_lookahead=10 ** 6, ctc_beam=4, lam=0.5,
            max_len=8))
        assert all(s == total for s in wide.source_spans)

    def test_latency_identity_under_fine_chunks(self, rng):
        model = small_model("transformer")
        n_enc, a, b = len(model.enc_blocks), 1, 3
        feats = rng.normal(size=(73, 8)).astype(np.float32)
        total = subsampled_length(len(feats))
        cfg = StreamConfig(enc_lookahead=a, src_lookahead=b, ctc_beam=4,
                           lam=0.5, max_len=8, chunk_raw_frames=1)
        res = stream_decode(model, feats, cfg)
        assert res.emissions, "nothing was emitted"
        for e in res.emissions:
            assert e.first_processable == min(e.trigger_frame + b + 1
                                              + n_enc * a, total)
            assert e.added_latency_frames == e.emitted_at - e.trigger_frame
            assert e.commitment_delay_frames == (e.emitted_at
                                                 - e.first_processable)
            assert e.commitment_delay_frames >= 0
            assert e.added_latency_frames >= e.commitment_delay_frames
            assert e.added_latency_ms == e.added_latency_frames * 40.0

    def test_emissions_in_order_and_match_tokens(self, rng):
        model = small_model("conformer")
        feats = rng.normal(size=(69, 8)).astype(np.float32)
        cfg = StreamConfig(enc_lookahead=1, src_lookahead=4, ctc_beam=4,
                           lam=0.5, max_len=8)
        res = stream_decode(model, feats, cfg)
        assert [e.position for e in res.emissions] == list(
            range(len(res.tokens)))
        assert tuple(e.token for e in res.emissions) == res.tokens
        emitted = [e.emitted_at for e in res.emissions]
        assert emitted == sorted(emitted)
        assert all(isinstance(e, TokenEmission) for e in res.emissions)
        assert res.sub_frames == subsampled_length(len(feats))
        assert res.raw_frames == len(feats)
        assert res.delays == theoretical_delay_ms(len(model.enc_blocks), 1, 4)

    def test_uniform_lm_shifts_score_only(self, rng):
        model = small_model("transformer")
        feats = rng.normal(size=(49, 8)).astype(np.float32)
        vocab = model.cfg.vocab_size

        def run(gamma, lm):
            cfg = StreamConfig(enc_lookahead=2, src_lookahead=4, ctc_beam=600,
                               candidate_factor=2, lam=0.5, gamma=gamma,
                               max_len=3)
            return stream_decode(model, feats, cfg, lm=lm)

        base = run(0.0, None)
        shifted = run(0.7, UniformLm(vocab))
        assert shifted.tokens == base.tokens
        expected = base.score + 0.7 * (-np.log(vocab - 1))
        assert abs(shifted.score - expected) < 1e-9

    def test_encoder_mac_accounting(self, rng):
        from ctxasr.bench import MacCounter, count_attention_macs
        model = small_model("transformer")
        feats = rng.normal(size=(41, 8)).astype(np.float32)
        total = subsampled_length(len(feats))
        a = 2
        counter = MacCounter(model.cfg)
        cfg = StreamConfig(enc_lookahead=a, src_lookahead=3, ctc_beam=3,
                           lam=0.0, max_len=6)
        stream_decode(model, feats, cfg, counter=counter)
        h = model.cfg.n_heads
        dh = model.cfg.d_model // h
        per_layer = sum(count_attention_macs(1, min(total, q + a + 1), h, dh)
                        for q in range(total))
        assert counter.enc_self == len(model.enc_blocks) * per_layer
        assert counter.dec_self == 0 and counter.src == 0

    def test_rejects_unstreamable_utterance(self):
        model = small_model("transformer")
        with pytest.raises(ContractError):
            stream_decode(model, np.zeros((6, 8), dtype=np.float32),
                          StreamConfig())


class TestStreamConversation:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_context_carries_across_utterances(self, arch, rng):
        model = small_model(arch, seed=2)
        utts = [rng.normal(size=(n, 8)).astype(np.float32)
                for n in (41, 29, 37)]
        recs = [make_record(i, f) for i, f in enumerate(utts)]
        cfg = StreamConfig(enc_lookahead=1, src_lookahead=3, ctc_beam=4,
                           lam=0.5, max_len=8)
        results = stream_conversation(model, recs, cfg, budget_frames=200)
        assert len(results) == 3
        solo = stream_decode(model, utts[2], cfg)
        assert np.max(np.abs(results[2].enc_states - solo.enc_states)) > 1e-9

    @pytest.mark.parametrize("arch", ARCHS)
    def test_tight_budget_recovers_isolated_decode(self, arch, rng):
        model = small_model(arch, seed=2)
        utts = [rng.normal(size=(n, 8)).astype(np.float32)
                for n in (41, 29, 37)]
        recs = [make_record(i, f) for i, f in enumerate(utts)]
        cfg = StreamConfig(enc_lookahead=1, src_lookahead=3, ctc_beam=4,
                           lam=0.5, max_len=8)
        results = stream_conversation(model, recs, cfg, budget_frames=45)
        for feats, res in zip(utts, results):
            solo = stream_decode(model, feats, cfg)
            assert res.tokens == solo.tokens
            assert np.array_equal(res.enc_states, solo.enc_states)

    def test_language_model_threads_through(self, rng):
        model = small_model("transformer")
        utts = [rng.normal(size=(n, 8)).astype(np.float32) for n in (33, 29)]
        recs = [make_record(i, f) for i, f in enumerate(utts)]
        cfg = StreamConfig(enc_lookahead=1, src_lookahead=3, ctc_beam=4,
                           lam=0.5, gamma=0.3, max_len=6)
        results = stream_conversation(model, recs, cfg,
                                      lm=UniformLm(model.cfg.vocab_size),
                                      budget_frames=150)
        assert len(results) == 2
        assert all(isinstance(r.tokens, tuple) for r in results)

    def test_empty_conversation(self):
        model = small_model("transformer")
        assert stream_conversation(model, [], StreamConfig()) == []

    def test_absolute_positions_rejected(self, rng):
        cfg = small_config("transformer", pos_encoding="absolute")
        model = Recognizer(cfg, np.random.default_rng(0))
        feats = rng.normal(size=(33, 8)).astype(np.float32)
        recs = [make_record(0, feats)]
        from ctxasr.errors import RecyclingUnsupportedError
        with pytest.raises(RecyclingUnsupportedError):
            stream_conversation(model, recs, StreamConfig())
