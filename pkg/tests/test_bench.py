"""Attention MAC accounting and the decode benchmark harness."""

import dataclasses

import numpy as np
import pytest

import ctxasr.decoding as decoding_mod
from ctxasr.bench import (BenchReport, MacCounter, bench_decode,
                          bench_kernels, count_attention_macs, MAC_KINDS)
from ctxasr.blocks import ModelConfig
from ctxasr.data import UtteranceRecord
from ctxasr.decoding import DecodeConfig, UtteranceResult
from ctxasr.errors import BenchmarkInvalidError, ContractError
from ctxasr.model import Recognizer


def small_model(seed: int = 0) -> Recognizer:
    cfg = ModelConfig(arch="transformer", input_dim=8, d_model=16, n_heads=2,
                      d_ffn=24, n_enc_blocks=2, n_dec_blocks=1, vocab_size=6,
                      pos_encoding="relative")
    return Recognizer(cfg, np.random.default_rng(seed))


def make_record(index: int, feats: np.ndarray) -> UtteranceRecord:
    return UtteranceRecord(conversation_id="conv", utterance_index=index,
                           speaker_id="spk", feature_path="",
                           transcript=np.array([], dtype=np.int64),
                           num_frames=len(feats), features=feats)


def make_conversation(rng, lens) -> list:
    return [make_record(i, rng.normal(size=(n, 8)).astype(np.float32))
            for i, n in enumerate(lens)]


class TestMacArithmetic:
    def test_count_formula(self):
        assert count_attention_macs(1, 1, 1, 1) == 2
        assert count_attention_macs(3, 7, 2, 8) == 2 * 2 * 3 * 7 * 8
        assert count_attention_macs(10, 10, 4, 16) == 2 * 4 * 10 * 10 * 16

    @pytest.mark.parametrize("bad", [(0, 1, 1, 1), (1, 0, 1, 1),
                                     (1, 1, 0, 1), (1, 1, 1, 0),
                                     (-2, 3, 1, 1)])
    def test_rejects_nonpositive_sizes(self, bad):
        with pytest.raises(ContractError):
            count_attention_macs(*bad)

    def test_counter_accumulates_by_kind(self):
        cfg = ModelConfig(arch="transformer", input_dim=8, d_model=16,
                          n_heads=2, d_ffn=24, n_enc_blocks=1,
                          n_dec_blocks=1, vocab_size=6)
        counter = MacCounter(cfg)
        counter.add("enc_self", 3, 5)
        counter.add("enc_self", 2, 2)
        counter.add("dec_self", 1, 4)
        counter.add("src", 1, 9)
        dh = 8
        assert counter.enc_self == (count_attention_macs(3, 5, 2, dh)
                                    + count_attention_macs(2, 2, 2, dh))
        assert counter.dec_self == count_attention_macs(1, 4, 2, dh)
        assert counter.src == count_attention_macs(1, 9, 2, dh)
        assert counter.total == counter.enc_self + counter.dec_self + counter.src
        assert counter.snapshot() == {"enc_self": counter.enc_self,
                                      "dec_self": counter.dec_self,
                                      "src": counter.src}

    def test_counter_rejects_unknown_kind(self):
        cfg = ModelConfig(arch="transformer", input_dim=8, d_model=16,
                          n_heads=2, d_ffn=24, n_enc_blocks=1,
                          n_dec_blocks=1, vocab_size=6)
        with pytest.raises(ContractError):
            MacCounter(cfg).add("cross", 1, 1)


def synthetic_row(conversation, utterance, on_wall, off_wall, on_macs,
                  off_macs, audio_ms):
    row = {"conversation": conversation, "utterance": utterance,
           "raw_frames": int(audio_ms // 10), "audio_ms": audio_ms,
           "tokens": [2, 3],
           "recycle_on": {"wall_ms_median": on_wall, "wall_ms_min": on_wall,
                          "wall_ms_max": on_wall},
           "recycle_off": {"wall_ms_median": off_wall,
                           "wall_ms_min": off_wall,
                           "wall_ms_max": off_wall}}
    for kind in MAC_KINDS:
        row["recycle_on"][f"{kind}_macs"] = on_macs
        row["recycle_off"][f"{kind}_macs"] = off_macs
    row["speedup"] = off_wall / on_wall
    row["enc_self_mac_ratio"] = off_macs / on_macs
    return row


class TestBenchReport:
    def test_aggregate_arithmetic(self):
        rows = [synthetic_row(0, 0, 10.0, 40.0, 100, 400, 1000.0),
                synthetic_row(0, 1, 30.0, 40.0, 300, 400, 1000.0)]
        report = BenchReport(reps=2, warmup=1, rows=rows, summary={})
        agg = report.aggregate()
        assert agg["n_utterances"] == 2
        assert agg["wall_ms_on"] == 40.0
        assert agg["wall_ms_off"] == 80.0
        assert agg["speedup"] == 2.0
        assert agg["pseudo_rtf_on"] == 40.0 / 2000.0
        assert agg["pseudo_rtf_off"] == 80.0 / 2000.0
        for kind in MAC_KINDS:
            assert agg[f"{kind}_macs_on"] == 400
            assert agg[f"{kind}_macs_off"] == 800
            assert agg[f"{kind}_mac_ratio"] == 2.0

    def test_to_dict_round_trip(self):
        rows = [synthetic_row(0, 0, 1.0, 2.0, 10, 20, 500.0)]
        report = BenchReport(reps=1, warmup=0, rows=rows, summary={})
        report.summary = report.aggregate()
        d = report.to_dict()
        assert d["reps"] == 1 and d["warmup"] == 0
        assert d["rows"] == rows
        assert d["summary"] == report.aggregate()


class TestBenchDecode:
    def test_real_decode_report(self, rng):
        model = small_model()
        convs = [make_conversation(rng, (33, 29)),
                 make_conversation(rng, (41,))]
        config = DecodeConfig(beam_size=2, lam=0.5, max_len=6,
                              budget_frames=500)
        report = bench_decode(model, convs, config, reps=2, warmup=0)
        assert report.reps == 2 and report.warmup == 0
        assert len(report.rows) == 3
        assert report.summary == report.aggregate()
        for row in report.rows:
            assert row["recycle_on"]["wall_ms_median"] > 0
            assert row["recycle_off"]["wall_ms_median"] > 0
            assert row["speedup"] > 0
            for kind in MAC_KINDS:
                assert row["recycle_on"][f"{kind}_macs"] > 0
                assert row["recycle_off"][f"{kind}_macs"] > 0
        second = [r for r in report.rows if r["utterance"] == 1]
        assert second and all(r["enc_self_mac_ratio"] > 1.0 for r in second)

    def test_summary_is_recomputable(self, rng):
        model = small_model()
        convs = [make_conversation(rng, (33, 25))]
        config = DecodeConfig(beam_size=2, lam=0.5, max_len=5,
                              budget_frames=500)
        report = bench_decode(model, convs, config, reps=1, warmup=0)
        assert report.summary == report.aggregate()

    @pytest.mark.parametrize("kwargs", [dict(reps=0), dict(warmup=-1)])
    def test_rejects_bad_repetition_counts(self, kwargs, rng):
        model = small_model()
        convs = [make_conversation(rng, (33,))]
        with pytest.raises(ContractError):
            bench_decode(model, convs, DecodeConfig(), **kwargs)

    def _fake_result(self, index, tokens, macs):
        return UtteranceResult(
            utterance_index=index, tokens=tokens, score=0.0, flagged=False,
            wall_ms=1.0, raw_frames=40, sub_frames=9,
            window_utterances=(index,), window_raw_frames=40,
            window_sub_frames=9, window_token_rows=3,
            enc_self_macs=macs, dec_self_macs=macs, src_macs=macs,
            enc_self_macs_recompute=4 * macs,
            dec_self_macs_recompute=4 * macs, src_macs_recompute=4 * macs)

    def test_arm_disagreement_invalidates(self, rng, monkeypatch):
        model = small_model()
        convs = [make_conversation(rng, (33,))]

        def fake(model, records, config, lm=None, features_root=""):
            tokens = (2, 3) if config.recycle else (2, 4)
            return [self._fake_result(0, tokens, 100)]

        monkeypatch.setattr(decoding_mod, "decode_conversation", fake)
        with pytest.raises(BenchmarkInvalidError):
            bench_decode(model, convs, DecodeConfig(), reps=1, warmup=0)

    def test_unstable_repetitions_invalidate(self, rng, monkeypatch):
        model = small_model()
        convs = [make_conversation(rng, (33,))]
        calls = {"n": 0}

        def fake(model, records, config, lm=None, features_root=""):
            calls["n"] += 1
            tokens = (2, 3) if calls["n"] <= 2 else (2, 5)
            return [self._fake_result(0, tokens, 100)]

        monkeypatch.setattr(decoding_mod, "decode_conversation", fake)
        with pytest.raises(BenchmarkInvalidError):
            bench_decode(model, convs, DecodeConfig(), reps=2, warmup=0)

    def test_unstable_mac_counts_invalidate(self, rng, monkeypatch):
        model = small_model()
        convs = [make_conversation(rng, (33,))]
        calls = {"n": 0}

        def fake(model, records, config, lm=None, features_root=""):
            calls["n"] += 1
            return [self._fake_result(0, (2, 3), 100 + calls["n"])]

        monkeypatch.setattr(decoding_mod, "decode_conversation", fake)
        with pytest.raises(BenchmarkInvalidError):
            bench_decode(model, convs, DecodeConfig(), reps=2, warmup=0)


class TestBenchKernels:
    def test_rows_cover_sizes(self):
        rows = bench_kernels(sizes=[(30, 4, 6), (50, 6, 8)], reps=2, seed=1)
        assert len(rows) == 2
        for row, (t, n, v) in zip(rows, [(30, 4, 6), (50, 6, 8)]):
            assert (row["frames"], row["labels"], row["vocab"]) == (t, n, v)
            assert row["numpy_ms"] > 0

    def test_backends_agree_when_compiled(self):
        rows = bench_kernels(sizes=[(40, 5, 8)], reps=2, seed=3)
        row = rows[0]
        if row["compiled_ms"] is None:
            pytest.skip("compiled kernels not built")
        assert row["compiled_ms"] > 0
        assert row["speedup"] == row["numpy_ms"] / row["compiled_ms"]
        assert row["max_abs_diff"] < 1e-10

    def test_rejects_bad_reps(self):
        with pytest.raises(ContractError):
            bench_kernels(reps=0)
