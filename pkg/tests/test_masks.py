"""Mask construction checked against direct rule enumeration."""

import numpy as np
import pytest

from ctxasr.errors import ContractError
from ctxasr.masks import (MaskBundle, SegmentLayout, additive_mask, decoder_self_mask,
                          encoder_context_mask, source_attention_mask,
                          training_mask_bundle, trigger_source_mask)


def enumerate_encoder_mask(frame_lens, lookahead=None):
    """Oracle: apply the two allowance rules pair by pair."""
    utt = np.repeat(np.arange(len(frame_lens)), frame_lens)
    t = utt.size
    mask = np.zeros((t, t), dtype=bool)
    for q in range(t):
        for k in range(t):
            ok = utt[k] <= utt[q]
            if lookahead is not None:
                ok = ok and k <= q + lookahead
            mask[q, k] = ok
    return mask


class TestLayout:
    def test_basic_accessors(self):
        lay = SegmentLayout((2, 3, 4), (1, 2, 2))
        assert lay.num_utterances == 3
        assert lay.current_index == 2
        assert lay.total_frames == 9
        assert lay.total_tokens == 5
        assert lay.frame_slice(1) == slice(2, 5)
        assert lay.token_slice(2) == slice(3, 5)
        np.testing.assert_array_equal(lay.frame_to_utt(), [0, 0, 1, 1, 1, 2, 2, 2, 2])
        ctx = lay.context_only()
        assert ctx.utt_frame_lens == (2, 3)

    def test_validation(self):
        with pytest.raises(ContractError):
            SegmentLayout(())
        with pytest.raises(ContractError):
            SegmentLayout((2, 0))
        with pytest.raises(ContractError):
            SegmentLayout((2, 2), (1,))
        with pytest.raises(ContractError):
            SegmentLayout((3,)).context_only()


class TestEncoderContextMask:
    def test_two_utterances_no_streaming(self):
        m = encoder_context_mask(SegmentLayout((2, 2)))
        assert m[0].tolist() == [True, True, False, False]
        assert m[1].tolist() == [True, True, False, False]
        assert m[2].tolist() == [True, True, True, True]
        assert m[3].tolist() == [True, True, True, True]

    def test_single_utterance_all_true(self):
        m = encoder_context_mask(SegmentLayout((5,)))
        assert m.all()

    def test_lookahead_one_hand_enumeration(self):
        m = encoder_context_mask(SegmentLayout((2, 2)), streaming_lookahead=1)
        assert m[2].tolist() == [True, True, True, True]
        assert m[0].tolist() == [True, True, False, False]
        assert m[1].tolist() == [True, True, False, False]

    @pytest.mark.parametrize("frame_lens", [(1,), (3,), (2, 2), (1, 3, 2), (4, 1, 2, 3)])
    @pytest.mark.parametrize("lookahead", [None, 0, 1, 2, 100])
    def test_matches_enumeration(self, frame_lens, lookahead):
        got = encoder_context_mask(SegmentLayout(frame_lens), lookahead)
        np.testing.assert_array_equal(got, enumerate_encoder_mask(frame_lens, lookahead))

    def test_every_row_allows_self(self):
        m = encoder_context_mask(SegmentLayout((2, 3, 1)), streaming_lookahead=0)
        assert np.diagonal(m).all()

    def test_lookahead_monotone(self):
        lay = SegmentLayout((3, 2, 4))
        prev = encoder_context_mask(lay, 0)
        for a in (1, 2, 5):
            cur = encoder_context_mask(lay, a)
            assert np.all(prev <= cur)
            prev = cur
        assert np.array_equal(encoder_context_mask(lay, 10 ** 6),
                              encoder_context_mask(lay))

    def test_negative_lookahead_rejected(self):
        with pytest.raises(ContractError):
            encoder_context_mask(SegmentLayout((2,)), -1)


class TestDecoderAndSourceMasks:
    def test_decoder_causal(self):
        m = decoder_self_mask(SegmentLayout((2,), (1,)))
        assert m.shape == (1, 1) and m[0, 0]
        m = decoder_self_mask(SegmentLayout((2, 2), (2, 1)))
        np.testing.assert_array_equal(m, np.tril(np.ones((3, 3), dtype=bool)))
        assert m[2].all()

    def test_source_full_segment(self):
        m = source_attention_mask(SegmentLayout((3, 2), (1, 2)), span="full_segment")
        assert m.shape == (3, 5) and m.all()

    def test_source_current_utterance_blocks(self):
        lay = SegmentLayout((3, 2), (1, 2))
        m = source_attention_mask(lay, span="current_utterance")
        assert m[0].tolist() == [True, True, True, False, False]
        assert m[1].tolist() == [False, False, False, True, True]
        assert m[2].tolist() == [False, False, False, True, True]

    def test_source_trigger_budget(self):
        lay = SegmentLayout((6,), (2,))
        m = source_attention_mask(lay, span="full_segment",
                                  trigger_frame=3, src_lookahead=2)
        assert m[0].tolist() == [True] * 6
        with pytest.raises(ContractError):
            source_attention_mask(lay, span="full_segment", trigger_frame=6)

    def test_trigger_source_mask_rows(self):
        lay = SegmentLayout((2, 4), (1, 2))
        m = trigger_source_mask(lay, np.array([2, 3, 4]), src_lookahead=1)
        # token 0 belongs to utterance 0: frames {0,1} and <= 3
        assert m[0].tolist() == [True, True, False, False, False, False]
        # token 1 (current utt): frames {2..5} and <= 4
        assert m[1].tolist() == [False, False, True, True, True, False]
        assert m[2].tolist() == [False, False, True, True, True, True]
        with pytest.raises(ContractError):
            trigger_source_mask(lay, np.array([0, 0]), 0)

    def test_every_source_row_nonempty(self):
        lay = SegmentLayout((2, 4), (2, 3))
        trig = np.array([0, 1, 2, 2, 3])
        m = trigger_source_mask(lay, trig, src_lookahead=0)
        assert m.any(axis=1).all()


class TestTrainingBundles:
    def test_baseline_single_utterance_full(self):
        b = training_mask_bundle(SegmentLayout((4,), (2,)), mode="baseline")
        assert b.enc.all() and b.enc.shape == (4, 4)

    def test_context_equals_baseline_on_single_utterance(self):
        lay = SegmentLayout((4,), (3,))
        base = training_mask_bundle(lay, mode="baseline")
        ctx = training_mask_bundle(lay, mode="context")
        np.testing.assert_array_equal(base.enc, ctx.enc)
        np.testing.assert_array_equal(base.dec_self, ctx.dec_self)
        np.testing.assert_array_equal(base.src, ctx.src)

    def test_baseline_isolates_utterances(self):
        b = training_mask_bundle(SegmentLayout((2, 2), (1, 1)), mode="baseline")
        assert not b.enc[2, 0] and not b.enc[0, 2]
        assert not b.dec_self[1, 0]

    def test_streaming_is_intersection(self):
        lay = SegmentLayout((3, 3), (2, 2))
        a, btrig = 1, np.array([1, 2, 3, 4])
        ctx = training_mask_bundle(lay, mode="context")
        stream = training_mask_bundle(lay, mode="streaming", enc_lookahead=a,
                                      src_lookahead=1, trigger_frames=btrig)
        idx = np.arange(lay.total_frames)
        look = idx[None, :] <= idx[:, None] + a
        np.testing.assert_array_equal(stream.enc, ctx.enc & look)
        np.testing.assert_array_equal(stream.dec_self, ctx.dec_self)
        trig_look = idx[None, :] <= (btrig + 1)[:, None]
        np.testing.assert_array_equal(stream.src, ctx.src & trig_look)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ContractError):
            training_mask_bundle(SegmentLayout((2,), (1,)), mode="chunk")


class TestAdditiveMask:
    def test_values(self):
        m = np.array([[True, False], [False, True]])
        out = additive_mask(m)
        assert out[0, 0] == 0.0 and np.isneginf(out[0, 1])
        assert out.dtype == np.float32
