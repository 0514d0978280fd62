"""Attention masks for utterance-segmented conversation windows.

A segment is several consecutive utterances of one conversation,
concatenated along time.  Encoder frames may look back across utterance
boundaries but never forward; decoder tokens are strictly causal; the
decoder's view of the encoder can be confined to the utterance a token
belongs to.  Streaming adds frame look-ahead budgets on top.

Masks are boolean matrices with True = attention allowed, query rows by
key columns.  They are built once per segment and treated as immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

NEG_INF = float("-inf")


@dataclass(frozen=True)
class SegmentLayout:
    """Frame and token counts of each utterance in a segment.

    The last utterance is the current one; everything before it is
    context.  Frame counts are post-subsampling encoder frames.
    """

    utt_frame_lens: tuple
    utt_token_lens: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "utt_frame_lens", tuple(int(n) for n in self.utt_frame_lens))
        object.__setattr__(self, "utt_token_lens", tuple(int(n) for n in self.utt_token_lens))
        if not self.utt_frame_lens:
            raise ContractError("segment layout needs at least one utterance")
        if any(n < 1 for n in self.utt_frame_lens):
            raise ContractError(f"utterance frame counts must be >= 1: {self.utt_frame_lens}")
        if any(n < 1 for n in self.utt_token_lens):
            raise ContractError(f"utterance token counts must be >= 1: {self.utt_token_lens}")
        if self.utt_token_lens and len(self.utt_token_lens) != len(self.utt_frame_lens):
            raise ContractError(
                f"{len(self.utt_token_lens)} token counts for "
                f"{len(self.utt_frame_lens)} utterances")

    @property
    def num_utterances(self) -> int:
        return len(self.utt_frame_lens)

    @property
    def current_index(self) -> int:
        return len(self.utt_frame_lens) - 1

    @property
    def total_frames(self) -> int:
        return sum(self.utt_frame_lens)

    @property
    def total_tokens(self) -> int:
        return sum(self.utt_token_lens)

    def frame_slice(self, utt: int) -> slice:
        starts = np.cumsum((0,) + self.utt_frame_lens)
        return slice(int(starts[utt]), int(starts[utt + 1]))

    def token_slice(self, utt: int) -> slice:
        if not self.utt_token_lens:
            raise ContractError("layout has no token counts")
        starts = np.cumsum((0,) + self.utt_token_lens)
        return slice(int(starts[utt]), int(starts[utt + 1]))

    def frame_to_utt(self) -> np.ndarray:
        """Utterance index of every frame, shape [total_frames]."""
        return np.repeat(np.arange(self.num_utterances), self.utt_frame_lens)

    def token_to_utt(self) -> np.ndarray:
        if not self.utt_token_lens:
            raise ContractError("layout has no token counts")
        return np.repeat(np.arange(self.num_utterances), self.utt_token_lens)

    def context_only(self) -> "SegmentLayout":
        """The same segment without its current utterance."""
        if self.num_utterances < 2:
            raise ContractError("segment has no context utterances")
        return SegmentLayout(self.utt_frame_lens[:-1],
                             self.utt_token_lens[:-1] if self.utt_token_lens else ())


def encoder_context_mask(layout: SegmentLayout,
                         streaming_lookahead: int | None = None) -> np.ndarray:
    """Self-attention mask over segment frames.

    A frame sees every frame of its own and all earlier utterances, and
    nothing from later utterances.  With a look-ahead budget ``a``, keys
    are additionally limited to query_frame + a; the budget applies at
    every encoder layer, so total delay grows with depth.
    """
    if streaming_lookahead is not None and streaming_lookahead < 0:
        raise ContractError(f"streaming lookahead must be >= 0, got {streaming_lookahead}")
    utt = layout.frame_to_utt()
    mask = utt[None, :] <= utt[:, None]
    if streaming_lookahead is not None:
        t = layout.total_frames
        idx = np.arange(t)
        mask = mask & (idx[None, :] <= idx[:, None] + streaming_lookahead)
    return mask


def decoder_self_mask(layout: SegmentLayout | int) -> np.ndarray:
    """Strictly causal mask over a token stream (layout or plain count)."""
    n = layout if isinstance(layout, int) else layout.total_tokens
    if n == 0:
        raise ContractError("layout has no token counts")
    return np.tril(np.ones((n, n), dtype=bool))


def source_attention_mask(layout: SegmentLayout,
                          span: str = "current_utterance",
                          trigger_frame: int | None = None,
                          src_lookahead: int | None = None) -> np.ndarray:
    """Token-to-frame mask for the decoder's encoder attention.

    span='full_segment' exposes every frame to every token;
    span='current_utterance' confines each token to the frames of the
    utterance it belongs to.  A trigger_frame with a look-ahead budget
    further limits keys to frames <= trigger_frame + src_lookahead,
    which is the view of one streaming decode step.
    """
    if span not in ("full_segment", "current_utterance"):
        raise ContractError(f"unknown source span {span!r}")
    n_tok, n_frm = layout.total_tokens, layout.total_frames
    if n_tok == 0:
        raise ContractError("layout has no token counts")
    if span == "full_segment":
        mask = np.ones((n_tok, n_frm), dtype=bool)
    else:
        mask = layout.frame_to_utt()[None, :] == layout.token_to_utt()[:, None]
    if trigger_frame is not None:
        if not 0 <= trigger_frame < n_frm:
            raise ContractError(
                f"trigger frame {trigger_frame} outside segment of {n_frm} frames")
        budget = trigger_frame + (src_lookahead or 0)
        mask = mask & (np.arange(n_frm)[None, :] <= budget)
    return mask


def trigger_source_mask(layout: SegmentLayout,
                        trigger_frames: np.ndarray,
                        src_lookahead: int) -> np.ndarray:
    """Per-token triggered source mask: row l sees frames <= trig[l] + b.

    Used when training or rescoring with per-token trigger alignments;
    rows stay intersected with the within-utterance span.
    """
    base = source_attention_mask(layout, span="current_utterance")
    trig = np.asarray(trigger_frames, dtype=np.int64)
    if trig.shape != (layout.total_tokens,):
        raise ContractError(
            f"need one trigger frame per token: got {trig.shape}, "
            f"expected ({layout.total_tokens},)")
    if trig.size and (trig.min() < 0 or trig.max() >= layout.total_frames):
        raise ContractError("trigger frame outside segment")
    cols = np.arange(layout.total_frames)
    return base & (cols[None, :] <= (trig + src_lookahead)[:, None])


@dataclass(frozen=True)
class MaskBundle:
    enc: np.ndarray
    dec_self: np.ndarray
    src: np.ndarray


def training_mask_bundle(layout: SegmentLayout,
                         mode: str = "context",
                         enc_lookahead: int | None = None,
                         src_lookahead: int | None = None,
                         trigger_frames: np.ndarray | None = None) -> MaskBundle:
    """The three masks a training forward pass needs.

    baseline: every utterance is an island (block-diagonal everywhere).
    context: frames see the past, tokens are causal across the segment,
    source attention stays within each token's own utterance.
    streaming: context intersected with the frame look-ahead budgets;
    per-token trigger frames further restrict source attention when
    given.
    """
    if mode not in ("baseline", "context", "streaming"):
        raise ContractError(f"unknown training mode {mode!r}")
    if mode == "baseline":
        futt = layout.frame_to_utt()
        tutt = layout.token_to_utt()
        enc = futt[None, :] == futt[:, None]
        dec = decoder_self_mask(layout) & (tutt[None, :] == tutt[:, None])
        src = source_attention_mask(layout, span="current_utterance")
        return MaskBundle(enc, dec, src)
    if mode == "context":
        return MaskBundle(encoder_context_mask(layout),
                          decoder_self_mask(layout),
                          source_attention_mask(layout, span="current_utterance"))
    enc = encoder_context_mask(layout, streaming_lookahead=enc_lookahead)
    dec = decoder_self_mask(layout)
    if trigger_frames is not None:
        src = trigger_source_mask(layout, trigger_frames, src_lookahead or 0)
    else:
        src = source_attention_mask(layout, span="current_utterance")
    return MaskBundle(enc, dec, src)


def additive_mask(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Boolean mask to additive scores: True -> 0, False -> -inf."""
    out = np.zeros(mask.shape, dtype=dtype)
    out[~mask] = NEG_INF
    return out
