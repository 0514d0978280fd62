"""Frame-synchronous streaming recognition with trigger-gated attention.

The stream decoder consumes raw feature frames as they arrive and emits
tokens before the utterance ends.  Three budgets shape its latency:

  * the subsampling front end needs a handful of raw frames past each
    output row (a fixed property of its strided convolutions);
  * every encoder layer may look ``enc_lookahead`` subsampled frames
    past its query, so the encoder stack's delay compounds per layer;
  * a token proposed by the CTC prefix beam at frame tau is scored by
    the attention decoder over encoder frames up to tau +
    ``src_lookahead``, so the proposal waits until those frames exist.

Every encoder row is computed exactly once, from exactly the keys its
look-ahead allows, and every token's attention span depends only on its
trigger frame.  The produced states, scores, and tokens are therefore
bit-identical no matter how the input is chunked; chunking moves only
the wall-clock moment at which each token can be committed.  Tokens are
committed once all beam hypotheses agree on them (stable-prefix rule)
and are never revoked.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .blocks import subsampled_length
from .ctc import CtcPrefix, ctc_prefix_beam_step, initial_prefix_beam
from .data import EOS_ID, FIRST_DATA_ID
from .decoding import (ActivationCache, _load, _require_recyclable,
                       commit_decoder_context)
from .errors import ContractError
from .tensor import Tensor

RAW_PER_SUB = 4          # subsampling stride product
SUB_EXTRA_RAW = 3        # extra raw frames one subsampled row reaches past 4s


@dataclasses.dataclass
class StreamConfig:
    """Latency budgets and search sizes for one streaming decode."""

    enc_lookahead: int = 1
    src_lookahead: int = 12
    ctc_beam: int = 6
    candidate_factor: int = 2
    lam: float = 0.5
    gamma: float = 0.0
    max_len: int = 24
    length_normalize: bool = True
    chunk_raw_frames: int = 4

    def __post_init__(self):
        if self.enc_lookahead < 0 or self.src_lookahead < 0:
            raise ContractError("look-ahead budgets must be >= 0")
        if self.ctc_beam < 1 or self.candidate_factor < 1:
            raise ContractError("beam sizes must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lam must be inside [0, 1], got {self.lam}")
        if self.max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {self.max_len}")
        if self.chunk_raw_frames < 1:
            raise ContractError("chunk size must be >= 1 raw frames")


def theoretical_delay_ms(n_enc_blocks: int, enc_lookahead: int,
                         src_lookahead: int, frame_period_ms: float = 10.0,
                         subsample_factor: int = RAW_PER_SUB) -> dict:
    """Nominal added latency of the two look-ahead budgets, in milliseconds.

    Encoder delay compounds across blocks (each layer waits for the one
    below); the source budget applies once, at the decoder.
    """
    sub_ms = frame_period_ms * subsample_factor
    enc = n_enc_blocks * enc_lookahead * sub_ms
    src = src_lookahead * sub_ms
    return {"encoder_ms": enc, "source_ms": src, "total_ms": enc + src}


# -- incremental encoder -----------------------------------------------------------


class _LayerStream:
    """One encoder block evaluated in arrival order with bounded look-ahead.

    Input rows arrive incrementally; output row q is computed once its
    keys exist, attending to all context rows plus own rows [0, q + a]
    clipped to the rows the stream ever produces.  Each row is a
    single-query attention over exactly those keys, so its value cannot
    depend on how arrivals were grouped, and rows are never revised.
    """

    def __init__(self, blk, lookahead: int, ctx_kv: np.ndarray | None,
                 ctx_tail: np.ndarray | None, q_start: int, counter=None):
        self.blk = blk
        self.a = lookahead
        self.ctx_kv = None if ctx_kv is None else Tensor(ctx_kv)
        self.n_ctx = 0 if ctx_kv is None else ctx_kv.shape[1]
        self.q_start = q_start
        self.counter = counter
        self.conformer = hasattr(blk, "conv")
        self.tail = None if ctx_tail is None else Tensor(ctx_tail)
        self.resid: np.ndarray | None = None   # residual rows entering attention
        self.kv: np.ndarray | None = None      # normalized attention inputs
        self.n_in = 0
        self.n_out = 0

    def _extend_inputs(self, x_new: Tensor) -> None:
        if self.conformer:
            h = x_new + self.blk.ff1(self.blk.ln_ff1(x_new))
            kv_new = self.blk.ln_att(h)
        else:
            h = x_new
            kv_new = self.blk.ln_att(x_new)
        self.resid = (h.data if self.resid is None
                      else np.concatenate([self.resid, h.data], axis=1))
        self.kv = (kv_new.data if self.kv is None
                   else np.concatenate([self.kv, kv_new.data], axis=1))
        self.n_in = self.resid.shape[1]

    def _emit_row(self, q: int) -> Tensor:
        n_keys = min(self.n_in, q + self.a + 1)
        q_row = Tensor(self.kv[:, q:q + 1])
        own_kv = Tensor(self.kv[:, :n_keys])
        kv = own_kv if self.ctx_kv is None else T.concat(
            [self.ctx_kv, own_kv], axis=1)
        q_pos = np.array([self.q_start + q])
        k_pos = np.arange(self.n_ctx + n_keys)
        att = self.blk.mha(q_row, kv, kv, None, q_pos, k_pos)
        if self.counter is not None:
            self.counter.add("enc_self", 1, self.n_ctx + n_keys)
        h = Tensor(self.resid[:, q:q + 1]) + att
        if self.conformer:
            conv_out, glu = self.blk.conv.forward_block(h, self.tail)
            keep = self.blk.cfg.conv_kernel - 1
            if keep > 0:
                stream = (glu if self.tail is None
                          else T.concat([self.tail, glu], axis=1))
                self.tail = stream[:, max(0, stream.data.shape[1] - keep):, :]
            h = h + conv_out
            h = h + self.blk.ff2(self.blk.ln_ff2(h))
            return self.blk.ln_out(h)
        return h + self.blk.ffn(self.blk.ln_ffn(h))

    def _emit(self, limit: int) -> Tensor | None:
        if limit <= self.n_out:
            return None
        rows = [self._emit_row(q) for q in range(self.n_out, limit)]
        self.n_out = limit
        return rows[0] if len(rows) == 1 else T.concat(rows, axis=1)

    def feed(self, x_new: Tensor | None) -> Tensor | None:
        """Add input rows, return rows now computable under the look-ahead."""
        if x_new is not None and x_new.data.shape[1]:
            self._extend_inputs(x_new)
        return self._emit(max(0, self.n_in - self.a))

    def finish(self) -> Tensor | None:
        """Input ended: compute remaining rows with clipped look-ahead."""
        return self._emit(self.n_in)

    @property
    def tail_array(self) -> np.ndarray | None:
        if not self.conformer:
            return None
        if self.blk.cfg.conv_kernel == 1 or self.tail is None:
            d = self.blk.cfg.d_model
            return np.zeros((1, 0, d), dtype=T.default_dtype())
        return self.tail.data


class StreamEncoder:
    """Arrival-order encoder over one utterance, optionally on cached context."""

    def __init__(self, model, lookahead: int, cache=None, counter=None):
        self.model = model
        self.raw: np.ndarray | None = None
        self.n_sub = 0
        q_start = 0 if cache is None else cache.cached_sub_frames
        self.layers = []
        for li, blk in enumerate(model.enc_blocks):
            ctx = None if cache is None else cache.enc_context(li)
            tail = None if cache is None else cache.conv_tail(li)
            self.layers.append(_LayerStream(blk, lookahead, ctx, tail, q_start,
                                            counter))
        self.out_rows: np.ndarray | None = None

    @property
    def available(self) -> int:
        """Final encoder rows computed so far."""
        return 0 if self.out_rows is None else self.out_rows.shape[0]

    def _new_sub_rows(self) -> Tensor | None:
        n_raw = 0 if self.raw is None else self.raw.shape[0]
        s = subsampled_length(n_raw)
        if s <= self.n_sub:
            return None
        lo, hi = self.n_sub, s
        raw_slice = self.raw[RAW_PER_SUB * lo:
                             RAW_PER_SUB * (hi - 1) + RAW_PER_SUB
                             + SUB_EXTRA_RAW]
        rows = self.model.subsample_utterance(raw_slice)
        self.n_sub = s
        return T.reshape(rows, (1,) + rows.data.shape)

    def _cascade(self, x: Tensor | None, finishing: bool) -> None:
        for layer in self.layers:
            x = layer.feed(x)
            if finishing:
                tail_rows = layer.finish()
                if x is None:
                    x = tail_rows
                elif tail_rows is not None:
                    x = T.concat([x, tail_rows], axis=1)
        if x is not None and x.data.shape[1]:
            if self.model.enc_ln is not None:
                x = self.model.enc_ln(x)
            rows = x.data[0]
            self.out_rows = (rows if self.out_rows is None
                             else np.concatenate([self.out_rows, rows]))

    def feed_raw(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames)
        self.raw = frames if self.raw is None else np.concatenate(
            [self.raw, frames])
        with T.no_grad():
            self._cascade(self._new_sub_rows(), finishing=False)

    def finish(self) -> None:
        with T.no_grad():
            self._cascade(self._new_sub_rows(), finishing=True)

    def cache_payload(self):
        """(per-layer kv, per-layer conv tails or None) for recycling.

        The kv blocks are this utterance's normalized attention inputs,
        the same rows an offline incremental encode would cache; the
        tails are the trailing post-GLU frames for a following
        utterance's causal convolution.
        """
        if any(layer.kv is None for layer in self.layers):
            raise ContractError("cannot cache an empty stream")
        enc_kv = tuple(layer.kv for layer in self.layers)
        if not self.layers[0].conformer:
            return enc_kv, None
        return enc_kv, tuple(layer.tail_array for layer in self.layers)


# -- stream decoding ---------------------------------------------------------------


@dataclasses.dataclass
class TokenEmission:
    """Timing record for one committed token (frames are subsampled).

    trigger_frame and source_span are those of the token's attention
    scoring: the frame where the CTC beam first proposed it and the
    encoder frames its decoder step was allowed to see.  If a pruned
    prefix is later recreated, the beam's bookkeeping may show a newer
    trigger, but the score on record is the first one's.
    """

    token: int
    position: int
    trigger_frame: int
    source_span: int
    first_processable: int
    emitted_at: int
    added_latency_frames: int
    commitment_delay_frames: int
    added_latency_ms: float


@dataclasses.dataclass
class StreamResult:
    tokens: tuple
    score: float
    emissions: list
    sub_frames: int
    raw_frames: int
    source_spans: tuple
    enc_states: np.ndarray
    delays: dict


@dataclasses.dataclass
class _PrefixInfo:
    dec_rows: tuple
    log_p_att: float
    log_p_lm: float
    lm_state: object
    spans: tuple
    triggers: tuple


class _AttentionScorer:
    """Single-row decoder forwards against (cached context ++ prefix) rows."""

    def __init__(self, model, context, counter=None):
        self.model = model
        n_dec = len(model.dec_blocks)
        if context is None:
            self.dec_ctx = [None] * n_dec
            self.n_ctx = 0
        else:
            self.dec_ctx = [context.dec_context(li) for li in range(n_dec)]
            self.n_ctx = context.cached_token_rows
        self.counter = counter

    def step(self, info: _PrefixInfo, last_token: int, position: int,
             enc_rows: np.ndarray, span: int):
        """Next-token log-probs for the prefix, attending to enc[:span]."""
        with T.no_grad():
            h = self.model.embedder(np.array([[last_token]], dtype=np.int64))
            enc_t = Tensor(np.ascontiguousarray(
                enc_rows[:span], dtype=self.model.dtype)[None])
            rows = []
            for li, blk in enumerate(self.model.dec_blocks):
                parts = []
                if self.dec_ctx[li] is not None:
                    parts.append(self.dec_ctx[li])
                if info.dec_rows:
                    parts.append(info.dec_rows[li])
                ctx = Tensor(np.concatenate(parts, axis=1)) if parts else None
                h, gb = blk.forward_block(h, ctx, self.n_ctx + position, enc_t)
                rows.append(gb.data if not info.dec_rows else
                            np.concatenate([info.dec_rows[li], gb.data],
                                           axis=1))
                if self.counter is not None:
                    self.counter.add("dec_self", 1, self.n_ctx + position + 1)
                    self.counter.add("src", 1, span)
            logp = self.model.output_log_probs(
                self.model.dec_ln(h)).data[0, 0]
        return np.asarray(logp, dtype=np.float64), tuple(rows)


def stream_decode(model, feats: np.ndarray, config: StreamConfig,
                  cache=None, lm=None, lm_state=None, counter=None,
                  frame_period_ms: float = 10.0,
                  _encoder_out=None) -> StreamResult:
    """Decode one utterance from a simulated frame stream.

    Raw frames enter an arrival-order encoder chunk by chunk.  A CTC
    prefix beam advances one subsampled frame at a time, as soon as
    that frame's ``src_lookahead`` budget exists, and each newly
    proposed token is scored by the attention decoder over encoder
    frames up to its trigger plus that budget; hypotheses are then
    pruned by the joint score.  Tokens come out as soon as every beam
    hypothesis agrees on them; the remainder is settled by a final
    ranking that scores the end-of-sequence step over the whole
    utterance.

    ``_encoder_out``, when given, receives the finished StreamEncoder
    so callers can recycle its activations.
    """
    feats = np.asarray(feats)
    total_sub = subsampled_length(len(feats))
    if total_sub < 1:
        raise ContractError(
            f"utterance too short to stream: {len(feats)} raw frames")
    a, b = config.enc_lookahead, config.src_lookahead
    cands = np.arange(FIRST_DATA_ID, model.cfg.vocab_size)
    scorer = _AttentionScorer(model, cache, counter)
    if lm is not None and lm_state is None:
        lm_state = lm.initial_state()

    encoder = StreamEncoder(model, a, cache, counter)
    ctc_rows: list = []
    beam = initial_prefix_beam()
    table: dict = {(): _PrefixInfo((), 0.0, 0.0, lm_state, (), ())}
    committed: list = []
    emissions: list = []
    next_frame = 0          # next encoder frame the prefix beam will consume
    sub_delivered = 0       # input-side availability, in subsampled frames
    first_processable: dict = {}

    def ctc_row(f: int) -> np.ndarray:
        while len(ctc_rows) <= f:
            i = len(ctc_rows)
            with T.no_grad():
                row = model.ctc_log_softmax(
                    Tensor(np.ascontiguousarray(
                        encoder.out_rows[i:i + 1],
                        dtype=model.dtype)[None])).data[0, 0]
            ctc_rows.append(np.asarray(row, dtype=np.float64))
        return ctc_rows[f]

    def combined(prefix: CtcPrefix) -> float:
        info = table[prefix.tokens]
        score = 0.0
        if config.lam < 1.0:
            score += (1.0 - config.lam) * prefix.log_prob
        if config.lam > 0.0:
            score += config.lam * info.log_p_att
        if config.gamma != 0.0:
            score += config.gamma * info.log_p_lm
        return score

    def emission(tok, pos, trigger, span, emitted_at) -> TokenEmission:
        fp = first_processable[trigger]
        return TokenEmission(
            token=int(tok), position=int(pos), trigger_frame=int(trigger),
            source_span=int(span), first_processable=int(fp),
            emitted_at=int(emitted_at),
            added_latency_frames=int(emitted_at - trigger),
            commitment_delay_frames=int(emitted_at - fp),
            added_latency_ms=float((emitted_at - trigger) * frame_period_ms
                                   * RAW_PER_SUB))

    def process_frame(f: int) -> None:
        nonlocal beam
        shortlist = config.ctc_beam * config.candidate_factor
        merged = ctc_prefix_beam_step(beam, ctc_row(f), f, shortlist,
                                      candidates=cands)
        kept = []
        for prefix in merged:
            if len(prefix.tokens) > config.max_len:
                continue
            if prefix.tokens not in table:
                parent = table[prefix.tokens[:-1]]
                tok = int(prefix.tokens[-1])
                trigger = prefix.trigger_frames[-1]
                span = min(trigger + b + 1, total_sub)
                if config.lam > 0.0:
                    logp, rows = scorer.step(
                        parent,
                        prefix.tokens[-2] if len(prefix.tokens) > 1 else EOS_ID,
                        len(prefix.tokens) - 1, encoder.out_rows, span)
                    att = parent.log_p_att + float(logp[tok])
                else:
                    att, rows = 0.0, ()
                lm_lp, lm_st = ((0.0, parent.lm_state) if lm is None
                                else lm.score_next(parent.lm_state, tok))
                table[prefix.tokens] = _PrefixInfo(
                    rows, att, parent.log_p_lm + lm_lp, lm_st,
                    parent.spans + (span,), parent.triggers + (trigger,))
            kept.append(prefix)
        if not kept:
            raise ContractError("prefix beam died mid-stream")
        kept.sort(key=lambda p: (-combined(p), p.tokens))
        beam = kept[:config.ctc_beam]
        agreed = beam[0].tokens
        for p in beam[1:]:
            n = 0
            for x, y in zip(agreed, p.tokens):
                if x != y:
                    break
                n += 1
            agreed = agreed[:n]
        if list(agreed[:len(committed)]) != committed:
            raise ContractError("committed tokens were revoked")
        for pos in range(len(committed), len(agreed)):
            info = table[agreed[:pos + 1]]
            emissions.append(emission(agreed[pos], pos, info.triggers[pos],
                                      info.spans[pos], sub_delivered))
            committed.append(int(agreed[pos]))

    # -- the stream loop ------------------------------------------------------------
    pos = 0
    while pos < len(feats):
        chunk = feats[pos:pos + config.chunk_raw_frames]
        pos += len(chunk)
        encoder.feed_raw(chunk)
        sub_delivered = subsampled_length(pos)
        while next_frame + b + 1 <= encoder.available:
            first_processable.setdefault(next_frame, sub_delivered)
            process_frame(next_frame)
            next_frame += 1
    encoder.finish()
    sub_delivered = total_sub
    if encoder.available != total_sub:
        raise ContractError(
            f"stream encoder produced {encoder.available} of {total_sub} rows")
    while next_frame < total_sub:
        first_processable.setdefault(next_frame, sub_delivered)
        process_frame(next_frame)
        next_frame += 1

    # -- finalize: score the end step over the whole utterance, pick a winner --------
    best = None
    for prefix in beam:
        info = table[prefix.tokens]
        lm_eos = 0.0 if lm is None else lm.score_next(info.lm_state, EOS_ID)[0]
        score = 0.0
        if config.lam > 0.0:
            logp, _ = scorer.step(
                info, prefix.tokens[-1] if prefix.tokens else EOS_ID,
                len(prefix.tokens), encoder.out_rows, total_sub)
            score += config.lam * (info.log_p_att + float(logp[EOS_ID]))
        if config.lam < 1.0:
            score += (1.0 - config.lam) * prefix.log_prob
        if config.gamma != 0.0:
            score += config.gamma * (info.log_p_lm + lm_eos)
        if config.length_normalize:
            score /= len(prefix.tokens) + 1
        key = (-score, prefix.tokens)
        if best is None or key < best[0]:
            best = (key, prefix, score)
    final_prefix, final_score = best[1], best[2]
    if list(final_prefix.tokens[:len(committed)]) != committed:
        raise ContractError("final hypothesis contradicts committed tokens")
    info = table[final_prefix.tokens]
    for p in range(len(committed), len(final_prefix.tokens)):
        emissions.append(emission(final_prefix.tokens[p], p, info.triggers[p],
                                  info.spans[p], total_sub))
    if _encoder_out is not None:
        _encoder_out.append(encoder)

    return StreamResult(
        tokens=tuple(int(t) for t in final_prefix.tokens),
        score=float(final_score),
        emissions=emissions,
        sub_frames=total_sub,
        raw_frames=len(feats),
        source_spans=info.spans,
        enc_states=encoder.out_rows,
        delays=theoretical_delay_ms(len(model.enc_blocks), a, b,
                                    frame_period_ms))


def stream_conversation(model, records, config: StreamConfig, lm=None,
                        features_root: str = "",
                        budget_frames: int | None = None) -> list:
    """Stream every utterance of a conversation over a rolling cache.

    Each utterance is decoded from its frame stream while attending to
    the recycled activations of earlier utterances; afterwards its own
    activations and decoded tokens join the cache, within the raw-frame
    budget.  Context is always what was decoded, never ground truth.
    """
    results = []
    if not len(records):
        return results
    _require_recyclable(model)
    cache = ActivationCache(len(model.enc_blocks), len(model.dec_blocks),
                            budget_frames)
    lm_state = lm.initial_state() if lm is not None else None
    for rec in records:
        feats = _load(rec, features_root)
        cache.evict_for(len(feats))
        holder: list = []
        res = stream_decode(model, feats, config, cache=cache, lm=lm,
                            lm_state=lm_state, _encoder_out=holder)
        enc_kv, tails = holder[0].cache_payload()
        cache.append(len(feats), res.sub_frames, enc_kv, tails,
                     res.enc_states)
        commit_decoder_context(model, res.tokens, res.enc_states, cache)
        if lm is not None:
            lm_state = lm.advance(lm_state, res.tokens)
        results.append(res)
    return results
