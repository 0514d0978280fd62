"""Cache-driven incremental encoding and joint CTC-attention beam decoding.

The decoder here works on conversations: each utterance is recognized
against an attention window of earlier utterances.  With recycling on,
the window lives in an ActivationCache holding every cached utterance's
per-layer attention inputs, so a new utterance costs one block-forward
over its own frames against cached keys.  With recycling off, the
window is re-encoded from features at every utterance, either blockwise
(utterance-by-utterance, numerically identical to the recycling path)
or densely (one masked forward over the whole window, the conventional
baseline the benchmark times).

Exactness argument, in brief: subsampling and convolutions are strictly
causal and per-utterance, positions enter attention only as query/key
index differences, and every cached tensor is the layer-normalized
attention input of a full utterance.  Evaluating utterance blocks in
the same order with the same key layout therefore reproduces the same
arithmetic, bit for bit.  This holds only while the cache never evicts:
once an old utterance is dropped, later cached activations still
reflect the window they were computed in, while a fresh re-encode sees
the narrower window.  Decoded tokens are expected to agree anyway (and
the benchmark insists on it); the states themselves may drift.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import tensor as T
from .bench import MacCounter
from .ctc import CtcPrefixScorer
from .data import EOS_ID, FIRST_DATA_ID
from .errors import ContractError, RecyclingUnsupportedError
from .masks import SegmentLayout, encoder_context_mask
from .tensor import Tensor

EVALUATIONS = ("blockwise", "dense")


@dataclasses.dataclass
class DecodeConfig:
    """Knobs for conversation decoding.

    lam weighs attention against CTC in the combined score, gamma is
    the shallow-fusion language model weight.  budget_frames bounds the
    attention window in raw feature frames, exactly like segment
    assembly does for training.  evaluation picks how the recompute arm
    (recycle off) re-encodes its window.
    """

    beam_size: int = 8
    lam: float = 0.5
    gamma: float = 0.0
    budget_frames: int = 2500
    recycle: bool = True
    evaluation: str = "dense"
    max_len: int = 24
    length_normalize: bool = True
    eos_penalty: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ContractError(f"beam size must be >= 1, got {self.beam_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lam must be inside [0, 1], got {self.lam}")
        if self.budget_frames < 1:
            raise ContractError(
                f"frame budget must be >= 1, got {self.budget_frames}")
        if self.evaluation not in EVALUATIONS:
            raise ContractError(
                f"evaluation must be one of {EVALUATIONS}, got {self.evaluation!r}")
        if self.max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {self.max_len}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclasses.dataclass
class CachedUtterance:
    """Everything recycled from one utterance.

    enc_kv holds, per encoder layer, the layer-normalized attention
    input rows of this utterance ([1, t', d]); conv_tails holds, per
    conformer layer, the post-GLU stream's trailing kernel-1 frames as
    of the end of this utterance.  dec_kv holds the decoder-side
    normalized self-attention rows of [eos] + decoded tokens, filled in
    after the utterance has been decoded.  All arrays are read-only.
    """

    index: int
    raw_frames: int
    sub_frames: int
    enc_kv: tuple
    conv_tails: tuple | None
    enc_out: np.ndarray
    dec_kv: tuple | None = None
    tokens: tuple | None = None

    @property
    def token_rows(self) -> int:
        return 0 if self.tokens is None else len(self.tokens) + 1


class ActivationCache:
    """Utterance-granular activation store with frame-budget eviction.

    Utterances are appended in conversation order; eviction drops the
    oldest whole utterances until the incoming one fits the raw-frame
    capacity, mirroring how segment assembly picks context windows.
    With capacity None nothing is ever evicted.
    """

    def __init__(self, n_enc_layers: int, n_dec_layers: int,
                 capacity_frames: int | None = None):
        if n_enc_layers < 1 or n_dec_layers < 1:
            raise ContractError("cache needs at least one layer on each side")
        if capacity_frames is not None and capacity_frames < 1:
            raise ContractError(
                f"cache capacity must be >= 1 frames, got {capacity_frames}")
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.capacity_frames = capacity_frames
        self.utterances: list = []
        self._next_index = 0

    @property
    def n_utterances(self) -> int:
        return len(self.utterances)

    @property
    def cached_raw_frames(self) -> int:
        return sum(cu.raw_frames for cu in self.utterances)

    @property
    def cached_sub_frames(self) -> int:
        return sum(cu.sub_frames for cu in self.utterances)

    @property
    def cached_token_rows(self) -> int:
        return sum(cu.token_rows for cu in self.utterances)

    def evict_for(self, incoming_raw_frames: int) -> int:
        """Drop oldest utterances until the incoming one fits; returns count."""
        if incoming_raw_frames < 1:
            raise ContractError(
                f"incoming frame count must be >= 1, got {incoming_raw_frames}")
        dropped = 0
        if self.capacity_frames is not None:
            while (self.utterances and
                   self.cached_raw_frames + incoming_raw_frames > self.capacity_frames):
                self.utterances.pop(0)
                dropped += 1
        return dropped

    def append(self, raw_frames: int, sub_frames: int, enc_kv, conv_tails,
               enc_out: np.ndarray) -> CachedUtterance:
        if len(enc_kv) != self.n_enc_layers:
            raise ContractError(
                f"{len(enc_kv)} encoder kv blocks for {self.n_enc_layers} layers")
        if conv_tails is not None and len(conv_tails) != self.n_enc_layers:
            raise ContractError(
                f"{len(conv_tails)} conv tails for {self.n_enc_layers} layers")
        cu = CachedUtterance(
            index=self._next_index, raw_frames=int(raw_frames),
            sub_frames=int(sub_frames),
            enc_kv=tuple(_frozen(a) for a in enc_kv),
            conv_tails=(None if conv_tails is None
                        else tuple(_frozen(a) for a in conv_tails)),
            enc_out=_frozen(enc_out))
        self._next_index += 1
        self.utterances.append(cu)
        return cu

    def enc_context(self, layer: int) -> np.ndarray | None:
        blocks = [cu.enc_kv[layer] for cu in self.utterances]
        if not blocks:
            return None
        return blocks[0] if len(blocks) == 1 else np.concatenate(blocks, axis=1)

    def conv_tail(self, layer: int) -> np.ndarray | None:
        """Trailing post-GLU frames feeding the next utterance's causal conv."""
        if not self.utterances or self.utterances[-1].conv_tails is None:
            return None
        tail = self.utterances[-1].conv_tails[layer]
        return tail if tail.shape[1] else None

    # -- decoder side ----------------------------------------------------------------

    def attach_decoder(self, dec_kv, tokens) -> None:
        """Fill the earliest utterance still missing its decoder rows."""
        if len(dec_kv) != self.n_dec_layers:
            raise ContractError(
                f"{len(dec_kv)} decoder kv blocks for {self.n_dec_layers} layers")
        for cu in self.utterances:
            if cu.dec_kv is None:
                cu.dec_kv = tuple(_frozen(a) for a in dec_kv)
                cu.tokens = tuple(int(t) for t in tokens)
                return
        raise ContractError("every cached utterance already has decoder rows")

    def dec_context(self, layer: int) -> np.ndarray | None:
        blocks = []
        for cu in self.utterances:
            if cu.dec_kv is None:
                break
            blocks.append(cu.dec_kv[layer])
        if not blocks:
            return None
        return blocks[0] if len(blocks) == 1 else np.concatenate(blocks, axis=1)

    def context_tokens(self) -> list:
        return [cu.tokens for cu in self.utterances if cu.tokens is not None]


class DecoderContext:
    """Decoder-side context rows alone, for window re-encoding arms."""

    def __init__(self, n_dec_layers: int):
        self.n_dec_layers = n_dec_layers
        self._rows: list = []
        self._tokens: list = []

    @property
    def cached_token_rows(self) -> int:
        return sum(r[0].shape[1] for r in self._rows)

    def attach_decoder(self, dec_kv, tokens) -> None:
        if len(dec_kv) != self.n_dec_layers:
            raise ContractError(
                f"{len(dec_kv)} decoder kv blocks for {self.n_dec_layers} layers")
        self._rows.append(tuple(_frozen(a) for a in dec_kv))
        self._tokens.append(tuple(int(t) for t in tokens))

    def dec_context(self, layer: int) -> np.ndarray | None:
        blocks = [r[layer] for r in self._rows]
        if not blocks:
            return None
        return blocks[0] if len(blocks) == 1 else np.concatenate(blocks, axis=1)


# -- encoding ----------------------------------------------------------------------


def _require_recyclable(model) -> None:
    cfg = model.cfg
    if cfg.pos_encoding != "relative":
        raise RecyclingUnsupportedError(
            "activation recycling needs relative positions: cached rows must "
            "not bake in absolute frame indices")
    if cfg.arch == "conformer" and cfg.conv_mode != "causal":
        raise RecyclingUnsupportedError(
            "activation recycling needs causal convolutions: a centered "
            "kernel would make cached frames depend on later utterances")


def encode_incremental(model, feats: np.ndarray, cache: ActivationCache,
                       counter: MacCounter | None = None) -> np.ndarray:
    """Encode one new utterance against cached context; extends the cache.

    Evicts first, so the attention window is exactly what segment
    assembly would pick for this utterance under the cache's capacity.
    Returns the utterance's final encoder states [t', d_model].
    """
    _require_recyclable(model)
    if cache.n_enc_layers != len(model.enc_blocks):
        raise ContractError(
            f"cache built for {cache.n_enc_layers} encoder layers, model has "
            f"{len(model.enc_blocks)}")
    cache.evict_for(len(feats))
    with T.no_grad():
        sub = model.subsample_utterance(np.asarray(feats))
        t_sub = sub.data.shape[0]
        x = T.reshape(sub, (1, t_sub, sub.data.shape[1]))
        q_start = cache.cached_sub_frames
        conformer = model.cfg.arch == "conformer"
        kv_blocks = []
        new_tails = [] if conformer else None
        keep = model.cfg.conv_kernel - 1
        for li, blk in enumerate(model.enc_blocks):
            ctx = cache.enc_context(li)
            ctx_t = None if ctx is None else Tensor(ctx)
            if conformer:
                tail = cache.conv_tail(li)
                tail_t = None if tail is None else Tensor(tail)
                x, kv, glu = blk.forward_block(x, ctx_t, tail_t, q_start)
                stream = glu.data if tail is None else np.concatenate(
                    [tail, glu.data], axis=1)
                new_tails.append(stream[:, max(0, stream.shape[1] - keep):, :])
            else:
                x, kv = blk.forward_block(x, ctx_t, q_start)
            kv_blocks.append(kv.data)
            if counter is not None:
                counter.add("enc_self", t_sub, q_start + t_sub)
        if model.enc_ln is not None:
            x = model.enc_ln(x)
    enc = x.data[0]
    cache.append(len(feats), t_sub, kv_blocks,
                 tuple(new_tails) if conformer else None, enc)
    return enc


def encode_segment(model, utt_feats: list, counter: MacCounter | None = None):
    """Blockwise window encoding: utterance by utterance, unbounded cache.

    This is the reference recompute arm: running it over the utterances
    of a window produces, bit for bit, the states the recycling path
    accumulates across calls.  Returns ([W, d] states, filled cache).
    """
    if not utt_feats:
        raise ContractError("segment encoding needs at least one utterance")
    cache = ActivationCache(len(model.enc_blocks), len(model.dec_blocks), None)
    outs = [encode_incremental(model, f, cache, counter) for f in utt_feats]
    return np.concatenate(outs, axis=0), cache


def dense_encode_window(model, utt_feats: list,
                        counter: MacCounter | None = None,
                        enc_lookahead: int | None = None):
    """One masked forward over a whole window: the conventional baseline.

    Costs q = k = window frames at every layer; agrees with the
    blockwise evaluation to float tolerance (not bitwise: summation
    order differs).  Returns ([W, d] states, per-utterance frame counts).
    """
    if not utt_feats:
        raise ContractError("window encoding needs at least one utterance")
    with T.no_grad():
        x, sub_lens = model.subsample_segment([np.asarray(f) for f in utt_feats])
        layout = SegmentLayout(sub_lens)
        mask = encoder_context_mask(layout, streaming_lookahead=enc_lookahead)
        enc = model.encode(x, mask)
    if counter is not None:
        w = int(sum(sub_lens))
        for _ in model.enc_blocks:
            counter.add("enc_self", w, w)
    return enc.data[0], sub_lens


# -- beam search -------------------------------------------------------------------


@dataclasses.dataclass
class Hypothesis:
    """One beam entry; scores are kept separately so the combined score
    stays recomputable from its parts."""

    tokens: tuple = ()
    log_p_att: float = 0.0
    log_p_ctc: float = 0.0
    log_p_lm: float = 0.0
    adjust: float = 0.0
    dec_rows: tuple = ()
    ctc_state: np.ndarray | None = None
    lm_state: object = None
    ended: bool = False
    flagged: bool = False

    def combined(self, lam: float, gamma: float) -> float:
        score = 0.0
        if lam > 0.0:
            score += lam * self.log_p_att
        if lam < 1.0:
            score += (1.0 - lam) * self.log_p_ctc
        if gamma != 0.0:
            score += gamma * self.log_p_lm
        return score

    def selection_score(self, lam: float, gamma: float, normalize: bool) -> float:
        raw = self.combined(lam, gamma) + self.adjust
        return raw / (len(self.tokens) + 1) if normalize else raw


@dataclasses.dataclass
class BeamSearchResult:
    best: Hypothesis
    n_best: list
    flagged: bool


def _dec_step(model, hyp: Hypothesis, dec_ctx: list, n_ctx_rows: int,
              enc_t: Tensor, src_span: int | None,
              counter: MacCounter | None):
    """Advance one hypothesis by one decoder row; returns (log-probs, rows)."""
    last = hyp.tokens[-1] if hyp.tokens else EOS_ID
    i = len(hyp.tokens)
    h = model.embedder(np.array([[last]], dtype=np.int64))
    enc_slice = enc_t if src_span is None else enc_t[:, :src_span, :]
    new_rows = []
    for li, blk in enumerate(model.dec_blocks):
        parts = []
        if dec_ctx[li] is not None:
            parts.append(dec_ctx[li])
        if hyp.dec_rows:
            parts.append(hyp.dec_rows[li])
        ctx = Tensor(np.concatenate(parts, axis=1)) if parts else None
        h, gb = blk.forward_block(h, ctx, n_ctx_rows + i, enc_slice)
        new_rows.append(gb.data if not hyp.dec_rows else
                        np.concatenate([hyp.dec_rows[li], gb.data], axis=1))
        if counter is not None:
            counter.add("dec_self", 1, n_ctx_rows + i + 1)
            counter.add("src", 1, enc_slice.data.shape[1])
    states = model.dec_ln(h)
    logp = model.output_log_probs(states).data[0, 0]
    return np.asarray(logp, dtype=np.float64), tuple(new_rows)


def joint_beam_search(model, enc_current: np.ndarray, context=None, *,
                      beam_size: int = 8, lam: float = 0.5, gamma: float = 0.0,
                      lm=None, lm_state=None, max_len: int = 24,
                      length_normalize: bool = True, eos_penalty: float = 0.0,
                      source_frame_budgets=None,
                      counter: MacCounter | None = None) -> BeamSearchResult:
    """Output-synchronous joint CTC-attention beam search over one utterance.

    Every live hypothesis is extended by every non-blank token each
    step; the attention score comes from a single-row decoder forward
    against cached context rows, the CTC score is the label-synchronous
    prefix probability over the utterance posterior, and an optional
    language model adds a shallow-fusion term.  Ending a hypothesis
    swaps its CTC prefix score for the exact complete-sequence score.
    Hypotheses still alive at max_len are force-ended and flagged.

    source_frame_budgets, when given, limits source attention while
    scoring output position i to the first budgets[i] encoder frames
    (the triggered-attention evaluation rule); the last entry covers
    all later positions.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lam must be inside [0, 1], got {lam}")
    if beam_size < 1:
        raise ContractError(f"beam size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    enc_np = np.asarray(enc_current)
    if enc_np.ndim != 2:
        raise ContractError(f"expected [frames, d] encoder states, got {enc_np.shape}")
    t_enc = enc_np.shape[0]
    budgets = None
    if source_frame_budgets is not None:
        budgets = [int(b) for b in source_frame_budgets]
        if not budgets or min(budgets) < 1 or max(budgets) > t_enc:
            raise ContractError(
                f"source frame budgets must lie in [1, {t_enc}], got {budgets}")

    n_dec = len(model.dec_blocks)
    if context is None:
        dec_ctx = [None] * n_dec
        n_ctx_rows = 0
    else:
        dec_ctx = [context.dec_context(li) for li in range(n_dec)]
        n_ctx_rows = context.cached_token_rows

    with T.no_grad():
        enc_t = Tensor(np.ascontiguousarray(enc_np, dtype=model.dtype)[None])
        scorer = CtcPrefixScorer(model.ctc_posterior(enc_t))
        cands = np.arange(FIRST_DATA_ID, model.cfg.vocab_size)
        if lm is not None and lm_state is None:
            lm_state = lm.initial_state()

        def span_for(position: int) -> int | None:
            if budgets is None:
                return None
            return budgets[min(position, len(budgets) - 1)]

        def children_of(hyp: Hypothesis, eos_only: bool):
            logp, rows = _dec_step(model, hyp, dec_ctx, n_ctx_rows, enc_t,
                                   span_for(len(hyp.tokens)), counter)
            out = []
            lm_eos, lm_eos_state = ((0.0, hyp.lm_state) if lm is None
                                    else lm.score_next(hyp.lm_state, EOS_ID))
            out.append(Hypothesis(
                tokens=hyp.tokens,
                log_p_att=hyp.log_p_att + float(logp[EOS_ID]),
                log_p_ctc=scorer.final_score(hyp.ctc_state),
                log_p_lm=hyp.log_p_lm + lm_eos,
                adjust=hyp.adjust + eos_penalty,
                dec_rows=(), ctc_state=None, lm_state=lm_eos_state,
                ended=True, flagged=eos_only))
            if eos_only:
                return out
            psi, r_new = scorer.score_candidates(
                hyp.ctc_state, hyp.tokens[-1] if hyp.tokens else -1, cands)
            for idx, c in enumerate(cands):
                c = int(c)
                lm_lp, lm_st = ((0.0, hyp.lm_state) if lm is None
                                else lm.score_next(hyp.lm_state, c))
                out.append(Hypothesis(
                    tokens=hyp.tokens + (c,),
                    log_p_att=hyp.log_p_att + float(logp[c]),
                    log_p_ctc=float(psi[idx]),
                    log_p_lm=hyp.log_p_lm + lm_lp,
                    adjust=hyp.adjust,
                    dec_rows=rows, ctc_state=r_new[idx], lm_state=lm_st))
            return out

        root = Hypothesis(ctc_state=scorer.initial_state(), lm_state=lm_state)
        live = [root]
        finished = []
        effective_max_len = min(max_len, t_enc) if lam < 1.0 else max_len
        for _ in range(effective_max_len):
            pool = []
            for hyp in live:
                for child in children_of(hyp, eos_only=False):
                    (finished if child.ended else pool).append(child)
            pool.sort(key=lambda h: (-h.combined(lam, gamma), h.tokens))
            live = pool[:beam_size]
            if not live:
                break
        for hyp in live:
            finished.extend(children_of(hyp, eos_only=True))

    finished.sort(key=lambda h: (-h.selection_score(lam, gamma, length_normalize),
                                 h.tokens))
    best = finished[0]
    return BeamSearchResult(best=best, n_best=finished[:beam_size],
                            flagged=best.flagged)


def commit_decoder_context(model, tokens, enc_utt: np.ndarray, target,
                           counter: MacCounter | None = None) -> None:
    """Run the decoder over [eos] + tokens as one block and cache its rows.

    Both decode arms call this with the decoded tokens of an utterance
    and that utterance's own encoder states, so the cached decoder
    context is the same arithmetic whether the window was recycled or
    re-encoded blockwise.
    """
    ids = np.array([[EOS_ID] + [int(t) for t in tokens]], dtype=np.int64)
    q_start = target.cached_token_rows
    with T.no_grad():
        h = model.embedder(ids)
        enc_t = Tensor(np.ascontiguousarray(np.asarray(enc_utt),
                                            dtype=model.dtype)[None])
        rows = []
        for li, blk in enumerate(model.dec_blocks):
            ctx = target.dec_context(li)
            ctx_t = None if ctx is None else Tensor(ctx)
            h, gb = blk.forward_block(h, ctx_t, q_start, enc_t)
            rows.append(gb.data)
            if counter is not None:
                counter.add("dec_self", ids.shape[1], q_start + ids.shape[1])
                counter.add("src", ids.shape[1], enc_t.data.shape[1])
    target.attach_decoder(tuple(rows), tokens)


# -- conversation driver -----------------------------------------------------------


@dataclasses.dataclass
class UtteranceResult:
    """One decoded utterance with its cost accounting.

    The *_macs fields are measured at the attention call sites; the
    *_macs_recompute fields are the closed-form cost of evaluating the
    same window densely from scratch (self attention over all window
    frames or token rows, source attention for every window token over
    every window frame).
    """

    utterance_index: int
    tokens: tuple
    score: float
    flagged: bool
    wall_ms: float
    raw_frames: int
    sub_frames: int
    window_utterances: tuple
    window_raw_frames: int
    window_sub_frames: int
    window_token_rows: int
    enc_self_macs: int
    dec_self_macs: int
    src_macs: int
    enc_self_macs_recompute: int
    dec_self_macs_recompute: int
    src_macs_recompute: int

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["tokens"] = list(self.tokens)
        out["window_utterances"] = list(self.window_utterances)
        return out


def window_start(records, current: int, budget_frames: int) -> int:
    """First context utterance index under the raw-frame budget.

    Maximal suffix of records[:current] whose frames plus the current
    utterance's fit the budget; mirrors cache eviction exactly.
    """
    total = records[current].num_frames
    start = current
    while start > 0 and total + records[start - 1].num_frames <= budget_frames:
        start -= 1
        total += records[start].num_frames
    return start


def _load(rec, features_root: str) -> np.ndarray:
    if rec.features is not None:
        return rec.features
    return rec.load_features(features_root)


def decode_conversation(model, records, config: DecodeConfig, lm=None,
                        features_root: str = "") -> list:
    """Decode every utterance of one conversation in order.

    Context is always what was decoded, never ground truth: decoder
    feedback rows for earlier utterances come from their own decode
    results, and the language model state is advanced over them.  With
    config.recycle the window lives in an activation cache; otherwise
    it is re-encoded per utterance according to config.evaluation.
    """
    results = []
    if not len(records):
        return results
    n_enc, n_dec = len(model.enc_blocks), len(model.dec_blocks)
    lm_state = lm.initial_state() if lm is not None else None
    decoded: list = []
    cache = None
    if config.recycle:
        _require_recyclable(model)
        cache = ActivationCache(n_enc, n_dec, config.budget_frames)

    for u, rec in enumerate(records):
        feats = _load(rec, features_root)
        counter = MacCounter(model.cfg)
        t0 = time.perf_counter()
        if config.recycle:
            enc_u = encode_incremental(model, feats, cache, counter)
            context = cache
            window_ids = [cu.index for cu in cache.utterances]
            window_sub = cache.cached_sub_frames
            window_raw = cache.cached_raw_frames
        else:
            start = window_start(records, u, config.budget_frames)
            window_feats = [_load(records[j], features_root)
                            for j in range(start, u)] + [feats]
            if config.evaluation == "blockwise":
                enc_all, enc_cache = encode_segment(model, window_feats, counter)
                enc_parts = [cu.enc_out for cu in enc_cache.utterances]
                window_sub = enc_cache.cached_sub_frames
            else:
                enc_all, sub_lens = dense_encode_window(model, window_feats, counter)
                bounds = np.concatenate([[0], np.cumsum(sub_lens)])
                enc_parts = [enc_all[bounds[i]:bounds[i + 1]]
                             for i in range(len(sub_lens))]
                window_sub = int(sum(sub_lens))
            context = DecoderContext(n_dec)
            for wi, j in enumerate(range(start, u)):
                commit_decoder_context(model, decoded[j], enc_parts[wi],
                                       context, counter)
            enc_u = enc_parts[-1]
            window_ids = list(range(start, u + 1))
            window_raw = sum(records[j].num_frames for j in range(start, u)) \
                + len(feats)

        beam = joint_beam_search(
            model, enc_u, context, beam_size=config.beam_size, lam=config.lam,
            gamma=config.gamma, lm=lm, lm_state=lm_state,
            max_len=config.max_len, length_normalize=config.length_normalize,
            eos_penalty=config.eos_penalty, counter=counter)
        best = beam.best
        if config.recycle:
            commit_decoder_context(model, best.tokens, enc_u, cache, counter)
        wall_ms = (time.perf_counter() - t0) * 1e3

        if lm is not None:
            lm_state = lm.advance(lm_state, best.tokens)
        decoded.append(best.tokens)

        token_rows = (cache.cached_token_rows if config.recycle
                      else context.cached_token_rows + len(best.tokens) + 1)
        h, dh = model.cfg.n_heads, model.cfg.d_model // model.cfg.n_heads
        per_enc = 2 * h * dh * window_sub * window_sub
        per_dec = 2 * h * dh * token_rows * token_rows
        per_src = 2 * h * dh * token_rows * window_sub
        results.append(UtteranceResult(
            utterance_index=u,
            tokens=best.tokens,
            score=best.selection_score(config.lam, config.gamma,
                                       config.length_normalize),
            flagged=beam.flagged,
            wall_ms=wall_ms,
            raw_frames=len(feats),
            sub_frames=enc_u.shape[0],
            window_utterances=tuple(window_ids),
            window_raw_frames=int(window_raw),
            window_sub_frames=int(window_sub),
            window_token_rows=int(token_rows),
            enc_self_macs=counter.enc_self,
            dec_self_macs=counter.dec_self,
            src_macs=counter.src,
            enc_self_macs_recompute=n_enc * per_enc,
            dec_self_macs_recompute=n_dec * per_dec,
            src_macs_recompute=n_dec * per_src))
    return results
