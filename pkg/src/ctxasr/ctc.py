"""CTC loss, greedy/prefix decoding, and emission-time extraction.

Label conventions: id 0 is the CTC blank; targets never contain it.
All path arithmetic runs in log-domain float64 inside the kernels
(compiled or numpy, selected in ctxasr.kernels).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ContractError, InfeasibleAlignmentError, VocabularyError
from .tensor import Tensor, _make

NEG_INF = -np.inf


@dataclass
class CtcPosterior:
    """Per-frame log posteriors over the blank-augmented vocabulary."""

    log_probs: Tensor

    def __post_init__(self):
        if not isinstance(self.log_probs, Tensor):
            self.log_probs = Tensor(np.asarray(self.log_probs))
        lp = self.log_probs.data
        if lp.ndim != 2:
            raise ContractError(f"posterior must be [T, V], got shape {lp.shape}")
        if lp.shape[0]:
            row_lse = np.logaddexp.reduce(lp.astype(np.float64), axis=1)
            worst = np.abs(row_lse).max()
            if worst > 1e-5:
                raise ContractError(
                    f"posterior rows must be normalized log-probs "
                    f"(worst |logsumexp| = {worst:.2e})")

    @property
    def n_frames(self) -> int:
        return self.log_probs.data.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.log_probs.data.shape[1]


def _check_targets(targets: np.ndarray, vocab: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1:
        raise ContractError(f"target must be a 1D id sequence, got {targets.shape}")
    if targets.size and (targets.min() < 1 or targets.max() >= vocab):
        raise VocabularyError(
            f"target ids must be in [1, {vocab}) (0 is blank): "
            f"span [{targets.min()}, {targets.max()}]")
    return targets


def min_frames_for(targets: np.ndarray) -> int:
    """Frames needed to emit the targets: length plus repeat separators."""
    targets = np.asarray(targets)
    repeats = int(np.sum(targets[1:] == targets[:-1])) if targets.size > 1 else 0
    return int(targets.size) + repeats


def ctc_forward_backward(posterior: CtcPosterior, targets) -> Tensor:
    """Differentiable -log p(targets | posterior) over all alignments."""
    lp = posterior.log_probs if isinstance(posterior, CtcPosterior) else posterior
    targets = _check_targets(targets, lp.data.shape[1])
    if lp.data.shape[0] < min_frames_for(targets):
        raise InfeasibleAlignmentError(
            f"{targets.size} labels need >= {min_frames_for(targets)} frames, "
            f"posterior has {lp.data.shape[0]}")
    loss, grad = kernels.ctc_alpha_beta(lp.data.astype(np.float64), targets)
    if not np.isfinite(loss):
        raise InfeasibleAlignmentError("no alignment has nonzero probability")
    grad = grad.astype(lp.data.dtype)

    def backward(g):
        return (g * grad,)

    return _make(np.asarray(loss, dtype=lp.data.dtype), (lp,), backward,
                 "ctc_forward_backward")


def ctc_log_prob(posterior: CtcPosterior, targets) -> float:
    """Non-differentiable log p(targets | posterior); -inf when infeasible."""
    lp = posterior.log_probs if isinstance(posterior, CtcPosterior) else posterior
    targets = _check_targets(targets, lp.data.shape[1])
    loss, _ = kernels.ctc_alpha_beta(lp.data.astype(np.float64), targets)
    return -loss


def ctc_greedy_decode(posterior: CtcPosterior) -> np.ndarray:
    """Per-frame argmax, collapse repeats, drop blanks."""
    path = np.argmax(posterior.log_probs.data, axis=1)
    out = []
    prev = -1
    for k in path:
        if k != prev and k != 0:
            out.append(int(k))
        prev = k
    return np.asarray(out, dtype=np.int64)


def ctc_trigger_times(posterior: CtcPosterior, targets) -> np.ndarray:
    """First frame of each label on the Viterbi best alignment."""
    lp = posterior.log_probs if isinstance(posterior, CtcPosterior) else posterior
    targets = _check_targets(targets, lp.data.shape[1])
    score, states = kernels.ctc_viterbi(lp.data.astype(np.float64), targets)
    if not np.isfinite(score):
        raise InfeasibleAlignmentError("no feasible alignment for trigger times")
    triggers = np.full(targets.size, -1, dtype=np.int64)
    for t, s in enumerate(states):
        if s % 2 == 1:
            i = (s - 1) // 2
            if triggers[i] < 0:
                triggers[i] = t
    return triggers


# -- frame-synchronous prefix beam search ------------------------------------------


@dataclass(frozen=True)
class CtcPrefix:
    """One prefix hypothesis in frame-synchronous beam search.

    log_pb / log_pnb are the probabilities of all emitting paths for
    this prefix that end, at the current frame, in blank and non-blank
    respectively.  external_score accumulates callback (attention/LM)
    scores; it shapes pruning but never mixes into the path
    probabilities.
    """

    tokens: tuple = ()
    log_pb: float = 0.0
    log_pnb: float = NEG_INF
    trigger_frames: tuple = ()
    external_score: float = 0.0

    @property
    def log_prob(self) -> float:
        return float(np.logaddexp(self.log_pb, self.log_pnb))

    @property
    def pruning_score(self) -> float:
        return self.log_prob + self.external_score


def initial_prefix_beam() -> list:
    return [CtcPrefix()]


class _Bucket:
    __slots__ = ("log_pb", "log_pnb", "proto")

    def __init__(self, proto: CtcPrefix):
        self.log_pb = NEG_INF
        self.log_pnb = NEG_INF
        self.proto = proto


def ctc_prefix_beam_step(beam: list, frame_log_probs: np.ndarray, frame_index: int,
                         beam_size: int, expansion_callback=None,
                         candidates: np.ndarray | None = None) -> list:
    """Advance every prefix by one frame and prune.

    frame_log_probs is one posterior row.  expansion_callback, when
    given, maps (prefix_tokens, new_token) to an additive log score
    applied to newly created prefixes before pruning.  Identical
    prefixes reached along different routes merge with logaddexp; the
    earliest creation's trigger times and callback scores survive.
    """
    if beam_size < 1:
        raise ContractError(f"beam size must be >= 1, got {beam_size}")
    p = np.asarray(frame_log_probs, dtype=np.float64)
    if candidates is None:
        candidates = np.arange(1, p.shape[0])
    buckets: dict[tuple, _Bucket] = {}

    def bucket(proto: CtcPrefix) -> _Bucket:
        b = buckets.get(proto.tokens)
        if b is None:
            b = _Bucket(proto)
            buckets[proto.tokens] = b
        return b

    for g in beam:
        total = g.log_prob
        # stay on this prefix through a blank frame
        b = bucket(g)
        b.log_pb = np.logaddexp(b.log_pb, total + p[0])
        # stay by repeating the final token without a boundary
        if g.tokens:
            b.log_pnb = np.logaddexp(b.log_pnb, g.log_pnb + p[g.tokens[-1]])
        # extend by one token
        for c in candidates:
            c = int(c)
            base = g.log_pb if g.tokens and c == g.tokens[-1] else total
            if base == NEG_INF:
                continue
            ext = base + p[c]
            h_tokens = g.tokens + (c,)
            hb = buckets.get(h_tokens)
            if hb is None:
                score = g.external_score
                if expansion_callback is not None:
                    score += float(expansion_callback(g.tokens, c))
                proto = CtcPrefix(tokens=h_tokens,
                                  trigger_frames=g.trigger_frames + (frame_index,),
                                  external_score=score)
                hb = _Bucket(proto)
                buckets[h_tokens] = hb
            hb.log_pnb = np.logaddexp(hb.log_pnb, ext)

    merged = [replace(b.proto, log_pb=float(b.log_pb), log_pnb=float(b.log_pnb))
              for b in buckets.values()]
    merged = [m for m in merged if m.log_prob > NEG_INF]
    merged.sort(key=lambda h: (-h.pruning_score, h.tokens))
    return merged[:beam_size]


# -- label-synchronous prefix scoring (for joint attention/CTC search) --------------


class CtcPrefixScorer:
    """Incremental prefix probabilities over a fixed posterior.

    Used by label-synchronous joint decoding: each hypothesis carries a
    [T, 2] path-state table; extending by one token scores all
    candidate tokens in one kernel call.  The prefix score of an
    extension is log p(output starts with prefix+token); the final
    score of a finished hypothesis is log p(output == prefix).
    """

    def __init__(self, posterior: CtcPosterior):
        lp = posterior.log_probs if isinstance(posterior, CtcPosterior) else posterior
        self.logp = np.ascontiguousarray(lp.data, dtype=np.float64)
        if self.logp.shape[0] < 1:
            raise ContractError("prefix scorer needs at least one frame")

    def initial_state(self) -> np.ndarray:
        t = self.logp.shape[0]
        r = np.full((t, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.logp[:, 0])
        return r

    def score_candidates(self, state: np.ndarray, last_token: int,
                         cands: np.ndarray):
        """Returns (prefix log probs [C], new states [C, T, 2])."""
        cands = np.asarray(cands, dtype=np.int64)
        if cands.size and (cands.min() < 1 or cands.max() >= self.logp.shape[1]):
            raise VocabularyError("candidate id outside nonblank vocabulary")
        r_new, psi = kernels.ctc_prefix_score_all(self.logp, int(last_token),
                                                  state, cands)
        return psi, r_new

    def final_score(self, state: np.ndarray) -> float:
        """log p(output equals this prefix exactly)."""
        return float(np.logaddexp(state[-1, 0], state[-1, 1]))
