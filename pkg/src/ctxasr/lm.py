"""Shallow-fusion language models for beam decoding.

A scorer is a small stateful object: ``score_next(state, token)``
returns the log probability of the token given the state and the state
after consuming it.  States are carried across utterance boundaries
within a conversation (the utterance separator is the shared eos id),
so linguistic context from earlier turns shapes the next one.

The count-based n-gram model here is deliberately simple: additive
smoothing over the non-blank vocabulary, histories truncated to
``order - 1`` tokens.  Near the start of a conversation the history is
shorter than ``order - 1``; those short histories get their own count
tables, collected from the matching positions of the training streams.
"""

from __future__ import annotations

import math

import numpy as np

from .data import EOS_ID
from .errors import ContractError, VocabularyError


class LmScorer:
    """Interface: incremental left-to-right token scoring."""

    def initial_state(self):
        raise NotImplementedError

    def score_next(self, state, token: int):
        """Returns (log p(token | state), state after consuming token)."""
        raise NotImplementedError

    def advance(self, state, tokens) -> tuple:
        """Consume a whole utterance (tokens then eos), return the new state."""
        for tok in tokens:
            _, state = self.score_next(state, int(tok))
        _, state = self.score_next(state, EOS_ID)
        return state


def _check_token(token: int, vocab_size: int) -> int:
    token = int(token)
    if token < 1 or token >= vocab_size:
        raise VocabularyError(
            f"token {token} outside scorable vocabulary [1, {vocab_size})")
    return token


class UniformLm(LmScorer):
    """Every non-blank token equally likely; state is trivial."""

    def __init__(self, vocab_size: int):
        if vocab_size < 2:
            raise ContractError(f"vocab too small for a scorer: {vocab_size}")
        self.vocab_size = vocab_size
        self._logp = -math.log(vocab_size - 1)

    def initial_state(self) -> tuple:
        return ()

    def score_next(self, state, token: int):
        _check_token(token, self.vocab_size)
        return self._logp, ()


class NgramLm(LmScorer):
    """Count-based n-gram with add-k smoothing over non-blank tokens.

    The state is the tuple of the most recent history tokens, at most
    ``order - 1`` of them.  Unseen histories fall back to the uniform
    distribution (the additive constant cancels), so an untrained model
    behaves exactly like UniformLm.
    """

    def __init__(self, order: int, vocab_size: int, add_k: float = 0.1):
        if order < 1:
            raise ContractError(f"n-gram order must be >= 1, got {order}")
        if vocab_size < 2:
            raise ContractError(f"vocab too small for a scorer: {vocab_size}")
        if add_k <= 0.0:
            raise ContractError(f"additive smoothing constant must be > 0, got {add_k}")
        self.order = order
        self.vocab_size = vocab_size
        self.add_k = add_k
        self.counts: dict = {}
        self.totals: dict = {}

    @property
    def support(self) -> int:
        return self.vocab_size - 1

    @classmethod
    def train(cls, conversations, order: int, vocab_size: int,
              add_k: float = 0.1) -> "NgramLm":
        """Count n-grams over conversation token streams.

        Each conversation is a sequence of utterance token arrays; the
        stream seen by the model is their concatenation with an eos
        after every utterance, matching what decoding feeds back in.
        """
        model = cls(order, vocab_size, add_k)
        for conv in conversations:
            stream = []
            for utt in conv:
                stream.extend(int(t) for t in utt)
                stream.append(EOS_ID)
            state = model.initial_state()
            for tok in stream:
                tok = _check_token(tok, vocab_size)
                hist = model.counts.setdefault(state, {})
                hist[tok] = hist.get(tok, 0) + 1
                model.totals[state] = model.totals.get(state, 0) + 1
                state = model._next_state(state, tok)
        return model

    def _next_state(self, state: tuple, token: int) -> tuple:
        if self.order == 1:
            return ()
        return (state + (token,))[-(self.order - 1):]

    def initial_state(self) -> tuple:
        return ()

    def score_next(self, state, token: int):
        token = _check_token(token, self.vocab_size)
        count = self.counts.get(state, {}).get(token, 0)
        total = self.totals.get(state, 0)
        logp = math.log(count + self.add_k) - math.log(total + self.add_k * self.support)
        return logp, self._next_state(state, token)

    def next_log_probs(self, state) -> np.ndarray:
        """Log distribution over the full vocabulary; blank is impossible."""
        hist = self.counts.get(state, {})
        total = self.totals.get(state, 0)
        out = np.full(self.vocab_size, -np.inf)
        denom = math.log(total + self.add_k * self.support)
        for tok in range(1, self.vocab_size):
            out[tok] = math.log(hist.get(tok, 0) + self.add_k) - denom
        return out
