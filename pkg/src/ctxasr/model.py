"""Joint CTC-attention recognizer: encoder/decoder assembly and checkpointing.

The model owns the subsampling front end, the encoder and decoder block
stacks, the token embedder, and two output heads (attention decoder
vocabulary projection and frame-level CTC projection).  It exposes the
dense forward passes used for training and the parameter/buffer trees
used for optimization and serialization; the incremental, cache-driven
evaluation paths live in the decoding module and reuse the same blocks.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import (Conv2dSubsampler, ConformerEncoderBlock, DecoderBlock,
                     LayerNorm, Linear, ModelConfig, TokenEmbedder,
                     TransformerEncoderBlock, sinusoidal_position_encoding,
                     subsampled_length)
from .ctc import CtcPosterior
from .data import load_checkpoint, save_checkpoint
from .errors import CheckpointMismatchError, DimensionError
from .tensor import Tensor


class Recognizer:
    """Context-expanded speech recognizer with joint CTC-attention heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.subsampler = Conv2dSubsampler(cfg, rng)
        block_cls = (TransformerEncoderBlock if cfg.arch == "transformer"
                     else ConformerEncoderBlock)
        self.enc_blocks = [block_cls(cfg, rng) for _ in range(cfg.n_enc_blocks)]
        # conformer blocks end in their own closing norm; a transformer
        # stack leaves the residual stream raw and gets one final norm here
        self.enc_ln = LayerNorm(cfg.d_model) if cfg.arch == "transformer" else None
        self.embedder = TokenEmbedder(cfg, rng)
        self.dec_blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.n_dec_blocks)]
        self.dec_ln = LayerNorm(cfg.d_model)
        self.out_head = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.ctc_head = Linear(cfg.d_model, cfg.vocab_size, rng)

    @property
    def dtype(self):
        return self.out_head.weight.data.dtype

    # -- parameter and buffer trees ------------------------------------------------

    def named_parameters(self):
        for name, p in self.subsampler.params():
            yield f"subsampler.{name}", p
        for i, blk in enumerate(self.enc_blocks):
            for name, p in blk.params():
                yield f"enc.{i}.{name}", p
        if self.enc_ln is not None:
            for name, p in self.enc_ln.params():
                yield f"enc_ln.{name}", p
        for name, p in self.embedder.params():
            yield f"embedder.{name}", p
        for i, blk in enumerate(self.dec_blocks):
            for name, p in blk.params():
                yield f"dec.{i}.{name}", p
        for name, p in self.dec_ln.params():
            yield f"dec_ln.{name}", p
        for name, p in self.out_head.params():
            yield f"out_head.{name}", p
        for name, p in self.ctc_head.params():
            yield f"ctc_head.{name}", p

    def named_buffers(self):
        for i, blk in enumerate(self.enc_blocks):
            for name, v in blk.buffers():
                yield f"enc.{i}.{name}", v

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    # -- encoder -------------------------------------------------------------------

    def subsample_utterance(self, feats: np.ndarray) -> Tensor:
        """Per-utterance front end: [t, input_dim] raw frames -> [t', d_model]."""
        if feats.ndim != 2 or feats.shape[1] != self.cfg.input_dim:
            raise DimensionError(
                f"expected [frames, {self.cfg.input_dim}] features, got {feats.shape}")
        return self.subsampler(Tensor(np.asarray(feats, dtype=self.dtype)))

    def subsample_segment(self, utt_feats: list) -> tuple:
        """Subsample each utterance independently and concatenate.

        Returns ([1, total', d_model] tensor, per-utterance subsampled
        frame counts).  Independent per-utterance subsampling keeps every
        frame of the result a function of its own utterance only, which
        is what makes utterance-granular caching exact.
        """
        parts = [self.subsample_utterance(f) for f in utt_feats]
        lens = tuple(p.data.shape[0] for p in parts)
        x = T.concat([T.reshape(p, (1,) + p.data.shape) for p in parts], axis=1)
        return x, lens

    def encode(self, x: Tensor, mask: np.ndarray | None = None,
               positions: np.ndarray | None = None, training: bool = False,
               rng=None, frame_mask: np.ndarray | None = None) -> Tensor:
        """Dense encoder forward over a subsampled segment [b, t', d_model]."""
        t = x.data.shape[1]
        if positions is None:
            positions = np.arange(t)
        if self.cfg.pos_encoding == "absolute":
            pe = sinusoidal_position_encoding(positions, self.cfg.d_model)
            x = x + Tensor(pe[None].astype(x.data.dtype))
        h = x
        for blk in self.enc_blocks:
            h = blk.forward(h, mask, positions, positions, training, rng, frame_mask)
        if self.enc_ln is not None:
            h = self.enc_ln(h)
        return h

    # -- decoder -------------------------------------------------------------------

    def decode_states(self, token_ids: np.ndarray, enc: Tensor,
                      self_mask: np.ndarray | None = None,
                      src_mask: np.ndarray | None = None,
                      positions: np.ndarray | None = None,
                      training: bool = False, rng=None) -> Tensor:
        """Dense decoder forward: token ids [b?, L] -> normalized states [b, L, d]."""
        g = self.embedder(token_ids, positions)
        if g.data.ndim == 2:
            g = T.reshape(g, (1,) + g.data.shape)
        for blk in self.dec_blocks:
            g = blk.forward(g, enc, self_mask, src_mask, training, rng)
        return self.dec_ln(g)

    def output_log_probs(self, dec_states: Tensor) -> Tensor:
        return T.log_softmax(self.out_head(dec_states), axis=-1)

    def ctc_posterior(self, enc: Tensor) -> CtcPosterior:
        """Frame-level CTC label posterior for a single segment [1, t', d]."""
        logits = self.ctc_head(enc)
        lp = T.log_softmax(logits, axis=-1)
        return CtcPosterior(T.reshape(lp, lp.data.shape[1:]))

    def ctc_log_softmax(self, enc: Tensor) -> Tensor:
        return T.log_softmax(self.ctc_head(enc), axis=-1)

    # -- serialization ---------------------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {n: np.asarray(p.data, dtype=np.float32)
                  for n, p in self.named_parameters()}
        for n, v in self.named_buffers():
            arrays[f"buffer.{n}"] = np.asarray(v, dtype=np.float32)
        return arrays

    def load_state_arrays(self, arrays: dict, ignore_missing: tuple = ()) -> None:
        """Copy checkpoint arrays into parameters and buffers.

        ``ignore_missing``: dotted-name prefixes that may be absent from
        ``arrays`` and are then left at their fresh initialization (used
        when migrating a model to a positional scheme the base lacked).
        """
        own_params = dict(self.named_parameters())
        own_buffers = {f"buffer.{n}": n for n, _ in self.named_buffers()}
        expected = set(own_params) | set(own_buffers)
        got = set(arrays)
        missing = sorted(expected - got)
        hard_missing = [n for n in missing
                        if not any(n.startswith(p) or f".{p}" in n
                                   for p in ignore_missing)]
        unexpected = sorted(got - expected)
        problems = []
        if hard_missing:
            problems.append("missing tensors: " + ", ".join(hard_missing[:8]))
        if unexpected:
            problems.append("unexpected tensors: " + ", ".join(unexpected[:8]))
        for name in sorted(expected & got):
            want = (own_params[name].data.shape if name in own_params
                    else dict(self.named_buffers())[own_buffers[name]].shape)
            if tuple(arrays[name].shape) != tuple(want):
                problems.append(
                    f"shape mismatch for {name}: checkpoint {arrays[name].shape}, "
                    f"model {want}")
        if problems:
            raise CheckpointMismatchError("; ".join(problems))
        for name, tensor in own_params.items():
            if name in arrays:
                tensor.data = np.asarray(arrays[name], dtype=tensor.data.dtype)
        buffer_setters = {}
        for i, blk in enumerate(self.enc_blocks):
            for bname, _ in blk.buffers():
                buffer_setters[f"enc.{i}.{bname}"] = (blk, bname)
        for key, name in own_buffers.items():
            if key in arrays:
                blk, bname = buffer_setters[name]
                blk.set_buffer(bname, arrays[key])

    def save(self, path: str, meta: dict | None = None) -> None:
        full_meta = {"config": self.cfg.to_dict()}
        full_meta.update(meta or {})
        save_checkpoint(path, self.state_arrays(), full_meta)

    @classmethod
    def load(cls, path: str) -> tuple:
        """Returns (model, metadata) for a checkpoint written by ``save``."""
        arrays, meta = load_checkpoint(path)
        if "config" not in meta:
            raise CheckpointMismatchError(
                f"checkpoint {path} has no model config metadata")
        cfg = ModelConfig.from_dict(meta["config"])
        model = cls(cfg, seed=0)
        model.load_state_arrays(arrays)
        return model, meta


def segment_frame_counts(model: Recognizer, raw_frame_lens) -> tuple:
    """Per-utterance subsampled frame counts for a raw-frame layout."""
    return tuple(subsampled_length(t) for t in raw_frame_lens)
