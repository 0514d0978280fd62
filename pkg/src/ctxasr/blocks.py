"""Transformer and Conformer building blocks.

Every block is a pure function of (parameters, inputs, masks) operating
on [batch, time, d_model] tensors.  Encoder blocks expose two forward
paths that compute the same function:

* ``forward``: whole padded segments under a boolean attention mask,
  used for training.
* ``forward_block``: one utterance's frames as queries against
  explicitly passed context keys/values, used for decoding.  Because
  context enters by concatenation rather than masking, the same code
  runs whether the context activations were just computed or replayed
  from a cache, which is what makes cached and recomputed decoding
  bit-identical.

Residual wiring is pre-norm throughout.  Transformer blocks chain the
raw residual stream and the encoder normalizes once on top; conformer
blocks close with their own layer norm, so their stream is already
normalized between blocks and no extra top-level norm is applied.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .masks import additive_mask
from .tensor import Tensor

ARCHS = ("transformer", "conformer")
POS_ENCODINGS = ("absolute", "relative")
CONV_MODES = ("causal", "centered")


@dataclass(frozen=True)
class ModelConfig:
    """Static shape and architecture choices for one recognizer."""

    d_model: int = 32
    n_heads: int = 2
    d_ffn: int = 64
    n_enc_blocks: int = 2
    n_dec_blocks: int = 1
    vocab_size: int = 8          # includes blank (id 0) and eos (id 1)
    input_dim: int = 8           # feature dim before subsampling
    arch: str = "transformer"
    pos_encoding: str = "relative"
    conv_kernel: int = 3
    conv_mode: str = "causal"
    subsample_factor: int = 4
    dropout_rate: float = 0.0
    max_segment_frames: int = 512  # bound on post-subsampling segment length

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigError(
                f"pos_encoding must be one of {POS_ENCODINGS}, got {self.pos_encoding!r}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if self.arch == "conformer" and (self.conv_kernel < 1 or self.conv_kernel % 2 == 0):
            raise ConfigError(
                f"conformer depthwise kernel must be odd and >= 1, got {self.conv_kernel}")
        if self.subsample_factor != 4:
            raise ConfigError("subsample_factor is fixed at 4")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate out of [0,1): {self.dropout_rate}")
        if self.vocab_size < 3:
            raise ConfigError("vocab needs blank, eos, and at least one data token")
        if min(self.d_model, self.n_heads, self.d_ffn, self.n_enc_blocks,
               self.n_dec_blocks, self.input_dim, self.max_segment_frames) < 1:
            raise ConfigError("all size fields must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


# -- parameter containers -------------------------------------------------------


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(T.glorot_uniform(rng, d_in, d_out, (d_in, d_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=T.default_dtype()),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias

    def params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class LayerNorm:
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d, dtype=T.default_dtype()), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


class BatchNorm:
    """Feature-wise batch norm over (batch, time) with running statistics.

    Decoding always uses the running statistics, so its output at a
    frame depends on that frame alone; training updates them from
    masked batch statistics.
    """

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d, dtype=T.default_dtype()), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=T.default_dtype()), requires_grad=True)
        self.running_mean = np.zeros(d, dtype=np.float64)
        self.running_var = np.ones(d, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool = False,
                 frame_mask: np.ndarray | None = None) -> Tensor:
        dt = x.data.dtype.type
        if training:
            if frame_mask is None:
                frame_mask = np.ones(x.data.shape[:2], dtype=bool)
            w = frame_mask.astype(x.data.dtype)[..., None]
            count = max(float(w.sum()), 1.0)
            wt = Tensor(w)
            mean = T.tsum(x * wt, axis=(0, 1)) * Tensor(np.full(1, 1.0 / count, x.data.dtype))
            centered = (x - mean.reshape(1, 1, -1)) * wt
            var = T.tsum(centered * centered, axis=(0, 1)) * Tensor(
                np.full(1, 1.0 / count, x.data.dtype))
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean.data.astype(np.float64))
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.data.astype(np.float64))
            inv = T.div(Tensor(np.ones(1, x.data.dtype)),
                        T.sqrt(var + Tensor(np.full(1, self.eps, x.data.dtype))))
            xhat = (x - mean.reshape(1, 1, -1)) * inv.reshape(1, 1, -1)
        else:
            mean = self.running_mean.astype(x.data.dtype)
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.data.dtype)
            xhat = (x - Tensor(mean)) * Tensor(inv)
        return xhat * self.gamma + self.beta

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.running_mean = value.astype(np.float64)
        elif name == "running_var":
            self.running_var = value.astype(np.float64)
        else:
            raise ContractError(f"unknown batchnorm buffer {name!r}")


# -- attention -------------------------------------------------------------------


class MultiHeadAttention:
    """Scaled dot-product attention with optional relative positions.

    The relative variant adds a content-position score q_i . R[k-i]
    with a learned per-head offset table; offsets are clipped to the
    table's range, so scores depend only on relative distance and any
    global shift of the position indices leaves the output unchanged.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 relative: bool = False, max_past: int = 0, max_future: int = 0):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.head_dim = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.relative = relative
        self.max_past, self.max_future = max_past, max_future
        if relative:
            n_off = max_past + max_future + 1
            self.rel_table = Tensor(
                rng.normal(0.0, d_model ** -0.5,
                           (n_heads, n_off, self.head_dim)).astype(T.default_dtype()),
                requires_grad=True)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.data.shape
        return T.transpose(T.reshape(x, (b, t, self.n_heads, self.head_dim)),
                           (0, 2, 1, 3))

    def _offset_index(self, tq: int, tk: int, q_positions, k_positions) -> np.ndarray:
        qp = np.arange(tq) if q_positions is None else np.asarray(q_positions)
        kp = np.arange(tk) if k_positions is None else np.asarray(k_positions)
        if qp.shape != (tq,) or kp.shape != (tk,):
            raise DimensionError("position arrays must match query/key lengths")
        off = kp[None, :] - qp[:, None]
        return np.clip(off, -self.max_past, self.max_future) + self.max_past

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask: np.ndarray | None = None,
                 q_positions: np.ndarray | None = None,
                 k_positions: np.ndarray | None = None) -> Tensor:
        b, tq, _ = q.data.shape
        tk = k.data.shape[1]
        qh, kh, vh = self._split(self.wq(q)), self._split(self.wk(k)), self._split(self.wv(v))
        scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)))
        if self.relative:
            idx = self._offset_index(tq, tk, q_positions, k_positions)
            scores = scores + T.relative_scores(qh, self.rel_table, idx)
        scores = T.scale(scores, 1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            add = additive_mask(np.asarray(mask, dtype=bool), dtype=scores.data.dtype)
            if add.ndim == 2:
                add = add[None, None]
            elif add.ndim == 3:
                add = add[:, None]
            else:
                raise DimensionError(f"mask must be 2D or 3D, got {add.ndim}D")
            scores = scores + Tensor(add)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, vh)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.d_model))
        return self.wo(merged)

    def params(self):
        for sub, name in ((self.wq, "wq"), (self.wk, "wk"),
                          (self.wv, "wv"), (self.wo, "wo")):
            for p, t in sub.params():
                yield f"{name}.{p}", t
        if self.relative:
            yield "rel_table", self.rel_table


class FeedForward:
    """Linear -> activation -> Linear, output scaled by 1.0 or 0.5."""

    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator,
                 activation: str = "relu", scale: float = 1.0):
        if scale not in (1.0, 0.5):
            raise ConfigError(f"feed-forward scale must be 1.0 or 0.5, got {scale}")
        if activation not in ("relu", "swish"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.lin1 = Linear(d_model, d_ffn, rng)
        self.lin2 = Linear(d_ffn, d_model, rng)
        self.activation = activation
        self.scale = scale

    def __call__(self, x: Tensor) -> Tensor:
        h = self.lin1(x)
        h = T.relu(h) if self.activation == "relu" else T.swish(h)
        out = self.lin2(h)
        return out if self.scale == 1.0 else T.scale(out, self.scale)

    def params(self):
        for p, t in self.lin1.params():
            yield f"lin1.{p}", t
        for p, t in self.lin2.params():
            yield f"lin2.{p}", t


def _drop(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    return T.dropout(x, rate, rng, training)


# -- encoder blocks -----------------------------------------------------------------


class TransformerEncoderBlock:
    """Pre-norm self-attention + feed-forward on the raw residual stream."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        rel = cfg.pos_encoding == "relative"
        span = cfg.max_segment_frames - 1
        self.ln_att = LayerNorm(cfg.d_model)
        self.mha = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, relative=rel,
                                      max_past=span, max_future=span)
        self.ln_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng, activation="relu")

    def forward(self, x: Tensor, mask: np.ndarray | None = None,
                q_positions=None, k_positions=None,
                training: bool = False, rng=None, frame_mask=None) -> Tensor:
        xb = self.ln_att(x)
        att = self.mha(xb, xb, xb, mask, q_positions, k_positions)
        h = x + _drop(att, self.cfg.dropout_rate, rng, training)
        out = h + _drop(self.ffn(self.ln_ffn(h)), self.cfg.dropout_rate, rng, training)
        return out

    def forward_block(self, x: Tensor, ctx_kv: Tensor | None, q_start: int,
                      mask: np.ndarray | None = None):
        """One utterance's frames against explicit context keys/values.

        ``ctx_kv`` holds the normalized attention inputs of all earlier
        utterances at this layer.  Returns (output, own normalized
        attention input) so the caller can extend the context for the
        next utterance.
        """
        t = x.data.shape[1]
        xb = self.ln_att(x)
        kv = xb if ctx_kv is None else T.concat([ctx_kv, xb], axis=1)
        tk = kv.data.shape[1]
        q_pos = np.arange(q_start, q_start + t)
        att = self.mha(xb, kv, kv, mask, q_pos, np.arange(tk))
        h = x + att
        out = h + self.ffn(self.ln_ffn(h))
        return out, xb

    def params(self):
        for sub, name in ((self.ln_att, "ln_att"), (self.mha, "mha"),
                          (self.ln_ffn, "ln_ffn"), (self.ffn, "ffn")):
            for p, t in sub.params():
                yield f"{name}.{p}", t

    def buffers(self):
        return iter(())


class ConvModule:
    """layernorm -> pointwise(2d) -> GLU -> depthwise -> batchnorm -> swish -> pointwise."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, k = cfg.d_model, cfg.conv_kernel
        self.cfg = cfg
        self.ln = LayerNorm(d)
        self.pw1 = Linear(d, 2 * d, rng)
        self.depthwise = Tensor(T.glorot_uniform(rng, k, 1, (k, d)), requires_grad=True)
        self.bn = BatchNorm(d)
        self.pw2 = Linear(d, d, rng)

    def _glu_in(self, x: Tensor) -> Tensor:
        h = self.pw1(self.ln(x))
        d = self.cfg.d_model
        return h[:, :, :d] * T.sigmoid(h[:, :, d:])

    def _after_depthwise(self, conv: Tensor, training: bool, frame_mask) -> Tensor:
        return self.pw2(T.swish(self.bn(conv, training, frame_mask)))

    def forward(self, x: Tensor, training: bool = False, frame_mask=None) -> Tensor:
        glu = self._glu_in(x)
        conv = T.conv1d_depthwise(glu, self.depthwise, mode=self.cfg.conv_mode)
        return self._after_depthwise(conv, training, frame_mask)

    def forward_block(self, x: Tensor, tail: Tensor | None):
        """Depthwise conv over (cached tail ++ own frames); causal mode only.

        Returns (output, post-GLU stream) so the caller can keep the
        last kernel-1 frames as the next utterance's tail.
        """
        if self.cfg.conv_mode != "causal":
            raise ContractError("incremental conv requires causal mode")
        t = x.data.shape[1]
        glu = self._glu_in(x)
        if tail is not None and tail.data.shape[1]:
            padded = T.concat([tail, glu], axis=1)
            conv_full = T.conv1d_depthwise(padded, self.depthwise, mode="causal")
            conv = conv_full[:, -t:, :]
        else:
            conv = T.conv1d_depthwise(glu, self.depthwise, mode="causal")
        return self._after_depthwise(conv, False, None), glu

    def params(self):
        for sub, name in ((self.ln, "ln"), (self.pw1, "pw1"),
                          (self.bn, "bn"), (self.pw2, "pw2")):
            for p, t in sub.params():
                yield f"{name}.{p}", t
        yield "depthwise", self.depthwise

    def buffers(self):
        for b, v in self.bn.buffers():
            yield f"bn.{b}", v

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, _, rest = name.partition(".")
        if prefix != "bn" or not rest:
            raise ContractError(f"unknown conv module buffer {name!r}")
        self.bn.set_buffer(rest, value)


class ConformerEncoderBlock:
    """Half-FFN, self-attention, convolution, half-FFN, closing norm.

    Each sub-module reads a layer-normalized view of the running
    residual; the closing layer norm makes the block's output stream
    normalized, so a stack of these needs no extra norm on top.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        rel = cfg.pos_encoding == "relative"
        span = cfg.max_segment_frames - 1
        self.ln_ff1 = LayerNorm(d)
        self.ff1 = FeedForward(d, cfg.d_ffn, rng, activation="swish", scale=0.5)
        self.ln_att = LayerNorm(d)
        self.mha = MultiHeadAttention(d, cfg.n_heads, rng, relative=rel,
                                      max_past=span, max_future=span)
        self.conv = ConvModule(cfg, rng)
        self.ln_ff2 = LayerNorm(d)
        self.ff2 = FeedForward(d, cfg.d_ffn, rng, activation="swish", scale=0.5)
        self.ln_out = LayerNorm(d)

    def forward(self, x: Tensor, mask: np.ndarray | None = None,
                q_positions=None, k_positions=None,
                training: bool = False, rng=None, frame_mask=None) -> Tensor:
        p = self.cfg.dropout_rate
        h = x + _drop(self.ff1(self.ln_ff1(x)), p, rng, training)
        hb = self.ln_att(h)
        h = h + _drop(self.mha(hb, hb, hb, mask, q_positions, k_positions), p, rng, training)
        h = h + _drop(self.conv.forward(h, training, frame_mask), p, rng, training)
        h = h + _drop(self.ff2(self.ln_ff2(h)), p, rng, training)
        return self.ln_out(h)

    def forward_block(self, x: Tensor, ctx_kv: Tensor | None, conv_tail: Tensor | None,
                      q_start: int, mask: np.ndarray | None = None):
        """Returns (output, own normalized attention input, own post-GLU stream)."""
        t = x.data.shape[1]
        h = x + self.ff1(self.ln_ff1(x))
        hb = self.ln_att(h)
        kv = hb if ctx_kv is None else T.concat([ctx_kv, hb], axis=1)
        q_pos = np.arange(q_start, q_start + t)
        h = h + self.mha(hb, kv, kv, mask, q_pos, np.arange(kv.data.shape[1]))
        conv_out, glu = self.conv.forward_block(h, conv_tail)
        h = h + conv_out
        h = h + self.ff2(self.ln_ff2(h))
        return self.ln_out(h), hb, glu

    def params(self):
        for sub, name in ((self.ln_ff1, "ln_ff1"), (self.ff1, "ff1"),
                          (self.ln_att, "ln_att"), (self.mha, "mha"),
                          (self.conv, "conv"), (self.ln_ff2, "ln_ff2"),
                          (self.ff2, "ff2"), (self.ln_out, "ln_out")):
            for p, t in sub.params():
                yield f"{name}.{p}", t

    def buffers(self):
        for b, v in self.conv.buffers():
            yield f"conv.{b}", v

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, _, rest = name.partition(".")
        if prefix != "conv" or not rest:
            raise ContractError(f"unknown conformer block buffer {name!r}")
        self.conv.set_buffer(rest, value)


class DecoderBlock:
    """Causal self-attention, source attention over encoder states, FFN."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        rel = cfg.pos_encoding == "relative"
        span = cfg.max_segment_frames - 1
        self.ln_self = LayerNorm(d)
        self.self_mha = MultiHeadAttention(d, cfg.n_heads, rng, relative=rel,
                                           max_past=span, max_future=span)
        self.ln_src = LayerNorm(d)
        self.src_mha = MultiHeadAttention(d, cfg.n_heads, rng, relative=False)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.d_ffn, rng, activation="relu")

    def forward(self, g: Tensor, enc: Tensor,
                self_mask: np.ndarray | None = None,
                src_mask: np.ndarray | None = None,
                training: bool = False, rng=None) -> Tensor:
        p = self.cfg.dropout_rate
        gb = self.ln_self(g)
        h = g + _drop(self.self_mha(gb, gb, gb, self_mask), p, rng, training)
        h = h + _drop(self.src_mha(self.ln_src(h), enc, enc, src_mask), p, rng, training)
        out = h + _drop(self.ffn(self.ln_ffn(h)), p, rng, training)
        return out

    def forward_block(self, g: Tensor, ctx_kv: Tensor | None, q_start: int,
                      enc: Tensor, src_mask: np.ndarray | None = None):
        """New token rows against cached normalized self-attention context.

        ``ctx_kv`` holds the normalized self-attention inputs of every
        earlier token at this layer; queries are the ``g`` rows, keys are
        context ++ own rows with an in-block causal restriction.  Returns
        (output rows, own normalized rows) for extending the context.
        """
        t = g.data.shape[1]
        gb = self.ln_self(g)
        kv = gb if ctx_kv is None else T.concat([ctx_kv, gb], axis=1)
        n_ctx = kv.data.shape[1] - t
        self_mask = None
        if t > 1:
            self_mask = (np.arange(kv.data.shape[1])[None, :]
                         <= n_ctx + np.arange(t)[:, None])
        q_pos = np.arange(q_start, q_start + t)
        h = g + self.self_mha(gb, kv, kv, self_mask, q_pos,
                              np.arange(kv.data.shape[1]))
        h = h + self.src_mha(self.ln_src(h), enc, enc, src_mask)
        out = h + self.ffn(self.ln_ffn(h))
        return out, gb

    def params(self):
        for sub, name in ((self.ln_self, "ln_self"), (self.self_mha, "self_mha"),
                          (self.ln_src, "ln_src"), (self.src_mha, "src_mha"),
                          (self.ln_ffn, "ln_ffn"), (self.ffn, "ffn")):
            for p, t in sub.params():
                yield f"{name}.{p}", t

    def buffers(self):
        return iter(())


# -- front ends ------------------------------------------------------------------------


def subsampled_length(t: int) -> int:
    """Frames surviving two stride-2 kernel-3 valid convolutions."""
    return ((t - 1) // 2 - 1) // 2


MIN_SUBSAMPLE_FRAMES = 7


class Conv2dSubsampler:
    """Two stride-2 3x3 conv layers reducing time by 4, then project to d_model.

    Time uses valid padding (drives the length formula); the feature
    axis is zero-padded so narrow feature dims survive both layers.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.d_model
        self.w1 = Tensor(T.glorot_uniform(rng, 9, 9 * c, (c, 1, 3, 3)), requires_grad=True)
        self.b1 = Tensor(np.zeros(c, dtype=T.default_dtype()), requires_grad=True)
        self.w2 = Tensor(T.glorot_uniform(rng, 9 * c, 9 * c, (c, c, 3, 3)), requires_grad=True)
        self.b2 = Tensor(np.zeros(c, dtype=T.default_dtype()), requires_grad=True)
        f1 = self._freq_out(cfg.input_dim)
        self.freq_out = self._freq_out(f1)
        self.proj = Linear(c * self.freq_out, cfg.d_model, rng)

    @staticmethod
    def _freq_out(d: int) -> int:
        return -(-d // 2)  # ceil: feature axis is same-padded

    @staticmethod
    def _freq_pad(d: int) -> tuple:
        out = -(-d // 2)
        total = max((out - 1) * 2 + 3 - d, 0)
        return total // 2, total - total // 2

    def _layer(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        batch, cin, t, d = x.data.shape
        left, right = self._freq_pad(d)
        pads = []
        if left:
            pads.append(Tensor(np.zeros((batch, cin, t, left), dtype=x.data.dtype)))
        pads.append(x)
        if right:
            pads.append(Tensor(np.zeros((batch, cin, t, right), dtype=x.data.dtype)))
        xp = pads[0] if len(pads) == 1 else T.concat(pads, axis=3)
        out = T.conv2d(xp, w, stride=(2, 2), padding="valid")
        return T.relu(out + T.reshape(b, (1, -1, 1, 1)))

    def __call__(self, feats: Tensor) -> Tensor:
        """feats: [T, input_dim] -> [T', d_model] for one utterance."""
        t, d = feats.data.shape
        if d != self.cfg.input_dim:
            raise DimensionError(f"feature dim {d} != configured {self.cfg.input_dim}")
        if t < MIN_SUBSAMPLE_FRAMES:
            raise DimensionError(
                f"utterance has {t} frames; subsampling needs at least "
                f"{MIN_SUBSAMPLE_FRAMES}")
        x = T.reshape(feats, (1, 1, t, d))
        x = self._layer(x, self.w1, self.b1)
        x = self._layer(x, self.w2, self.b2)
        _, c, t2, f2 = x.data.shape
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (t2, c * f2))
        return self.proj(x)

    def params(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2
        for p, t in self.proj.params():
            yield f"proj.{p}", t


def sinusoidal_position_encoding(positions: np.ndarray, d_model: int,
                                 dtype=None) -> np.ndarray:
    """Fixed sin/cos table rows for the given positions."""
    dtype = dtype or T.default_dtype()
    positions = np.asarray(positions, dtype=np.float64)
    half = np.arange(0, d_model, 2, dtype=np.float64)
    inv = np.power(10000.0, -half / d_model)
    ang = positions[:, None] * inv[None, :]
    pe = np.zeros((positions.size, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d_model // 2])
    return pe.astype(dtype)


class TokenEmbedder:
    """Scaled token embedding, plus sinusoidal positions in absolute mode."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.table = Tensor(
            rng.normal(0.0, cfg.d_model ** -0.5,
                       (cfg.vocab_size, cfg.d_model)).astype(T.default_dtype()),
            requires_grad=True)

    def __call__(self, token_ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        emb = T.scale(T.embedding(self.table, ids), math.sqrt(self.cfg.d_model))
        if self.cfg.pos_encoding == "absolute" and ids.size:
            pos = np.arange(ids.shape[-1]) if positions is None else positions
            pe = sinusoidal_position_encoding(pos, self.cfg.d_model, emb.data.dtype)
            emb = emb + Tensor(pe if ids.ndim == 1 else pe[None])
        return emb

    def params(self):
        yield "table", self.table
