"""Dense tensors with reverse-mode automatic differentiation.

The array math is delegated to numpy; this module owns the graph
recording, the backward rules, and the numeric conventions the rest of
the package relies on: float32 by default with a globally switchable
float64 mode for gradient checks, fixed reduction orders, and masked
softmax semantics where ``-inf`` scores carry exactly zero weight.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InvalidMaskError, VocabularyError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

NEG_INF = float("-inf")


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the global float precision (e.g. for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording; forward values only."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float array, optionally recording the op that produced it.

    ``data`` is always a numpy array of the module's float dtype.  After
    ``backward()`` on a scalar result, every ``requires_grad`` leaf that
    participated in the graph has a ``grad`` buffer of the same shape.
    Tensors are immutable once created except for their grad buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ----------------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of all participating requires_grad tensors.

        Repeated calls without zeroing accumulate, matching the usual
        optimizer contract.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        graph = Graph.trace(self)
        seed = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


@dataclass
class Graph:
    """Topologically ordered view of the ops that produced a tensor."""

    nodes: list

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the graph only when grads are live."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      _parents=tuple(parents), _backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), backward, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), backward, "relu")


def swish(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        return (g * (sig + out * (1.0 - sig)),)

    return _make(out, (a,), backward, "swish")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), backward, "matmul")


# -- shape manipulation -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward, "transpose")


def narrow(a: Tensor, key) -> Tensor:
    """Basic slicing; gradient scatters back into the sliced region."""
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _make(out, (a,), backward, "narrow")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return scale(tsum(a, axis, keepdims), 1.0 / float(count))


# -- normalization and softmax ---------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; ``-inf`` entries get exactly zero weight."""
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise InvalidMaskError("softmax row with every entry masked to -inf")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise InvalidMaskError("log_softmax row with every entry masked to -inf")
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-vector zero-mean unit-variance over the last axis, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return dx, dgamma.reshape(gamma.data.shape), dbeta.reshape(beta.data.shape)

    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}")
    return _make(out, (x, gamma, beta), backward, "layer_norm")


# -- lookups ----------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(
            f"token id out of range: ids span [{ids.min()}, {ids.max()}], vocab {vocab}")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), backward, "embedding")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select one column per row: out[n] = x[n, idx[n]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _make(out, (x,), backward, "take_rows")


def relative_scores(q: Tensor, table: Tensor, offset_idx: np.ndarray) -> Tensor:
    """Content-position attention scores from a learned offset table.

    q: [B, h, Tq, dh]; table: [h, n_off, dh]; offset_idx: [Tq, Tk] integer
    indices into the offset axis (already clipped).  Returns [B, h, Tq, Tk]
    with out[b,h,i,j] = q[b,h,i] . table[h, offset_idx[i,j]].
    """
    offset_idx = np.asarray(offset_idx, dtype=np.int64)
    proj = np.matmul(q.data, np.swapaxes(table.data, -1, -2))  # [B,h,Tq,n_off]
    idx = np.broadcast_to(offset_idx, proj.shape[:2] + offset_idx.shape)
    out = np.take_along_axis(proj, idx, axis=3)

    def backward(g):
        dproj = np.zeros_like(proj)
        b_i = np.arange(proj.shape[0])[:, None, None, None]
        h_i = np.arange(proj.shape[1])[None, :, None, None]
        q_i = np.arange(proj.shape[2])[None, None, :, None]
        np.add.at(dproj, (b_i, h_i, q_i, offset_idx[None, None]), g)
        dq = np.matmul(dproj, table.data)
        dtable = np.einsum("bhio,bhid->hod", dproj, q.data)
        return dq, dtable

    return _make(out, (q, table), backward, "relative_scores")


# -- convolutions -----------------------------------------------------------------

_PADDINGS = ("valid", "same_centered", "same_left_causal")


def _conv2d_pads(hw, khw, stride, padding):
    (h, w), (kh, kw), (sh, sw) = hw, khw, stride
    if padding == "valid":
        return (0, 0), (0, 0)
    oh, ow = -(-h // sh), -(-w // sw)
    th = max((oh - 1) * sh + kh - h, 0)
    tw = max((ow - 1) * sw + kw - w, 0)
    if padding == "same_centered":
        return (th // 2, th - th // 2), (tw // 2, tw - tw // 2)
    # causal along the first (time) axis, centered along the second
    return (th, 0), (tw // 2, tw - tw // 2)


def conv2d(x: Tensor, w: Tensor, stride=(1, 1), padding: str = "valid") -> Tensor:
    """Cross-correlation of x: [B, Cin, H, W] with w: [Cout, Cin, kh, kw]."""
    if padding not in _PADDINGS:
        raise ContractError(f"padding must be one of {_PADDINGS}, got {padding!r}")
    b, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    sh, sw = stride
    (pt, pb), (pl, pr) = _conv2d_pads((h, wd), (kh, kw), (sh, sw), padding)
    hp, wp = h + pt + pb, wd + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    # flat gather indices for im2col over [Cin, Hp, Wp]
    ci, ki, kj = np.meshgrid(np.arange(cin), np.arange(kh), np.arange(kw), indexing="ij")
    patch = (ci * hp + ki) * wp + kj                      # [Cin,kh,kw]
    oi, oj = np.meshgrid(np.arange(oh) * sh, np.arange(ow) * sw, indexing="ij")
    origin = (oi * wp + oj).reshape(-1)                   # [P]
    idx = origin[:, None] + patch.reshape(1, -1)          # [P, Cin*kh*kw]

    xflat = xp.reshape(b, -1)
    cols = np.take(xflat, idx, axis=1)                    # [B, P, K]
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(cols, wmat.T).transpose(0, 2, 1).reshape(b, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(b, cout, -1).transpose(0, 2, 1)    # [B, P, Cout]
        dw = np.einsum("bpk,bpc->ck", cols, g2).reshape(w.data.shape)
        dcols = np.matmul(g2, wmat)                       # [B, P, K]
        dxp = np.zeros_like(xflat)
        np.add.at(dxp, (np.arange(b)[:, None, None], idx[None]), dcols)
        dxp = dxp.reshape(b, cin, hp, wp)
        return dxp[:, :, pt:pt + h, pl:pl + wd], dw

    return _make(out, (x, w), backward, "conv2d")


def conv1d_depthwise(x: Tensor, w: Tensor, mode: str = "causal") -> Tensor:
    """Per-channel 1D convolution along time; x: [B, T, C], w: [k, C].

    causal mode pads k-1 zeros on the left so frame t sees only frames
    <= t; centered mode needs odd k and pads both sides equally.
    """
    b, t, c = x.data.shape
    k, c_w = w.data.shape
    if c != c_w:
        raise DimensionError(f"depthwise channel mismatch: input {c}, kernel {c_w}")
    if mode == "causal":
        left, right = k - 1, 0
    elif mode == "centered":
        if k % 2 == 0:
            raise ContractError("centered depthwise conv requires odd kernel width")
        left = right = (k - 1) // 2
    else:
        raise ContractError(f"unknown depthwise mode {mode!r}")
    if k > t + left + right:
        raise DimensionError(f"kernel width {k} larger than padded length {t + left + right}")
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    out = np.zeros((b, t, c), dtype=x.data.dtype)
    for tap in range(k):
        out += w.data[tap] * xp[:, tap:tap + t, :]

    def backward(g):
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for tap in range(k):
            dw[tap] = (g * xp[:, tap:tap + t, :]).sum(axis=(0, 1))
            dxp[:, tap:tap + t, :] += w.data[tap] * g
        dx = dxp[:, left:left + t, :]
        return dx, dw

    return _make(out, (x, w), backward, "conv1d_depthwise")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return _make(out, (x,), backward, "dropout")


# -- gradient checking --------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


@dataclass
class GradCheckReport:
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"{'PASS' if e.passed else 'FAIL'}  {e.name}: "
                 f"max rel err {e.max_rel_err:.3e} (tol {e.tol:.1e})"
                 for e in self.entries]
        return "\n".join(lines)


def _rel_err(analytic: float, numeric: float, atol: float) -> float:
    denom = max(abs(analytic), abs(numeric), atol)
    return abs(analytic - numeric) / denom


def grad_check(build_loss: Callable[[], Tensor],
               params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
               eps: float = 1e-4,
               tol: float = 1e-4,
               mode: str = "entries",
               max_entries: int = 16,
               rng: np.random.Generator | None = None,
               atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``build_loss()`` to central differences.

    ``build_loss`` must be deterministic (dropout off).  ``mode='entries'``
    perturbs up to ``max_entries`` coordinates per parameter;
    ``mode='directional'`` compares one random directional derivative per
    parameter, which scales to large models.

    Each comparison is |analytic - numeric| / max(|analytic|, |numeric|,
    atol).  The ``atol`` floor matters for coordinates where the loss is
    exactly flat, like a key-projection bias that a softmax cancels: both
    sides are then pure rounding noise and a bare relative error would
    divide one rounding error by another.
    """
    if isinstance(params, dict):
        params = list(params.items())
    else:
        params = list(params)
    rng = rng or np.random.default_rng(0)

    for _, p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    entries = []
    for name, p in params:
        base = p.data.copy()
        if mode == "entries":
            flat = p.data.reshape(-1)
            n = flat.size
            picks = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
            worst = 0.0
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                up = build_loss().item()
                flat[i] = orig - eps
                down = build_loss().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                worst = max(worst, _rel_err(analytic[name].reshape(-1)[i],
                                            numeric, atol))
        elif mode == "directional":
            direction = rng.standard_normal(p.data.shape).astype(p.data.dtype)
            direction /= max(np.linalg.norm(direction), 1e-12)
            p.data = base + eps * direction
            up = build_loss().item()
            p.data = base - eps * direction
            down = build_loss().item()
            p.data = base
            numeric = (up - down) / (2.0 * eps)
            worst = _rel_err(float((analytic[name] * direction).sum()),
                             numeric, atol)
        else:
            raise ContractError(f"unknown grad_check mode {mode!r}")
        entries.append(GradCheckEntry(name, float(worst), tol))
    return GradCheckReport(entries)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(_DEFAULT_DTYPE)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)
