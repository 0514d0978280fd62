"""Joint CTC-attention training: loss, Adam with warmup, fine-tuning, averaging.

The loss for one segment teacher-forces the decoder over every utterance's
tokens but scores only the current (last) utterance: an attention
cross-entropy with label smoothing over the current tokens plus the CTC
loss over the current utterance's frames, mixed by ``alpha``.  Batches are
processed by gradient accumulation over their segments, which keeps every
forward free of padding artifacts and makes runs bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ctc import ctc_forward_backward, min_frames_for
from .data import (EOS_ID, Segment, assemble_segment, load_checkpoint,
                   save_checkpoint)
from .errors import (CheckpointMismatchError, ConfigError, ContractError,
                     InfeasibleAlignmentError)
from .masks import SegmentLayout, training_mask_bundle
from .model import Recognizer
from .tensor import Tensor

TRAIN_MODES = ("baseline", "context", "streaming")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run."""

    alpha: float = 0.3            # CTC/attention balance: alpha weighs attention
    peak_lr: float = 5e-3
    warmup_steps: int = 50
    batch_size: int = 4
    epochs: int = 5
    label_smoothing: float = 0.1
    mode: str = "context"         # baseline | context | streaming
    seed: int = 0
    grad_clip: float = 5.0
    budget_frames: int = 2500     # sliding-window size for context segments
    enc_lookahead: int = 1        # streaming mode: per-layer future frames
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0,1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- segment target layout ---------------------------------------------------------


def decoder_token_streams(segment: Segment) -> tuple:
    """Teacher-forcing streams for a segment.

    Returns (decoder input ids, current-utterance target ids, per-utterance
    input token counts).  Each utterance contributes ``[eos] + tokens`` to
    the decoder input (eos doubles as the start symbol) and predicts
    ``tokens + [eos]``, so input and target blocks have equal length.
    """
    transcripts = list(segment.context_transcripts) + [segment.current_transcript]
    inputs = []
    for y in transcripts:
        inputs.append(np.concatenate(([EOS_ID], np.asarray(y, dtype=np.int64))))
    targets = np.concatenate((np.asarray(transcripts[-1], dtype=np.int64), [EOS_ID]))
    token_lens = tuple(len(b) for b in inputs)
    return np.concatenate(inputs), targets, token_lens


def smoothed_cross_entropy(log_probs: Tensor, targets: np.ndarray,
                           smoothing: float) -> Tensor:
    """Mean over positions of CE against the label-smoothed distribution.

    The smoothed target mixes the one-hot label with the uniform
    distribution over the full vocabulary.
    """
    n, v = log_probs.data.shape[-2], log_probs.data.shape[-1]
    if len(targets) != n:
        raise ContractError(f"{n} prediction rows for {len(targets)} targets")
    flat = T.reshape(log_probs, (n, v))
    picked = T.take_rows(flat, np.asarray(targets, dtype=np.int64))
    nll = T.scale(T.tsum(picked), -1.0 / n)
    if smoothing == 0.0:
        return nll
    uniform = T.scale(T.tsum(flat), -1.0 / (n * v))
    return T.scale(nll, 1.0 - smoothing) + T.scale(uniform, smoothing)


def joint_loss(model: Recognizer, segment: Segment, mode: str = "context",
               alpha: float = 0.3, label_smoothing: float = 0.1,
               enc_lookahead: int | None = None,
               training: bool = False, rng=None) -> tuple:
    """Mixed loss for one segment: alpha * attention CE + (1-alpha) * CTC.

    Returns (loss tensor, info dict).  When the current utterance is too
    short for a feasible CTC alignment the CTC term is skipped and
    ``info["ctc_skipped"]`` is set; the attention term always applies.
    """
    if mode not in TRAIN_MODES:
        raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {mode!r}")
    utt_feats = [segment.features[s] for s in _feature_slices(segment)]
    x, sub_lens = model.subsample_segment(utt_feats)
    dec_in, dec_targets, token_lens = decoder_token_streams(segment)
    layout = SegmentLayout(utt_frame_lens=sub_lens, utt_token_lens=token_lens)
    bundle = training_mask_bundle(
        layout, mode,
        enc_lookahead=enc_lookahead if mode == "streaming" else None)
    frame_mask = np.ones((1, sum(sub_lens)), dtype=bool)
    enc = model.encode(x, bundle.enc, training=training, rng=rng,
                       frame_mask=frame_mask)
    dec = model.decode_states(dec_in, enc, bundle.dec_self, bundle.src,
                              training=training, rng=rng)
    log_probs = model.output_log_probs(dec)
    cur_tokens = token_lens[-1]
    cur_rows = log_probs[:, -cur_tokens:, :]
    att_loss = smoothed_cross_entropy(cur_rows, dec_targets, label_smoothing)

    cur_frames = sub_lens[-1]
    info = {"att_loss": float(att_loss.data), "ctc_skipped": False,
            "n_tokens": int(cur_tokens), "sub_lens": sub_lens}
    ctc_loss = None
    if min_frames_for(segment.current_transcript) <= cur_frames:
        posterior = model.ctc_posterior(enc[:, -cur_frames:, :])
        try:
            ctc_loss = ctc_forward_backward(posterior, segment.current_transcript)
        except InfeasibleAlignmentError:
            ctc_loss = None
    if ctc_loss is None:
        info["ctc_skipped"] = True
        loss = T.scale(att_loss, alpha)
    else:
        info["ctc_loss"] = float(ctc_loss.data)
        loss = T.scale(att_loss, alpha) + T.scale(ctc_loss, 1.0 - alpha)
    return loss, info


def _feature_slices(segment: Segment):
    slices = []
    start = 0
    for t in segment.layout.utt_frame_lens:
        slices.append(slice(start, start + t))
        start += t
    return slices


# -- optimization ------------------------------------------------------------------


class OptimizerState:
    """Adam moment accumulators keyed by parameter name."""

    def __init__(self, named_params):
        self.m = {n: np.zeros_like(p.data, dtype=np.float64)
                  for n, p in named_params}
        self.v = {n: np.zeros_like(x) for n, x in self.m.items()}
        self.step = 0


def noam_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Inverse-sqrt schedule with linear warmup, peaking at ``peak_lr``."""
    if step < 1:
        raise ContractError("schedule steps start at 1")
    scale = warmup_steps ** 0.5
    return peak_lr * scale * min(step ** -0.5, step * warmup_steps ** -1.5)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = total ** 0.5
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adam_step(named_params: dict, grads: dict, state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> None:
    """One bias-corrected Adam update over named parameters, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = "NaN" if np.isnan(g).any() else "inf"
            raise ContractError(
                f"{bad} gradient for parameter {name!r} at step "
                f"{state.step + 1}; aborting instead of clipping")
    state.step += 1
    t = state.step
    for name, param in named_params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        param.data = param.data - update.astype(param.data.dtype)


# -- segment scheduling --------------------------------------------------------------


def conversation_segments(conversations, mode: str, budget_frames: int,
                          features_root: str = "") -> list:
    """One training segment per utterance of every conversation."""
    segments = []
    for records in conversations:
        for u in range(len(records)):
            if mode == "baseline":
                budget = records[u].num_frames
            else:
                budget = budget_frames
            segments.append(assemble_segment(records, u, budget,
                                             features_root=features_root))
    return segments


def token_accuracy(model: Recognizer, segments, mode: str,
                   enc_lookahead: int | None = None) -> tuple:
    """Teacher-forced current-token accuracy and mean loss over segments."""
    correct = total = 0
    losses = []
    for seg in segments:
        loss, info = joint_loss(model, seg, mode, enc_lookahead=enc_lookahead)
        losses.append(float(loss.data))
        utt_feats = [seg.features[s] for s in _feature_slices(seg)]
        x, sub_lens = model.subsample_segment(utt_feats)
        dec_in, dec_targets, token_lens = decoder_token_streams(seg)
        layout = SegmentLayout(utt_frame_lens=sub_lens, utt_token_lens=token_lens)
        bundle = training_mask_bundle(
            layout, mode,
            enc_lookahead=enc_lookahead if mode == "streaming" else None)
        enc = model.encode(x, bundle.enc)
        dec = model.decode_states(dec_in, enc, bundle.dec_self, bundle.src)
        lp = model.output_log_probs(dec)
        pred = np.argmax(lp.data[0, -token_lens[-1]:], axis=-1)
        correct += int((pred == dec_targets).sum())
        total += len(dec_targets)
    acc = correct / total if total else 0.0
    return acc, float(np.mean(losses)) if losses else 0.0


# -- the training loop ----------------------------------------------------------------


def train_loop(model: Recognizer, train_conversations, val_conversations,
               cfg: TrainConfig, out_dir: str, features_root: str = "",
               log_name: str = "metrics.jsonl") -> dict:
    """Epoch loop with shuffled batches, clipping, validation, checkpoints.

    Returns {"metrics": [...], "checkpoints": [...], "best": path}.
    Checkpoint metadata records the validation accuracy used for top-k
    averaging.  With epochs=0 only the initial checkpoint is emitted.
    """
    os.makedirs(out_dir, exist_ok=True)
    named = dict(model.named_parameters())
    state = OptimizerState(named.items())
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    segments = conversation_segments(train_conversations, cfg.mode,
                                     cfg.budget_frames, features_root)
    val_segments = conversation_segments(val_conversations, cfg.mode,
                                         cfg.budget_frames, features_root)
    look = cfg.enc_lookahead if cfg.mode == "streaming" else None

    metrics = []
    checkpoints = []
    log_path = os.path.join(out_dir, log_name)
    log = open(log_path, "w", encoding="utf-8")

    def emit(record):
        metrics.append(record)
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()

    def validate():
        if not val_segments:
            return 0.0, 0.0
        return token_accuracy(model, val_segments, cfg.mode, look)

    def save_epoch(epoch, val_acc, val_loss):
        path = os.path.join(out_dir, f"epoch{epoch:03d}.cxp")
        model.save(path, meta={"val_acc": val_acc, "val_loss": val_loss,
                               "epoch": epoch, "train_config": cfg.to_dict()})
        checkpoints.append(path)
        return path

    val_acc, val_loss = validate()
    emit({"step": 0, "epoch": 0, "train_loss": None,
          "val_loss": val_loss, "val_token_acc": val_acc})
    best_path = save_epoch(0, val_acc, val_loss)
    best_acc = val_acc

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(segments))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [segments[int(i)] for i in order[start:start + cfg.batch_size]]
            for p in named.values():
                p.grad = None
            att_parts, ctc_parts = [], []
            for seg in batch:
                loss, info = joint_loss(
                    model, seg, cfg.mode, cfg.alpha, cfg.label_smoothing,
                    enc_lookahead=look, training=True, rng=dropout_rng)
                T.scale(loss, 1.0 / len(batch)).backward()
                att_parts.append(info["att_loss"])
                if not info["ctc_skipped"]:
                    ctc_parts.append(info["ctc_loss"])
            grads = {n: p.grad for n, p in named.items() if p.grad is not None}
            clip_global_norm(grads, cfg.grad_clip)
            step += 1
            lr = noam_lr(step, cfg.peak_lr, cfg.warmup_steps)
            adam_step(named, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            batch_loss = (cfg.alpha * float(np.mean(att_parts)) +
                          (1.0 - cfg.alpha) *
                          (float(np.mean(ctc_parts)) if ctc_parts else 0.0))
            epoch_losses.append(batch_loss)
        val_acc, val_loss = validate()
        emit({"step": step, "epoch": epoch,
              "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
              "val_loss": val_loss, "val_token_acc": val_acc})
        path = save_epoch(epoch, val_acc, val_loss)
        if val_acc >= best_acc:
            best_acc, best_path = val_acc, path
    log.close()
    return {"metrics": metrics, "checkpoints": checkpoints, "best": best_path,
            "log_path": log_path}


# -- fine-tuning and averaging ---------------------------------------------------------


def fine_tune(base_checkpoint: str, target_model: Recognizer,
              train_conversations, val_conversations, cfg: TrainConfig,
              out_dir: str, features_root: str = "",
              allow_pe_migration: bool = False) -> dict:
    """Continue training from a baseline checkpoint on context segments.

    The base architecture must match the target exactly, except that a
    base trained with absolute positions may seed a relative-position
    target when ``allow_pe_migration`` is set; the relative tables then
    start fresh.
    """
    arrays, meta = load_checkpoint(base_checkpoint)
    base_cfg = dict(meta.get("config", {}))
    target_cfg = target_model.cfg.to_dict()
    differing = sorted(k for k in target_cfg
                       if base_cfg.get(k) != target_cfg[k])
    if differing == ["pos_encoding"] and allow_pe_migration:
        target_model.load_state_arrays(arrays, ignore_missing=("rel_table",))
    elif differing:
        raise CheckpointMismatchError(
            "base checkpoint architecture differs in: " + ", ".join(
                f"{k} ({base_cfg.get(k)!r} vs {target_cfg[k]!r})"
                for k in differing))
    else:
        target_model.load_state_arrays(arrays)
    return train_loop(target_model, train_conversations, val_conversations,
                      cfg, out_dir, features_root)


def average_checkpoints(paths: list, k: int, out_path: str) -> dict:
    """Elementwise mean of the k best checkpoints by validation accuracy."""
    if not paths:
        raise ContractError("no checkpoints to average")
    if k < 1 or k > len(paths):
        raise ContractError(f"k={k} outside 1..{len(paths)}")
    loaded = []
    for p in paths:
        arrays, meta = load_checkpoint(p)
        loaded.append((p, arrays, meta))
    ranked = sorted(loaded, key=lambda e: (-float(e[2].get("val_acc", 0.0)), e[0]))
    chosen = ranked[:k]
    names = set(chosen[0][1])
    for p, arrays, _ in chosen[1:]:
        if set(arrays) != names:
            raise CheckpointMismatchError(
                f"checkpoint {p} has a different tensor set")
        for n in names:
            if arrays[n].shape != chosen[0][1][n].shape:
                raise CheckpointMismatchError(
                    f"checkpoint {p} tensor {n} shape {arrays[n].shape} != "
                    f"{chosen[0][1][n].shape}")
    mean_arrays = {}
    for n in sorted(names):
        acc = np.zeros_like(chosen[0][1][n], dtype=np.float64)
        for _, arrays, _ in chosen:
            acc += arrays[n]
        mean_arrays[n] = (acc / k).astype(np.float32)
    meta = dict(chosen[0][2])
    meta["averaged_from"] = [p for p, _, _ in chosen]
    meta["val_acc"] = float(np.mean([float(m.get("val_acc", 0.0))
                                     for _, _, m in chosen]))
    save_checkpoint(out_path, mean_arrays, meta)
    return meta
