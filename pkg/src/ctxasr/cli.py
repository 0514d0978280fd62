"""Command line front end: data generation, training, decoding, benchmarks.

Every subcommand reads an optional JSON config file (``--config``) whose
keys are the snake_case names listed for that subcommand, then applies
explicit command line flags on top.  Unknown file keys are rejected so a
typo cannot silently fall back to a default, and the fully resolved
configuration is logged before any work starts, which together with the
seed makes each run reproducible from its log line.

Exit codes: 0 on success, 1 on a categorized runtime failure (bad
checkpoint, missing file, infeasible config, failed gradient check), 2
on usage errors including an empty command line.
"""

from __future__ import annotations

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
             "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .bench import bench_decode, bench_kernels
from .blocks import ModelConfig
from .data import (GeneratorSpec, Segment, generate_synthetic_conversations,
                   load_manifest)
from .decoding import DecodeConfig, decode_conversation
from .errors import ConfigError, CtxAsrError
from .lm import NgramLm
from .masks import SegmentLayout
from .model import Recognizer
from .streaming import StreamConfig, stream_conversation, theoretical_delay_ms
from .tensor import grad_check, use_dtype
from .training import (TrainConfig, average_checkpoints, fine_tune,
                       joint_loss, train_loop)

log = logging.getLogger("ctxasr.cli")

# Model geometry keys shared by train and grad-check.  vocab_size and
# input_dim can be derived from the manifest, so their defaults are None
# and the resolved config records what the derivation produced.
_MODEL_KEYS = {
    "arch": "transformer",
    "pos_encoding": "relative",
    "d_model": 32,
    "n_heads": 2,
    "d_ffn": 64,
    "n_enc_blocks": 2,
    "n_dec_blocks": 1,
    "conv_kernel": 3,
    "conv_mode": "causal",
    "dropout_rate": 0.0,
    "max_segment_frames": 512,
    "vocab_size": None,
    "input_dim": None,
}

# Flag spellings that differ from their config key.
_FLAG_NAMES = {"beam_size": "--beam", "lam": "--lambda"}


def _dataclass_defaults(dc) -> dict:
    return {f.name: f.default for f in dataclasses.fields(dc)}


def _without(mapping: dict, *keys: str) -> dict:
    return {k: v for k, v in mapping.items() if k not in keys}


# The single source of truth for what each subcommand accepts: config
# key -> default.  The default's type picks the flag's argument type;
# None defaults mean "required or derived" and parse as strings.
_SUBCOMMAND_KEYS = {
    "gen-data": lambda: {
        **_dataclass_defaults(GeneratorSpec),
        "seed": 0, "out": None},
    "train": lambda: {
        **_dataclass_defaults(TrainConfig), **_MODEL_KEYS,
        "manifest": None, "val_manifest": None, "out": None,
        "features_root": "", "base_checkpoint": None,
        "allow_pe_migration": False},
    "decode": lambda: {
        **_dataclass_defaults(DecodeConfig),
        "model": None, "manifest": None, "features_root": "", "out": None,
        "lm_order": 0, "lm_add_k": 0.1},
    "stream": lambda: {
        **_dataclass_defaults(StreamConfig),
        "model": None, "manifest": None, "features_root": "", "out": None,
        "budget_frames": 0, "lm_order": 0, "lm_add_k": 0.1},
    "bench": lambda: {
        **_without(_dataclass_defaults(DecodeConfig), "recycle"),
        "model": None, "manifest": None, "features_root": "", "out": None,
        "reps": 3, "warmup": 1, "kernels": False, "seed": 0},
    "average": lambda: {"checkpoints": [], "k": 0, "out": None},
    "grad-check": lambda: {
        **_MODEL_KEYS, "vocab_size": 6, "input_dim": 6, "d_model": 16,
        "d_ffn": 24, "mode": "context", "enc_lookahead": 1, "alpha": 0.3,
        "label_smoothing": 0.1, "eps": 1e-4, "tol": 1e-3, "atol": 1e-8,
        "check_mode": "entries", "max_entries": 4, "seed": 0},
}


def _on_off(text: str) -> bool:
    if text == "on":
        return True
    if text == "off":
        return False
    raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {text!r}")


def _add_key_flags(sub: argparse.ArgumentParser, known: dict) -> None:
    """One optional flag per config key, default None to detect overrides."""
    for key, default in known.items():
        if isinstance(default, list):
            continue  # list-valued keys are positionals or file-only
        flag = _FLAG_NAMES.get(key, "--" + key.replace("_", "-"))
        if isinstance(default, bool):
            sub.add_argument(flag, dest=key, type=_on_off, default=None,
                             metavar="{on,off}")
        elif isinstance(default, int):
            sub.add_argument(flag, dest=key, type=int, default=None)
        elif isinstance(default, float):
            sub.add_argument(flag, dest=key, type=float, default=None)
        else:
            sub.add_argument(flag, dest=key, type=str, default=None)


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _resolve_config(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags, rejecting unknown keys."""
    known = _SUBCOMMAND_KEYS[args.subcommand]()
    resolved = dict(known)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(known))
        if unknown:
            raise ConfigError(
                f"unknown config keys for {args.subcommand}: "
                f"{', '.join(unknown)}")
        resolved.update(file_cfg)
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _log_resolved(subcommand: str, resolved: dict) -> None:
    log.info("resolved %s config: %s", subcommand,
             json.dumps(resolved, sort_keys=True, default=str))


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")


def _pick(resolved: dict, dc) -> dict:
    return {f.name: resolved[f.name] for f in dataclasses.fields(dc)
            if f.name in resolved}


def _edit_distance(ref, hyp) -> int:
    """Levenshtein distance between two token sequences."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (0 if r == h else 1))
        prev = cur
    return prev[-1]


def _emit(record: dict, sink) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if sink is not None:
        sink.write(line + "\n")


def _derive_vocab_and_input(resolved: dict, conversations: list,
                            features_root: str) -> None:
    if resolved["vocab_size"] is None:
        top = 0
        for conv in conversations:
            for rec in conv:
                if len(rec.transcript):
                    top = max(top, int(np.max(rec.transcript)))
        resolved["vocab_size"] = max(top + 1, 3)
    if resolved["input_dim"] is None:
        first = conversations[0][0]
        resolved["input_dim"] = int(
            first.load_features(features_root).shape[1])


def _model_config(resolved: dict) -> ModelConfig:
    return ModelConfig(**{k: resolved[k] for k in _MODEL_KEYS})


def _train_lm(conversations: list, order: int, vocab_size: int,
              add_k: float) -> NgramLm:
    transcripts = [[rec.transcript for rec in conv] for conv in conversations]
    return NgramLm.train(transcripts, order, vocab_size, add_k=add_k)


# -- subcommand handlers ---------------------------------------------------------


def _cmd_gen_data(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    _require(resolved, "out")
    _log_resolved("gen-data", resolved)
    spec = GeneratorSpec(**_pick(resolved, GeneratorSpec))
    manifest = generate_synthetic_conversations(spec, resolved["seed"],
                                                resolved["out"])
    print(manifest)
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    _require(resolved, "manifest", "out")

    conversations = load_manifest(resolved["manifest"])
    if resolved["val_manifest"]:
        train_convs = conversations
        val_convs = load_manifest(resolved["val_manifest"])
    elif len(conversations) > 1:
        # No validation manifest: hold out the last conversation.
        train_convs, val_convs = conversations[:-1], conversations[-1:]
    else:
        train_convs = val_convs = conversations
    _derive_vocab_and_input(resolved, conversations, resolved["features_root"])
    _log_resolved("train", resolved)

    cfg = TrainConfig(**_pick(resolved, TrainConfig))
    model = Recognizer(_model_config(resolved), seed=cfg.seed)
    if resolved["base_checkpoint"]:
        out = fine_tune(resolved["base_checkpoint"], model, train_convs,
                        val_convs, cfg, resolved["out"],
                        features_root=resolved["features_root"],
                        allow_pe_migration=resolved["allow_pe_migration"])
    else:
        out = train_loop(model, train_convs, val_convs, cfg, resolved["out"],
                         features_root=resolved["features_root"])
    last = out["metrics"][-1]
    print(json.dumps({"best": out["best"],
                      "checkpoints": len(out["checkpoints"]),
                      "final_val_token_acc": last["val_token_acc"],
                      "final_val_loss": last["val_loss"]}, sort_keys=True))
    return 0


def _cmd_decode(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    _require(resolved, "model", "manifest")
    _log_resolved("decode", resolved)

    model, _ = Recognizer.load(resolved["model"])
    conversations = load_manifest(resolved["manifest"])
    config = DecodeConfig(**_pick(resolved, DecodeConfig))
    lm = None
    if resolved["lm_order"] >= 1:
        lm = _train_lm(conversations, resolved["lm_order"],
                       model.cfg.vocab_size, resolved["lm_add_k"])

    sink = (open(resolved["out"], "w", encoding="utf-8")
            if resolved["out"] else None)
    errors = ref_tokens = n_utts = 0
    try:
        for conv in conversations:
            results = decode_conversation(
                model, conv, config, lm=lm,
                features_root=resolved["features_root"])
            for rec, res in zip(conv, results):
                ref = [int(t) for t in rec.transcript]
                hyp = [int(t) for t in res.tokens]
                errors += _edit_distance(ref, hyp)
                ref_tokens += len(ref)
                n_utts += 1
                _emit({"conversation": rec.conversation_id,
                       "utterance": rec.utterance_index,
                       "hyp": hyp, "ref": ref,
                       "score": res.score, "wall_ms": res.wall_ms}, sink)
        summary = {"utterances": n_utts, "token_errors": errors,
                   "ref_tokens": ref_tokens,
                   "token_error_rate": errors / max(ref_tokens, 1)}
        _emit({"summary": summary}, sink)
    finally:
        if sink is not None:
            sink.close()
    return 0


def _cmd_stream(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    _require(resolved, "model", "manifest")
    _log_resolved("stream", resolved)

    model, _ = Recognizer.load(resolved["model"])
    conversations = load_manifest(resolved["manifest"])
    config = StreamConfig(**_pick(resolved, StreamConfig))
    budget = resolved["budget_frames"] if resolved["budget_frames"] > 0 else None
    lm = None
    if resolved["lm_order"] >= 1:
        lm = _train_lm(conversations, resolved["lm_order"],
                       model.cfg.vocab_size, resolved["lm_add_k"])

    delays = theoretical_delay_ms(len(model.enc_blocks), config.enc_lookahead,
                                  config.src_lookahead)
    log.info("theoretical added latency: encoder %.0f ms + source %.0f ms "
             "= %.0f ms", delays["encoder_ms"], delays["source_ms"],
             delays["total_ms"])

    sink = (open(resolved["out"], "w", encoding="utf-8")
            if resolved["out"] else None)
    errors = ref_tokens = n_utts = 0
    latencies = []
    try:
        for conv in conversations:
            results = stream_conversation(
                model, conv, config, lm=lm,
                features_root=resolved["features_root"],
                budget_frames=budget)
            for rec, res in zip(conv, results):
                ref = [int(t) for t in rec.transcript]
                hyp = [int(t) for t in res.tokens]
                errors += _edit_distance(ref, hyp)
                ref_tokens += len(ref)
                n_utts += 1
                per_tok = [e.added_latency_ms for e in res.emissions]
                latencies.extend(per_tok)
                _emit({"conversation": rec.conversation_id,
                       "utterance": rec.utterance_index,
                       "hyp": hyp, "ref": ref, "score": res.score,
                       "added_latency_ms": per_tok}, sink)
        summary = {"utterances": n_utts, "token_errors": errors,
                   "ref_tokens": ref_tokens,
                   "token_error_rate": errors / max(ref_tokens, 1),
                   "mean_added_latency_ms":
                       float(np.mean(latencies)) if latencies else 0.0,
                   "theoretical_delay_ms": delays}
        _emit({"summary": summary}, sink)
    finally:
        if sink is not None:
            sink.close()
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    _require(resolved, "model", "manifest")
    _log_resolved("bench", resolved)

    model, _ = Recognizer.load(resolved["model"])
    conversations = load_manifest(resolved["manifest"])
    config = DecodeConfig(recycle=True, **_pick(resolved, DecodeConfig))
    report = bench_decode(model, conversations, config,
                          reps=resolved["reps"], warmup=resolved["warmup"],
                          features_root=resolved["features_root"])

    for row in report.rows:
        print(json.dumps(row, sort_keys=True))
    s = report.summary
    print()
    print(f"{'':24s}{'recycle off':>14s}{'recycle on':>14s}{'ratio':>10s}")
    print(f"{'wall ms (median sum)':24s}{s['wall_ms_off']:>14.2f}"
          f"{s['wall_ms_on']:>14.2f}{s['speedup']:>10.2f}")
    print(f"{'pseudo-RTF':24s}{s['pseudo_rtf_off']:>14.4f}"
          f"{s['pseudo_rtf_on']:>14.4f}{s['speedup']:>10.2f}")
    for kind in ("enc_self", "dec_self", "src"):
        print(f"{kind + ' MACs':24s}{s[f'{kind}_macs_off']:>14d}"
              f"{s[f'{kind}_macs_on']:>14d}{s[f'{kind}_mac_ratio']:>10.2f}")
    if resolved["kernels"]:
        print()
        for row in bench_kernels(seed=resolved["seed"]):
            print(json.dumps(row, sort_keys=True))
    if resolved["out"]:
        with open(resolved["out"], "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        log.info("wrote benchmark report to %s", resolved["out"])
    return 0


def _cmd_average(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    if args.checkpoint_args:
        resolved["checkpoints"] = list(args.checkpoint_args)
    _require(resolved, "out")
    paths = resolved["checkpoints"]
    if not paths:
        raise ConfigError("no checkpoints given to average")
    if resolved["k"] <= 0:
        resolved["k"] = len(paths)
    _log_resolved("average", resolved)
    meta = average_checkpoints(paths, resolved["k"], resolved["out"])
    print(json.dumps({"out": resolved["out"],
                      "averaged_from": meta["averaged_from"],
                      "val_acc": meta["val_acc"]}, sort_keys=True))
    return 0


def _cmd_grad_check(args: argparse.Namespace) -> int:
    resolved = _resolve_config(args)
    _log_resolved("grad-check", resolved)

    rng = np.random.default_rng(resolved["seed"])
    with use_dtype(np.float64):
        model = Recognizer(_model_config(resolved), seed=resolved["seed"])
        frame_lens = (21, 26)
        features = rng.standard_normal(
            (sum(frame_lens), resolved["input_dim"]))
        vocab = resolved["vocab_size"]
        segment = Segment(
            features=features,
            layout=SegmentLayout(frame_lens),
            context_transcripts=[rng.integers(2, vocab, size=2)],
            current_transcript=rng.integers(2, vocab, size=3),
            speaker_filtered=False,
            over_budget=False,
            utterance_indices=(0, 1))

        def build_loss():
            loss, _ = joint_loss(model, segment, mode=resolved["mode"],
                                 alpha=resolved["alpha"],
                                 label_smoothing=resolved["label_smoothing"],
                                 enc_lookahead=resolved["enc_lookahead"])
            return loss

        report = grad_check(build_loss, dict(model.named_parameters()),
                            eps=resolved["eps"], tol=resolved["tol"],
                            mode=resolved["check_mode"],
                            max_entries=resolved["max_entries"], rng=rng,
                            atol=resolved["atol"])
    print(report.summary())
    if not report.passed:
        print(f"error[GradCheckFailed]: max rel err {report.max_rel_err:.3e} "
              f"exceeds tol {resolved['tol']:.1e}", file=sys.stderr)
        return 1
    return 0


# -- parser / dispatch -----------------------------------------------------------


_HANDLERS = {
    "gen-data": (_cmd_gen_data, "write a synthetic conversation corpus"),
    "train": (_cmd_train, "train a recognizer, or fine-tune from a checkpoint"),
    "decode": (_cmd_decode, "beam-decode a manifest with conversation context"),
    "stream": (_cmd_stream, "stream-decode a manifest with triggered attention"),
    "bench": (_cmd_bench, "time decoding with recycling off vs on"),
    "average": (_cmd_average, "average the k best checkpoints"),
    "grad-check": (_cmd_grad_check, "finite-difference check of the joint loss"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxasr",
        description="Context-expanded speech recognition toolkit.")
    subparsers = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    for name, (handler, help_text) in _HANDLERS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None, metavar="PATH",
                         help="JSON file of config keys for this subcommand")
        if name == "average":
            sub.add_argument("checkpoint_args", nargs="*", metavar="CKPT",
                             help="checkpoints to rank and average")
        _add_key_flags(sub, _SUBCOMMAND_KEYS[name]())
        sub.set_defaults(handler=handler)
    return parser


def run_cli(argv=None) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "subcommand", None):
        parser.print_usage(sys.stderr)
        return 2
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except CtxAsrError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
