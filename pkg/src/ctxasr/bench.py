"""Attention cost accounting and decode-time benchmarking.

Multiply-accumulate counts follow the usual attention accounting: a
query/key dot-product pass plus the weighted value sum, each q * k * d
per head, so 2 * heads * q * k * d_head per attention call.  Counters
are incremented at the actual attention call sites in the decoding
paths, so measured totals can be checked against closed-form layout
arithmetic in tests.

Wall-clock numbers are reported as a pseudo real-time factor: decode
wall time divided by the nominal audio duration of the synthetic
features.  There is no real audio front end here, hence "pseudo"; the
number is only meaningful for comparing the two decode arms under the
same conditions (single thread, same process, same data).
"""

from __future__ import annotations

import dataclasses
import statistics
import time

import numpy as np

from .errors import BenchmarkInvalidError, ContractError

MAC_KINDS = ("enc_self", "dec_self", "src")


def count_attention_macs(q: int, k: int, heads: int, d_head: int) -> int:
    """Multiply-accumulates of one attention call: 2 * heads * q * k * d_head."""
    if min(q, k, heads, d_head) < 1:
        raise ContractError(
            f"attention mac counts need positive sizes, got q={q} k={k} "
            f"heads={heads} d_head={d_head}")
    return 2 * heads * q * k * d_head


class MacCounter:
    """Accumulates attention MACs by attention kind for one decode unit."""

    def __init__(self, cfg):
        self.heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.counts = {kind: 0 for kind in MAC_KINDS}

    def add(self, kind: str, q: int, k: int) -> None:
        if kind not in self.counts:
            raise ContractError(f"unknown attention kind {kind!r}")
        self.counts[kind] += count_attention_macs(q, k, self.heads, self.d_head)

    @property
    def enc_self(self) -> int:
        return self.counts["enc_self"]

    @property
    def dec_self(self) -> int:
        return self.counts["dec_self"]

    @property
    def src(self) -> int:
        return self.counts["src"]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def snapshot(self) -> dict:
        return dict(self.counts)


# -- decode benchmark --------------------------------------------------------------


def _arm_stats(samples: list) -> dict:
    return {"wall_ms_median": float(statistics.median(samples)),
            "wall_ms_min": float(min(samples)),
            "wall_ms_max": float(max(samples))}


@dataclasses.dataclass
class BenchReport:
    """Per-utterance rows plus a summary recomputable from the rows."""

    reps: int
    warmup: int
    rows: list
    summary: dict

    def aggregate(self) -> dict:
        """Recompute the summary from the rows; must equal ``summary``."""
        on_wall = sum(r["recycle_on"]["wall_ms_median"] for r in self.rows)
        off_wall = sum(r["recycle_off"]["wall_ms_median"] for r in self.rows)
        audio = sum(r["audio_ms"] for r in self.rows)
        agg = {"n_utterances": len(self.rows),
               "audio_ms": audio,
               "wall_ms_on": on_wall,
               "wall_ms_off": off_wall,
               "speedup": off_wall / on_wall,
               "pseudo_rtf_on": on_wall / audio,
               "pseudo_rtf_off": off_wall / audio}
        for kind in MAC_KINDS:
            on = sum(r["recycle_on"][f"{kind}_macs"] for r in self.rows)
            off = sum(r["recycle_off"][f"{kind}_macs"] for r in self.rows)
            agg[f"{kind}_macs_on"] = on
            agg[f"{kind}_macs_off"] = off
            agg[f"{kind}_mac_ratio"] = off / on
        return agg

    def to_dict(self) -> dict:
        return {"reps": self.reps, "warmup": self.warmup,
                "summary": self.summary, "rows": self.rows}


def bench_decode(model, conversations, config, lm=None, reps: int = 3,
                 warmup: int = 1, features_root: str = "") -> BenchReport:
    """Time decode_conversation with recycling off, then on.

    Every repetition decodes all conversations with the recompute arm
    first and the recycling arm second; warmup repetitions run the same
    work and are discarded.  Decoded tokens must agree between arms and
    across repetitions, otherwise the comparison is meaningless and a
    BenchmarkInvalidError is raised.
    """
    from .decoding import decode_conversation

    if reps < 1:
        raise ContractError(f"need at least one measured repetition, got {reps}")
    if warmup < 0:
        raise ContractError(f"warmup count must be >= 0, got {warmup}")
    off_cfg = dataclasses.replace(config, recycle=False)
    on_cfg = dataclasses.replace(config, recycle=True)

    measured = []
    for rep in range(warmup + reps):
        off = [decode_conversation(model, conv, off_cfg, lm=lm,
                                   features_root=features_root)
               for conv in conversations]
        on = [decode_conversation(model, conv, on_cfg, lm=lm,
                                  features_root=features_root)
              for conv in conversations]
        if rep >= warmup:
            measured.append((off, on))

    first_off, first_on = measured[0]
    for ci in range(len(conversations)):
        for ui in range(len(first_off[ci])):
            a = first_off[ci][ui].tokens
            b = first_on[ci][ui].tokens
            if a != b:
                raise BenchmarkInvalidError(
                    f"decoded tokens differ between arms at conversation {ci} "
                    f"utterance {ui}: recompute {list(a)} vs recycle {list(b)}")
            for off, on in measured[1:]:
                if off[ci][ui].tokens != a or on[ci][ui].tokens != b:
                    raise BenchmarkInvalidError(
                        f"decoded tokens unstable across repetitions at "
                        f"conversation {ci} utterance {ui}")

    rows = []
    for ci, conv in enumerate(conversations):
        for ui in range(len(first_off[ci])):
            res_on = first_on[ci][ui]
            res_off = first_off[ci][ui]
            row = {"conversation": ci,
                   "utterance": res_on.utterance_index,
                   "raw_frames": res_on.raw_frames,
                   "audio_ms": res_on.raw_frames * conv[ui].frame_period_ms,
                   "tokens": list(res_on.tokens)}
            on_walls = [m[1][ci][ui].wall_ms for m in measured]
            off_walls = [m[0][ci][ui].wall_ms for m in measured]
            row["recycle_on"] = _arm_stats(on_walls)
            row["recycle_off"] = _arm_stats(off_walls)
            for kind in MAC_KINDS:
                on_macs = {getattr(m[1][ci][ui], f"{kind}_macs") for m in measured}
                off_macs = {getattr(m[0][ci][ui], f"{kind}_macs") for m in measured}
                if len(on_macs) != 1 or len(off_macs) != 1:
                    raise BenchmarkInvalidError(
                        f"{kind} mac counts unstable across repetitions at "
                        f"conversation {ci} utterance {ui}")
                row["recycle_on"][f"{kind}_macs"] = on_macs.pop()
                row["recycle_off"][f"{kind}_macs"] = off_macs.pop()
            row["speedup"] = (row["recycle_off"]["wall_ms_median"]
                              / row["recycle_on"]["wall_ms_median"])
            row["enc_self_mac_ratio"] = (row["recycle_off"]["enc_self_macs"]
                                         / row["recycle_on"]["enc_self_macs"])
            rows.append(row)

    report = BenchReport(reps=reps, warmup=warmup, rows=rows, summary={})
    report.summary = report.aggregate()
    return report


# -- kernel backend benchmark ------------------------------------------------------


def bench_kernels(sizes=None, reps: int = 5, seed: int = 0) -> list:
    """Compare the compiled CTC scan kernels against the numpy fallback.

    Returns one row per problem size with median wall times for each
    backend and the maximum absolute loss difference between them.  The
    compiled entries are None when the extension is not built.
    """
    from .kernels import ctc_numpy

    try:
        from .kernels import _ctc_speed
    except ImportError:
        _ctc_speed = None

    if reps < 1:
        raise ContractError(f"need at least one repetition, got {reps}")
    if sizes is None:
        sizes = [(60, 6, 8), (150, 12, 16), (300, 20, 24)]

    rng = np.random.default_rng(seed)
    rows = []
    for t_len, n_labels, vocab in sizes:
        raw = rng.normal(size=(t_len, vocab))
        logp = raw - np.log(np.exp(raw - raw.max(axis=1, keepdims=True))
                            .sum(axis=1, keepdims=True)) - raw.max(axis=1, keepdims=True)
        labels = rng.integers(2, vocab, size=n_labels)

        def run(fn):
            times = []
            loss = None
            for _ in range(reps):
                t0 = time.perf_counter()
                loss, _ = fn(logp, labels)
                times.append((time.perf_counter() - t0) * 1e3)
            return float(statistics.median(times)), float(loss)

        numpy_ms, numpy_loss = run(ctc_numpy.ctc_alpha_beta)
        row = {"frames": t_len, "labels": n_labels, "vocab": vocab,
               "numpy_ms": numpy_ms, "compiled_ms": None,
               "speedup": None, "max_abs_diff": None}
        if _ctc_speed is not None:
            compiled_ms, compiled_loss = run(_ctc_speed.ctc_alpha_beta)
            row["compiled_ms"] = compiled_ms
            row["speedup"] = numpy_ms / compiled_ms
            row["max_abs_diff"] = abs(numpy_loss - compiled_loss)
        rows.append(row)
    return rows
