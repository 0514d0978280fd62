"""Synthetic conversation data, segment assembly, and file formats.

The generator builds conversations whose acoustics are decodable only
with conversational context: some tokens share their sound with a
different token spoken by a different speaker, and the only cue to the
speaker is planted in each conversation's first utterance.  A model
that hears just one utterance cannot do better than guessing between
the members of such a pair; a model that carries context can.

File formats (all little-endian):
* features: "CXF1" | u32 num_frames | u32 feature_dim | f32 rows
* manifest: UTF-8 TSV, one utterance per line, '#' comments
* checkpoint: "CXP1" | u32 count | per tensor: u16 name_len, name,
  u8 ndim, u32 dims..., f32 data; JSON sidecar holds config/metadata
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, ManifestError
from .masks import SegmentLayout

FEATURE_MAGIC = b"CXF1"
CHECKPOINT_MAGIC = b"CXP1"
FRAME_PERIOD_MS = 10.0

# token id conventions shared across the package
BLANK_ID = 0
EOS_ID = 1
FIRST_DATA_ID = 2


@dataclass
class UtteranceRecord:
    conversation_id: str
    utterance_index: int
    speaker_id: str
    feature_path: str
    transcript: np.ndarray
    num_frames: int
    frame_period_ms: float = FRAME_PERIOD_MS
    features: np.ndarray | None = None  # in-memory shortcut; not serialized

    def load_features(self, root: str = "") -> np.ndarray:
        if self.features is not None:
            return self.features
        path = self.feature_path
        if root and not os.path.isabs(path):
            path = os.path.join(root, path)
        return read_features(path)


@dataclass
class Segment:
    """A contiguous run of utterances ending at the current one."""

    features: np.ndarray            # [T_total, D] raw frames
    layout: SegmentLayout           # raw per-utterance frame counts
    context_transcripts: list       # token arrays of included context
    current_transcript: np.ndarray
    speaker_filtered: bool
    over_budget: bool
    utterance_indices: tuple

    def __post_init__(self):
        if self.features.shape[0] != self.layout.total_frames:
            raise ContractError(
                f"segment features have {self.features.shape[0]} frames, "
                f"layout sums to {self.layout.total_frames}")


# -- synthetic conversations -----------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the synthetic conversation distribution.

    Data token ids start at 2 (0 is blank, 1 is eos).  The first
    n_speakers data tokens are speaker-unique disambiguators and occur
    only in a conversation's first utterance; the next 2*ambiguous_pairs
    ids form pairs whose acoustics collide across paired speakers;
    the rest are plain tokens with speaker-independent acoustics.
    """

    n_conversations: int = 8
    utterances_per_conversation: int = 4
    tokens_per_utterance: int = 6
    n_speakers: int = 2
    n_data_tokens: int = 12
    ambiguous_pairs: int = 2
    ambiguous_rate: float = 0.3
    frames_per_token: int = 8
    feature_dim: int = 8
    noise_std: float = 0.1

    def __post_init__(self):
        if min(self.n_conversations, self.utterances_per_conversation,
               self.tokens_per_utterance, self.n_speakers, self.frames_per_token,
               self.feature_dim) < 1:
            raise ContractError("all generator counts must be >= 1")
        if self.n_data_tokens < self.n_speakers + 2 * self.ambiguous_pairs + 1:
            raise ContractError(
                f"{self.n_data_tokens} data tokens cannot hold {self.n_speakers} "
                f"disambiguators + {2 * self.ambiguous_pairs} ambiguous + 1 plain")
        if not 0.0 <= self.ambiguous_rate <= 1.0:
            raise ContractError("ambiguous_rate must be in [0, 1]")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")
        if self.ambiguous_pairs > 0 and self.n_speakers < 2:
            raise ContractError("ambiguous pairs need at least 2 speakers")

    @property
    def vocab_size(self) -> int:
        """Model vocabulary: blank + eos + data tokens."""
        return FIRST_DATA_ID + self.n_data_tokens

    @property
    def disambiguator_ids(self) -> np.ndarray:
        return np.arange(FIRST_DATA_ID, FIRST_DATA_ID + self.n_speakers)

    @property
    def ambiguous_ids(self) -> np.ndarray:
        start = FIRST_DATA_ID + self.n_speakers
        return np.arange(start, start + 2 * self.ambiguous_pairs)

    @property
    def plain_ids(self) -> np.ndarray:
        start = FIRST_DATA_ID + self.n_speakers + 2 * self.ambiguous_pairs
        return np.arange(start, FIRST_DATA_ID + self.n_data_tokens)

    def ambiguous_partner(self, token: int) -> int:
        """The token whose sound collides with this one (across speakers)."""
        ids = self.ambiguous_ids
        pos = int(token) - int(ids[0])
        if not 0 <= pos < ids.size:
            raise ContractError(f"token {token} is not ambiguous")
        return int(ids[0]) + (pos ^ 1)


def build_templates(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    """Per token and speaker, a [frames_per_token, feature_dim] sound template.

    Plain tokens sound the same for every speaker; each ambiguous pair
    (a, b) swaps sounds between paired speakers (2k, 2k+1): a spoken by
    speaker 2k sounds exactly like b spoken by speaker 2k+1, and vice
    versa; disambiguators are speaker-unique.
    """
    v = spec.vocab_size
    shape = (spec.frames_per_token, spec.feature_dim)
    templates = np.zeros((v, spec.n_speakers) + shape, dtype=np.float32)
    for tok in spec.plain_ids:
        base = rng.standard_normal(shape).astype(np.float32)
        templates[tok, :] = base
    for s, tok in enumerate(spec.disambiguator_ids):
        for spk in range(spec.n_speakers):
            templates[tok, spk] = rng.standard_normal(shape).astype(np.float32)
    amb = spec.ambiguous_ids
    for k in range(spec.ambiguous_pairs):
        a, b = int(amb[2 * k]), int(amb[2 * k + 1])
        for spk_even in range(0, spec.n_speakers - 1, 2):
            sound_one = rng.standard_normal(shape).astype(np.float32)
            sound_two = rng.standard_normal(shape).astype(np.float32)
            templates[a, spk_even] = sound_one
            templates[b, spk_even + 1] = sound_one
            templates[b, spk_even] = sound_two
            templates[a, spk_even + 1] = sound_two
        if spec.n_speakers % 2:
            templates[a, spec.n_speakers - 1] = rng.standard_normal(shape)
            templates[b, spec.n_speakers - 1] = rng.standard_normal(shape)
    return templates


def _conversation_transcripts(spec: GeneratorSpec, speaker: int,
                              rng: np.random.Generator) -> list:
    """Token sequences for one conversation's utterances."""
    out = []
    for u in range(spec.utterances_per_conversation):
        tokens = np.empty(spec.tokens_per_utterance, dtype=np.int64)
        for i in range(spec.tokens_per_utterance):
            if u == 0:
                # first utterance: plant the speaker cue, no ambiguity yet
                if i == 0:
                    tokens[i] = spec.disambiguator_ids[speaker]
                else:
                    tokens[i] = rng.choice(spec.plain_ids)
            elif spec.ambiguous_pairs and rng.random() < spec.ambiguous_rate:
                tokens[i] = rng.choice(spec.ambiguous_ids)
            else:
                tokens[i] = rng.choice(spec.plain_ids)
        out.append(tokens)
    return out


def synthesize_utterance(spec: GeneratorSpec, templates: np.ndarray,
                         tokens: np.ndarray, speaker: int,
                         rng: np.random.Generator) -> np.ndarray:
    frames = np.concatenate([templates[int(t), speaker] for t in tokens], axis=0)
    if spec.noise_std > 0:
        frames = frames + rng.normal(0.0, spec.noise_std,
                                     frames.shape).astype(np.float32)
    return frames.astype(np.float32)


def generate_synthetic_conversations(spec: GeneratorSpec, seed: int,
                                     out_dir: str) -> str:
    """Write feature files and a manifest; returns the manifest path."""
    rng = np.random.default_rng(seed)
    templates = build_templates(spec, rng)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for c in range(spec.n_conversations):
        conv_id = f"conv{c:04d}"
        speaker = int(rng.integers(spec.n_speakers))
        transcripts = _conversation_transcripts(spec, speaker, rng)
        for u, tokens in enumerate(transcripts):
            frames = synthesize_utterance(spec, templates, tokens, speaker, rng)
            rel_path = f"{conv_id}_utt{u:02d}.cxf"
            write_features(os.path.join(out_dir, rel_path), frames)
            records.append(UtteranceRecord(
                conversation_id=conv_id, utterance_index=u,
                speaker_id=f"spk{speaker}", feature_path=rel_path,
                transcript=tokens, num_frames=frames.shape[0]))
    manifest = os.path.join(out_dir, "manifest.tsv")
    save_manifest(records, manifest)
    return manifest


# -- segment assembly ------------------------------------------------------------


def assemble_segment(records: list, current: int, budget_frames: int,
                     speaker_dependent: bool = False,
                     features_root: str = "",
                     context_transcript_override: list | None = None) -> Segment:
    """Current utterance plus the maximal fitting suffix of earlier ones.

    Walks backwards from the current utterance, skipping other-speaker
    utterances when speaker_dependent, adding whole utterances while
    the frame budget holds and stopping at the first eligible one that
    does not fit.  The current utterance is always included, even when
    it alone exceeds the budget (flagged, never truncated).

    ``context_transcript_override`` substitutes decoded transcripts for
    the reference ones (same order as the included context).
    """
    if not records:
        raise ContractError("no utterances to assemble")
    if not 0 <= current < len(records):
        raise ContractError(f"current index {current} out of range")
    cur = records[current]
    chosen = [current]
    used = cur.num_frames
    over_budget = used > budget_frames
    for j in range(current - 1, -1, -1):
        r = records[j]
        if speaker_dependent and r.speaker_id != cur.speaker_id:
            continue
        if used + r.num_frames > budget_frames:
            break
        chosen.append(j)
        used += r.num_frames
    chosen.reverse()
    feats = [records[j].load_features(features_root) for j in chosen]
    context = [np.asarray(records[j].transcript, dtype=np.int64)
               for j in chosen[:-1]]
    if context_transcript_override is not None:
        if len(context_transcript_override) != len(context):
            raise ContractError(
                f"{len(context_transcript_override)} override transcripts for "
                f"{len(context)} context utterances")
        context = [np.asarray(t, dtype=np.int64) for t in context_transcript_override]
    return Segment(
        features=np.concatenate(feats, axis=0) if feats else np.zeros((0, 0)),
        layout=SegmentLayout(tuple(f.shape[0] for f in feats)),
        context_transcripts=context,
        current_transcript=np.asarray(cur.transcript, dtype=np.int64),
        speaker_filtered=speaker_dependent,
        over_budget=over_budget,
        utterance_indices=tuple(records[j].utterance_index for j in chosen))


# -- SpecAugment ------------------------------------------------------------------


def spec_augment(features: np.ndarray, n_time_masks: int, max_time_width: int,
                 n_freq_masks: int, max_freq_width: int, seed: int) -> np.ndarray:
    """Zero out random time spans and feature channels; deterministic per seed."""
    t, d = features.shape
    if max_time_width > t:
        raise ContractError(f"time mask width {max_time_width} exceeds {t} frames")
    if max_freq_width > d:
        raise ContractError(f"freq mask width {max_freq_width} exceeds {d} channels")
    rng = np.random.default_rng(seed)
    out = features.copy()
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_time_width + 1))
        start = int(rng.integers(0, t - w + 1))
        out[start:start + w, :] = 0.0
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_freq_width + 1))
        start = int(rng.integers(0, d - w + 1))
        out[:, start:start + w] = 0.0
    return out


# -- feature files ---------------------------------------------------------------


def write_features(path: str, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ContractError(f"features must be [T, D], got shape {frames.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise FormatError("truncated feature header", offset=len(blob))
    t, d = struct.unpack_from("<II", blob, 4)
    expect = 12 + 4 * t * d
    if len(blob) != expect:
        raise FormatError(
            f"feature body holds {len(blob) - 12} bytes, header implies {4 * t * d}",
            offset=min(len(blob), expect))
    return np.frombuffer(blob, dtype="<f4", count=t * d, offset=12).reshape(t, d).copy()


# -- manifests --------------------------------------------------------------------


def save_manifest(records: list, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# conversation_id\tutterance_index\tspeaker_id\tfeature_path"
                "\tnum_frames\ttranscript\n")
        for r in records:
            tokens = " ".join(str(int(t)) for t in r.transcript)
            f.write(f"{r.conversation_id}\t{r.utterance_index}\t{r.speaker_id}"
                    f"\t{r.feature_path}\t{r.num_frames}\t{tokens}\n")


def load_manifest(path: str, check_features: bool = True) -> list:
    """Parse and validate; returns conversations as lists of records.

    Conversations are sorted by id, utterances by index; indices must
    be contiguous from 0 within each conversation.
    """
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ManifestError(f"expected 6 tab-separated fields, got {len(parts)}",
                                    line=lineno)
            conv_id, idx_s, speaker, feat_path, n_frames_s, tokens_s = parts
            try:
                idx = int(idx_s)
                n_frames = int(n_frames_s)
                tokens = np.array([int(t) for t in tokens_s.split()] if tokens_s.strip()
                                  else [], dtype=np.int64)
            except ValueError as e:
                raise ManifestError(f"unparsable numeric field: {e}", line=lineno)
            full = feat_path if os.path.isabs(feat_path) else os.path.join(root, feat_path)
            if check_features:
                if not os.path.exists(full):
                    raise ManifestError(f"feature file not found: {feat_path}",
                                        line=lineno)
                with open(full, "rb") as fh:
                    head = fh.read(12)
                if len(head) < 12 or head[:4] != FEATURE_MAGIC:
                    raise ManifestError(f"not a feature file: {feat_path}", line=lineno)
                t_hdr = struct.unpack_from("<I", head, 4)[0]
                if t_hdr != n_frames:
                    raise ManifestError(
                        f"manifest says {n_frames} frames, file header says {t_hdr}",
                        line=lineno)
            records.append((lineno, UtteranceRecord(
                conversation_id=conv_id, utterance_index=idx, speaker_id=speaker,
                feature_path=full, transcript=tokens, num_frames=n_frames)))

    by_conv: dict[str, list] = {}
    for lineno, rec in records:
        by_conv.setdefault(rec.conversation_id, []).append((lineno, rec))
    conversations = []
    for conv_id in sorted(by_conv):
        rows = sorted(by_conv[conv_id], key=lambda lr: lr[1].utterance_index)
        seen = {}
        for lineno, rec in rows:
            if rec.utterance_index in seen:
                raise ManifestError(
                    f"duplicate utterance index {rec.utterance_index} in "
                    f"{conv_id} (first at line {seen[rec.utterance_index]})",
                    line=lineno)
            seen[rec.utterance_index] = lineno
        indices = [rec.utterance_index for _, rec in rows]
        if indices != list(range(len(indices))):
            raise ManifestError(
                f"utterance indices of {conv_id} not contiguous from 0: {indices}",
                line=rows[0][0])
        conversations.append([rec for _, rec in rows])
    return conversations


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path: str, arrays: dict, meta: dict | None = None) -> None:
    """Named float32 tensors plus a JSON sidecar for config/metadata."""
    names = sorted(arrays)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.asarray(arrays[name], dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ContractError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise ContractError(f"tensor rank {arr.ndim} too large")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(meta or {}, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str):
    """Returns (name -> float32 array, metadata dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    if len(blob) < 8:
        raise FormatError("truncated checkpoint header", offset=len(blob))
    count = struct.unpack_from("<I", blob, 4)[0]
    pos = 8
    arrays = {}
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError("truncated tensor name length", offset=pos)
        name_len = struct.unpack_from("<H", blob, pos)[0]
        pos += 2
        if pos + name_len > len(blob):
            raise FormatError("truncated tensor name", offset=pos)
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > len(blob):
            raise FormatError(f"truncated rank of {name}", offset=pos)
        ndim = blob[pos]
        pos += 1
        if pos + 4 * ndim > len(blob):
            raise FormatError(f"truncated dims of {name}", offset=pos)
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if pos + 4 * n > len(blob):
            raise FormatError(f"truncated data of {name}", offset=pos)
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n,
                                     offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes", offset=pos)
    meta = {}
    sidecar = path + ".json"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
    return arrays, meta
