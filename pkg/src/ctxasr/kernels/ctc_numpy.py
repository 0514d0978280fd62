"""Pure-numpy CTC recursions; reference semantics for the compiled kernels.

All three functions are sequential scans over time that numpy cannot
vectorize away, which is why a compiled twin exists.  Everything runs
in float64 regardless of the caller's model precision: path posteriors
underflow float32 quickly, and the decode comparisons need backends to
agree to tight tolerances.

Conventions: blank is label id 0; ``labels`` never contain blank;
``-inf`` marks impossible lattice states; prefix state columns are
[:, 0] = paths ending in a non-blank, [:, 1] = paths ending in blank.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def _lattice(labels: np.ndarray) -> np.ndarray:
    """Blank-augmented label sequence: blank, y1, blank, y2, ..., blank."""
    lat = np.zeros(2 * labels.size + 1, dtype=np.int64)
    lat[1::2] = labels
    return lat


def ctc_alpha_beta(logp: np.ndarray, labels: np.ndarray):
    """Forward-backward loss and gradient wrt the log posteriors.

    Returns (loss, grad) with loss = -log p(labels | logp) marginalized
    over all alignments; loss is +inf (grad zero) when no alignment
    fits in the available frames.
    """
    logp = np.asarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    t_len, _ = logp.shape
    lat = _lattice(labels)
    s_len = lat.size

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = logp[0, lat[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, lat[1]]
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (lat[2:] != 0) & (lat[2:] != lat[:-2])
    for t in range(1, t_len):
        stay = alpha[t - 1]
        move = np.full(s_len, NEG_INF)
        move[1:] = alpha[t - 1, :-1]
        skip = np.full(s_len, NEG_INF)
        skip[2:] = alpha[t - 1, :-2]
        skip = np.where(skip_ok, skip, NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, move), skip) + logp[t, lat]

    log_z = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        log_z = np.logaddexp(log_z, alpha[t_len - 1, s_len - 2])
    if np.isneginf(log_z):
        return np.inf, np.zeros_like(logp)

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = logp[t_len - 1, lat[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = logp[t_len - 1, lat[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        stay = beta[t + 1]
        move = np.full(s_len, NEG_INF)
        move[:-1] = beta[t + 1, 1:]
        skip = np.full(s_len, NEG_INF)
        skip[:-2] = beta[t + 1, 2:]
        can_skip_out = np.zeros(s_len, dtype=bool)
        can_skip_out[:-2] = skip_ok[2:]
        skip = np.where(can_skip_out, skip, NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, move), skip) + logp[t, lat]

    # occupancy of state s at frame t, with the frame's emission counted once
    gamma = alpha + beta - logp[:, lat]
    occ = np.exp(gamma - log_z)
    grad = np.zeros_like(logp)
    for s in range(s_len):
        grad[:, lat[s]] += occ[:, s]
    return float(-log_z), -grad


def ctc_viterbi(logp: np.ndarray, labels: np.ndarray):
    """Best single alignment; returns (its log prob, state index per frame)."""
    logp = np.asarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    t_len, _ = logp.shape
    lat = _lattice(labels)
    s_len = lat.size

    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (lat[2:] != 0) & (lat[2:] != lat[:-2])
    score = np.full((t_len, s_len), NEG_INF)
    back = np.zeros((t_len, s_len), dtype=np.int64)
    score[0, 0] = logp[0, lat[0]]
    back[0, 0] = 0
    if s_len > 1:
        score[0, 1] = logp[0, lat[1]]
        back[0, 1] = 1
    for t in range(1, t_len):
        stay = score[t - 1]
        move = np.full(s_len, NEG_INF)
        move[1:] = score[t - 1, :-1]
        skip = np.full(s_len, NEG_INF)
        skip[2:] = score[t - 1, :-2]
        skip = np.where(skip_ok, skip, NEG_INF)
        choices = np.stack([stay, move, skip])
        pick = np.argmax(choices, axis=0)
        score[t] = choices[pick, np.arange(s_len)] + logp[t, lat]
        back[t] = np.arange(s_len) - pick

    ends = [s_len - 1] + ([s_len - 2] if s_len > 1 else [])
    best_end = max(ends, key=lambda s: score[t_len - 1, s])
    best = score[t_len - 1, best_end]
    if np.isneginf(best):
        return -np.inf, np.full(t_len, -1, dtype=np.int32)
    states = np.zeros(t_len, dtype=np.int32)
    s = best_end
    for t in range(t_len - 1, -1, -1):
        states[t] = s
        s = back[t, s]
    return float(best), states


def ctc_prefix_score_all(logp: np.ndarray, last: int,
                         r_prev: np.ndarray, cands: np.ndarray):
    """Prefix probabilities for every candidate one-token extension.

    ``r_prev`` is the [T, 2] path-state table of the prefix being
    extended (columns: ends-non-blank, ends-blank); ``last`` is its
    final token id, -1 for the empty prefix.  Returns the [C, T, 2]
    tables of the extended prefixes and their [C] prefix log
    probabilities (output starts with the extended prefix, any
    continuation).
    """
    logp = np.asarray(logp, dtype=np.float64)
    r_prev = np.asarray(r_prev, dtype=np.float64)
    cands = np.asarray(cands, dtype=np.int64)
    t_len = logp.shape[0]
    n = cands.size

    merged = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
    # paths of the old prefix that a candidate may extend at the next frame:
    # repeating the last token must first pass through a blank
    phi = np.where(cands[:, None] == last, r_prev[None, :, 1], merged[None, :])  # [C,T]

    r_new = np.full((n, t_len, 2), NEG_INF)
    psi = np.full(n, NEG_INF)
    emit = logp[:, cands].T                                                      # [C,T]
    start = 0.0 if last < 0 else NEG_INF
    for t in range(t_len):
        phi_prev = np.full(n, start) if t == 0 else phi[:, t - 1]
        prev_nb = r_new[:, t - 1, 0] if t else np.full(n, NEG_INF)
        prev_b = r_new[:, t - 1, 1] if t else np.full(n, NEG_INF)
        r_new[:, t, 0] = np.logaddexp(prev_nb, phi_prev) + emit[:, t]
        r_new[:, t, 1] = np.logaddexp(prev_nb, prev_b) + logp[t, 0]
        psi = np.logaddexp(psi, phi_prev + emit[:, t])
    return r_new, psi
