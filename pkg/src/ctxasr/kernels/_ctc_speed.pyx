# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC scan kernels; same contracts as ctc_numpy.

These are the per-frame recursions that dominate decode time in pure
Python: forward-backward for the training loss, per-hypothesis prefix
scoring inside beam search, and Viterbi alignment for trigger times.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log1p

cnp.import_array()


cdef inline double laddexp(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_alpha_beta(logp_in, labels_in):
    """Forward-backward loss and gradient wrt the log posteriors."""
    cdef double[:, ::1] logp = np.ascontiguousarray(logp_in, dtype=np.float64)
    cdef long[::1] labels = np.ascontiguousarray(labels_in, dtype=np.int64)
    cdef Py_ssize_t t_len = logp.shape[0]
    cdef Py_ssize_t n_lab = labels.shape[0]
    cdef Py_ssize_t s_len = 2 * n_lab + 1
    cdef Py_ssize_t t, s, k

    lat_arr = np.zeros(s_len, dtype=np.int64)
    lat_arr[1::2] = np.asarray(labels_in, dtype=np.int64)
    cdef long[::1] lat = lat_arr

    alpha_arr = np.full((t_len, s_len), -INFINITY)
    beta_arr = np.full((t_len, s_len), -INFINITY)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr

    skip_arr = np.zeros(s_len, dtype=np.uint8)
    cdef unsigned char[::1] skip_ok = skip_arr
    for s in range(2, s_len):
        if lat[s] != 0 and lat[s] != lat[s - 2]:
            skip_ok[s] = 1

    cdef double acc
    alpha[0, 0] = logp[0, lat[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, lat[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = laddexp(acc, alpha[t - 1, s - 1])
            if s >= 2 and skip_ok[s]:
                acc = laddexp(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logp[t, lat[s]]

    cdef double log_z = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        log_z = laddexp(log_z, alpha[t_len - 1, s_len - 2])
    grad_arr = np.zeros((t_len, logp.shape[1]), dtype=np.float64)
    if log_z == -INFINITY:
        return float("inf"), grad_arr

    beta[t_len - 1, s_len - 1] = logp[t_len - 1, lat[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = logp[t_len - 1, lat[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            acc = beta[t + 1, s]
            if s + 1 < s_len:
                acc = laddexp(acc, beta[t + 1, s + 1])
            if s + 2 < s_len and skip_ok[s + 2]:
                acc = laddexp(acc, beta[t + 1, s + 2])
            beta[t, s] = acc + logp[t, lat[s]]

    cdef double[:, ::1] grad = grad_arr
    for t in range(t_len):
        for s in range(s_len):
            k = lat[s]
            grad[t, k] = grad[t, k] - exp(alpha[t, s] + beta[t, s] - logp[t, k] - log_z)
    return float(-log_z), grad_arr


def ctc_viterbi(logp_in, labels_in):
    """Best single alignment; returns (its log prob, state index per frame)."""
    cdef double[:, ::1] logp = np.ascontiguousarray(logp_in, dtype=np.float64)
    cdef long[::1] labels = np.ascontiguousarray(labels_in, dtype=np.int64)
    cdef Py_ssize_t t_len = logp.shape[0]
    cdef Py_ssize_t n_lab = labels.shape[0]
    cdef Py_ssize_t s_len = 2 * n_lab + 1
    cdef Py_ssize_t t, s

    lat_arr = np.zeros(s_len, dtype=np.int64)
    lat_arr[1::2] = np.asarray(labels_in, dtype=np.int64)
    cdef long[::1] lat = lat_arr

    skip_arr = np.zeros(s_len, dtype=np.uint8)
    cdef unsigned char[::1] skip_ok = skip_arr
    for s in range(2, s_len):
        if lat[s] != 0 and lat[s] != lat[s - 2]:
            skip_ok[s] = 1

    score_arr = np.full((t_len, s_len), -INFINITY)
    back_arr = np.zeros((t_len, s_len), dtype=np.int64)
    cdef double[:, ::1] score = score_arr
    cdef long[:, ::1] back = back_arr

    score[0, 0] = logp[0, lat[0]]
    back[0, 0] = 0
    if s_len > 1:
        score[0, 1] = logp[0, lat[1]]
        back[0, 1] = 1

    cdef double best, cand
    cdef Py_ssize_t arg
    for t in range(1, t_len):
        for s in range(s_len):
            best = score[t - 1, s]
            arg = s
            if s >= 1:
                cand = score[t - 1, s - 1]
                if cand > best:
                    best = cand
                    arg = s - 1
            if s >= 2 and skip_ok[s]:
                cand = score[t - 1, s - 2]
                if cand > best:
                    best = cand
                    arg = s - 2
            score[t, s] = best + logp[t, lat[s]]
            back[t, s] = arg

    cdef Py_ssize_t end = s_len - 1
    if s_len > 1 and score[t_len - 1, s_len - 2] > score[t_len - 1, end]:
        end = s_len - 2
    cdef double final = score[t_len - 1, end]
    states_arr = np.full(t_len, -1, dtype=np.int32)
    if final == -INFINITY:
        return -float("inf"), states_arr
    cdef int[::1] states = states_arr
    s = end
    for t in range(t_len - 1, -1, -1):
        states[t] = <int> s
        s = back[t, s]
    return float(final), states_arr


def ctc_prefix_score_all(logp_in, last, r_prev_in, cands_in):
    """Prefix probabilities for every candidate one-token extension."""
    cdef double[:, ::1] logp = np.ascontiguousarray(logp_in, dtype=np.float64)
    cdef double[:, ::1] r_prev = np.ascontiguousarray(r_prev_in, dtype=np.float64)
    cdef long[::1] cands = np.ascontiguousarray(cands_in, dtype=np.int64)
    cdef Py_ssize_t t_len = logp.shape[0]
    cdef Py_ssize_t n = cands.shape[0]
    cdef long last_id = last
    cdef Py_ssize_t c, t
    cdef long tok

    r_new_arr = np.full((n, t_len, 2), -INFINITY)
    psi_arr = np.full(n, -INFINITY)
    cdef double[:, :, ::1] r_new = r_new_arr
    cdef double[::1] psi = psi_arr

    cdef double phi_prev, prev_nb, prev_b, e, start
    start = 0.0 if last_id < 0 else -INFINITY
    for c in range(n):
        tok = cands[c]
        prev_nb = -INFINITY
        prev_b = -INFINITY
        for t in range(t_len):
            if t == 0:
                phi_prev = start
            elif tok == last_id:
                phi_prev = r_prev[t - 1, 1]
            else:
                phi_prev = laddexp(r_prev[t - 1, 0], r_prev[t - 1, 1])
            e = logp[t, tok]
            r_new[c, t, 0] = laddexp(prev_nb, phi_prev) + e
            r_new[c, t, 1] = laddexp(prev_nb, prev_b) + logp[t, 0]
            psi[c] = laddexp(psi[c], phi_prev + e)
            prev_nb = r_new[c, t, 0]
            prev_b = r_new[c, t, 1]
    return r_new_arr, psi_arr
