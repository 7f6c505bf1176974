# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the ranking-policy hot loops.

Same contracts as `_pl_py`; see that module for the parity notes.
"""

from libc.math cimport log, pow

import numpy as np

IMPLEMENTATION = "cython"


def perm_count(n: int, k: int) -> int:
    count = 1
    for i in range(n, n - k, -1):
        count *= i
    return count


def enumerate_perms(int n, int k):
    cdef long long total = perm_count(n, k)
    out = np.empty((total, k), dtype=np.int32)
    cdef int[:, ::1] o = out
    cdef int[::1] state = np.zeros(k, dtype=np.int32)   # current permutation
    cdef unsigned char[::1] used = np.zeros(n, dtype=np.uint8)
    cdef long long row = 0
    cdef int depth = 0, cand
    cdef Py_ssize_t i
    # iterative depth-first walk in ascending-candidate order = lexicographic
    cdef int[::1] cursor = np.full(k, -1, dtype=np.int32)
    while depth >= 0:
        cand = cursor[depth] + 1
        while cand < n and used[cand]:
            cand += 1
        if cand >= n:
            cursor[depth] = -1
            depth -= 1
            if depth >= 0:
                used[state[depth]] = 0
            continue
        cursor[depth] = cand
        state[depth] = cand
        if depth == k - 1:
            for i in range(k):
                o[row, i] = state[i]
            row += 1
            continue
        used[cand] = 1
        depth += 1
    return out


def profile_probs(const double[::1] scores, double s, const int[:, ::1] profiles):
    cdef Py_ssize_t m = profiles.shape[0]
    cdef Py_ssize_t k = profiles.shape[1]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double prob, denom, picked
    for i in range(m):
        prob = 1.0
        denom = s
        for j in range(k):
            picked = scores[profiles[i, j]]
            prob *= picked / denom
            denom = denom - picked
        o[i] = prob
    return out


def profile_logprobs(const double[::1] scores, double s, const int[:, ::1] profiles):
    cdef Py_ssize_t m = profiles.shape[0]
    cdef Py_ssize_t k = profiles.shape[1]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc, denom, picked
    for i in range(m):
        acc = 0.0
        denom = s
        for j in range(k):
            picked = scores[profiles[i, j]]
            acc += log(picked) - log(denom)
            denom = denom - picked
        o[i] = acc
    return out


def sample_profiles(const double[::1] scores, double s, int k, const double[:, ::1] uniforms):
    cdef Py_ssize_t m = uniforms.shape[0]
    cdef Py_ssize_t n = scores.shape[0]
    out = np.empty((m, k), dtype=np.int32)
    cdef int[:, ::1] o = out
    alive_arr = np.empty(n, dtype=np.uint8)
    cdef unsigned char[::1] alive = alive_arr
    cdef Py_ssize_t i, j, idx, pos
    cdef double mass, target, cum
    for i in range(m):
        for idx in range(n):
            alive[idx] = 1
        mass = s
        for j in range(k):
            target = uniforms[i, j] * mass
            cum = 0.0
            pos = -1
            for idx in range(n):
                if not alive[idx]:
                    continue
                cum += scores[idx]
                if cum > target:
                    pos = idx
                    break
            if pos < 0:  # fp underflow of the running mass: last live item
                for idx in range(n - 1, -1, -1):
                    if alive[idx]:
                        pos = idx
                        break
            o[i, j] = pos
            alive[pos] = 0
            mass = mass - scores[pos]
    return out


def synthetic_utilities(
    const double[::1] weights,
    const double[:, ::1] coverage,
    const signed char[:, ::1] conflict,
    double gamma,
    double lam,
    const int[:, ::1] profiles,
):
    cdef Py_ssize_t m = profiles.shape[0]
    cdef Py_ssize_t k = profiles.shape[1]
    cdef Py_ssize_t dims = weights.shape[0]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j, d, a, b
    cdef double util, best, cand, penalty
    disc_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] disc = disc_arr
    for j in range(k):
        disc[j] = pow(gamma, j)
    for i in range(m):
        util = 0.0
        for d in range(dims):
            best = 0.0
            for j in range(k):
                cand = disc[j] * coverage[profiles[i, j], d]
                if cand > best:
                    best = cand
            util += best * weights[d]
        penalty = 0.0
        for a in range(k):
            for b in range(a + 1, k):
                penalty += conflict[profiles[i, a], profiles[i, b]]
        o[i] = util - lam * penalty
    return out
