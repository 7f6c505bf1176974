"""Pure-Python (numpy) kernels for the ranking-policy hot loops.

Mirrors the Cython module `_plc` function-for-function.  The per-profile
arithmetic follows the same operation order as the compiled code so the two
implementations agree bit-for-bit on probabilities and sampled indices
(log-domain and utility results may differ in the last ulp because libm and
numpy transcendentals are not guaranteed identical).

All callers pass the score total `s` explicitly so both implementations see
the exact same float.
"""

from __future__ import annotations

import numpy as np

IMPLEMENTATION = "python"


def perm_count(n: int, k: int) -> int:
    """Number of ordered k-permutations of n items, n!/(n-k)!."""
    count = 1
    for i in range(n, n - k, -1):
        count *= i
    return count


def enumerate_perms(n: int, k: int) -> np.ndarray:
    """All ordered k-permutations of range(n) in lexicographic order, int32 (count, k)."""
    perms = np.arange(n, dtype=np.int32).reshape(n, 1)
    used = np.eye(n, dtype=bool)
    for j in range(1, k):
        free_rows, free_cols = np.nonzero(~used)  # row-major scan: ascending per prefix
        perms = np.hstack([perms[free_rows], free_cols.reshape(-1, 1).astype(np.int32)])
        used = used[free_rows]
        used[np.arange(len(free_rows)), free_cols] = True
    return np.ascontiguousarray(perms)


def profile_probs(scores: np.ndarray, s: float, profiles: np.ndarray) -> np.ndarray:
    """Sequential-selection probability of each profile row."""
    m, k = profiles.shape
    prob = np.ones(m)
    denom = np.full(m, s)
    for j in range(k):
        picked = scores[profiles[:, j]]
        prob *= picked / denom
        denom = denom - picked
    return prob


def profile_logprobs(scores: np.ndarray, s: float, profiles: np.ndarray) -> np.ndarray:
    """Log of profile_probs, accumulated in log space."""
    m, k = profiles.shape
    out = np.zeros(m)
    denom = np.full(m, s)
    for j in range(k):
        picked = scores[profiles[:, j]]
        out += np.log(picked) - np.log(denom)
        denom = denom - picked
    return out


def sample_profiles(
    scores: np.ndarray, s: float, k: int, uniforms: np.ndarray
) -> np.ndarray:
    """Draw one k-permutation per row of `uniforms` by sequential roulette selection.

    Position j of draw i consumes uniforms[i, j]; an item is chosen with
    probability score/remaining-mass and removed from the pool.
    """
    m = uniforms.shape[0]
    n = scores.shape[0]
    out = np.empty((m, k), dtype=np.int32)
    alive = np.ones((m, n), dtype=bool)
    mass = np.full(m, s)
    rows = np.arange(m)
    for j in range(k):
        live_scores = np.where(alive, scores[None, :], 0.0)
        cum = np.cumsum(live_scores, axis=1)
        target = uniforms[:, j] * mass
        hit = cum > target[:, None]
        pos = hit.argmax(axis=1)
        # fp underflow of the running mass: fall back to the last live item
        none_hit = ~hit[:, -1]
        if none_hit.any():
            last_alive = (n - 1) - np.argmax(alive[none_hit][:, ::-1], axis=1)
            pos[none_hit] = last_alive
        out[:, j] = pos
        alive[rows, pos] = False
        mass = mass - scores[pos]
    return out


def synthetic_utilities(
    weights: np.ndarray,
    coverage: np.ndarray,
    conflict: np.ndarray,
    gamma: float,
    lam: float,
    profiles: np.ndarray,
) -> np.ndarray:
    """Position-discounted max-coverage minus pairwise conflict penalty, per profile row."""
    m, k = profiles.shape
    discount = gamma ** np.arange(k)
    cov = coverage[profiles]  # (m, k, D)
    best = (cov * discount[None, :, None]).max(axis=1)  # (m, D)
    util = best @ weights
    penalty = np.zeros(m)
    for a in range(k):
        for b in range(a + 1, k):
            penalty += conflict[profiles[:, a], profiles[:, b]]
    return util - lam * penalty
