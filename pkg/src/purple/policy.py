"""The Plackett-Luce distribution over ordered K-selections of records.

A profile ⟨p_1..p_K⟩ has probability ∏_j f(p_j) / (S - Σ_{m<j} f(p_m)) where
f are the per-record scores and S their total: items are drawn sequentially
without replacement, each with probability proportional to its score among
the remaining pool.  The distribution is invariant to rescaling all scores
by a positive constant.

Exact enumeration, batch scoring, and sampling run on the kernel layer
(compiled when available); see `purple._kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .autodiff import Node, Tape
from .core import Profile, require_valid_profile

EPSILON_SCORE = 1e-9

ENUMERATION_GUARD = 10_000_000


class DegeneracyError(ArithmeticError):
    """Residual score mass fell below the numerical floor."""


class EnumerationGuardError(ValueError):
    """The requested permutation count exceeds the enumeration guard."""


def _as_scores(scores) -> np.ndarray:
    arr = getattr(scores, "scores", scores)
    arr = np.asarray(arr, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    return arr


@dataclass(frozen=True)
class PLDistribution:
    """Scores (floored at EPSILON_SCORE) plus the selection length k."""

    scores: np.ndarray
    k: int

    def __post_init__(self) -> None:
        arr = np.maximum(_as_scores(self.scores), EPSILON_SCORE)
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)
        if not 1 <= self.k <= arr.size:
            raise ValueError(f"k={self.k} must satisfy 1 <= k <= {arr.size}")

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def total(self) -> float:
        return float(np.sum(self.scores))


def _profile_array(profiles) -> np.ndarray:
    arr = np.asarray(profiles, dtype=np.int32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return np.ascontiguousarray(arr)


def profile_prob(dist: PLDistribution, profile: Profile | Sequence[int]) -> float:
    """Exact probability of one ordered profile under the distribution."""
    indices = tuple(profile)
    require_valid_profile(indices, dist.n)
    if len(indices) != dist.k:
        raise ValueError(f"profile length {len(indices)} != k={dist.k}")
    prob = 1.0
    denom = dist.total
    for idx in indices:
        if denom <= EPSILON_SCORE:
            raise DegeneracyError(f"residual score mass {denom} at or below {EPSILON_SCORE}")
        picked = dist.scores[idx]
        prob *= picked / denom
        denom = denom - picked
    return prob


def profile_logprob(dist: PLDistribution, profile: Profile | Sequence[int]) -> float:
    """Log of profile_prob, accumulated in log space."""
    indices = tuple(profile)
    require_valid_profile(indices, dist.n)
    if len(indices) != dist.k:
        raise ValueError(f"profile length {len(indices)} != k={dist.k}")
    acc = 0.0
    denom = dist.total
    for idx in indices:
        if denom <= EPSILON_SCORE:
            raise DegeneracyError(f"residual score mass {denom} at or below {EPSILON_SCORE}")
        picked = dist.scores[idx]
        acc += math.log(picked) - math.log(denom)
        denom = denom - picked
    return acc


def profile_probs(dist: PLDistribution, profiles) -> np.ndarray:
    """Vectorized profile_prob over an (m, k) index array."""
    return _kernels.profile_probs(dist.scores, dist.total, _profile_array(profiles))


def profile_logprobs(dist: PLDistribution, profiles) -> np.ndarray:
    return _kernels.profile_logprobs(dist.scores, dist.total, _profile_array(profiles))


def sample_index_array(dist: PLDistribution, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m profiles as an (m, k) int32 array, sequentially without replacement.

    Consumes exactly m*k uniforms from `rng`, so results are identical across
    kernel implementations for a given generator state.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    uniforms = rng.random((m, dist.k))
    return _kernels.sample_profiles(dist.scores, dist.total, dist.k, uniforms)


def sample_profiles(dist: PLDistribution, m: int, rng: np.random.Generator) -> list[Profile]:
    return [Profile(tuple(row)) for row in sample_index_array(dist, m, rng)]


def top_k_profile(dist: PLDistribution) -> Profile:
    """The k highest-scoring indices in descending score order; ties go to the lower index."""
    order = np.argsort(-dist.scores, kind="stable")
    return Profile(tuple(int(i) for i in order[: dist.k]))


def perm_count(n: int, k: int) -> int:
    """n! / (n-k)!, the number of ordered k-selections."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    return _kernels.perm_count(n, k)


def enumerate_profiles(n: int, k: int) -> np.ndarray:
    """All ordered k-permutations of range(n), lexicographic, as an (count, k) int32 array."""
    count = perm_count(n, k)
    if count > ENUMERATION_GUARD:
        raise EnumerationGuardError(
            f"{count} profiles exceeds the {ENUMERATION_GUARD} enumeration guard; "
            "use sampling-based estimates instead"
        )
    return _kernels.enumerate_perms(n, k)


def logprob_score_gradient(dist: PLDistribution, profile: Profile | Sequence[int]) -> np.ndarray:
    """d log π(profile) / d scores, length n.

    For each position j with remaining pool R_j and picked index p_j:
    +1/f(p_j) on the picked index and -1/Σ_{i∈R_j} f(i) on every index in R_j.
    """
    indices = tuple(profile)
    require_valid_profile(indices, dist.n)
    scores = dist.scores
    grad = np.zeros(dist.n)
    remaining = np.ones(dist.n, dtype=bool)
    denom = dist.total
    for idx in indices:
        if denom <= EPSILON_SCORE:
            raise DegeneracyError(f"residual score mass {denom} at or below {EPSILON_SCORE}")
        grad[idx] += 1.0 / scores[idx]
        grad[remaining] -= 1.0 / denom
        remaining[idx] = False
        denom = denom - scores[idx]
    return grad


def logprob_node(tape: Tape, score_node: Node, profile: Profile | Sequence[int]) -> Node:
    """Tape node holding log π(profile) for the scores in `score_node` (an N x 1 column).

    The backward rule is the analytic score gradient above, so training
    gradients flow from the selection log-probability into the scorer.
    Scores below EPSILON_SCORE are floored exactly as `PLDistribution` does
    (a collapsed policy drives unfavored sigmoids arbitrarily close to zero);
    floored entries get zero gradient, like the flat side of a relu.
    """
    if score_node.value.shape[1] != 1:
        raise ValueError(f"score node must be a column vector, got {score_node.value.shape}")
    raw = score_node.value[:, 0]
    if np.any(raw <= 0.0):
        raise DegeneracyError("scores on the tape must be strictly positive")
    scores = np.maximum(raw, EPSILON_SCORE)
    indices = tuple(profile)
    require_valid_profile(indices, scores.size)
    total = float(np.sum(scores))

    acc = 0.0
    denom = total
    for idx in indices:
        if denom <= EPSILON_SCORE:
            raise DegeneracyError(f"residual score mass {denom} at or below {EPSILON_SCORE}")
        acc += math.log(scores[idx]) - math.log(denom)
        denom = denom - scores[idx]

    grad = np.zeros(scores.size)
    remaining = np.ones(scores.size, dtype=bool)
    denom = total
    for idx in indices:
        grad[idx] += 1.0 / scores[idx]
        grad[remaining] -= 1.0 / denom
        remaining[idx] = False
        denom = denom - scores[idx]
    grad[raw < EPSILON_SCORE] = 0.0
    grad_col = grad.reshape(-1, 1)

    def backward(g):
        return (g[0, 0] * grad_col,)

    return tape.custom([[acc]], (score_node,), backward, op="pl_logprob")
