"""Task metrics, relevance baselines, and brute-force verification oracles.

Text normalization for ROUGE and BM25 is pinned here: lowercase, tokens are
maximal [a-z0-9] runs, no stemming, no stopword removal.  BM25 uses the
nonnegative idf variant ln(1 + (N - df + 0.5)/(df + 0.5)) with k1=1.2,
b=0.75.  F1 scores average over classes present in the labels (macro).

The oracles enumerate every profile, so they carry explicit size guards:
1e7 profiles for expected reward / ELBO, 1e4 for exact gradients (each
profile contributes a tape node).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import policy, reward, scorer
from .autodiff import Tape
from .core import Context, Profile
from .policy import EnumerationGuardError, PLDistribution

GRADIENT_GUARD = 10_000


def _tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def _f1(overlap: float, len_candidate: int, len_reference: int) -> float:
    if overlap == 0 or len_candidate == 0 or len_reference == 0:
        return 0.0
    # 2PR/(P+R) simplified to keep exact values exact (e.g. 4/5)
    return 2.0 * overlap / (len_candidate + len_reference)


def rouge1(candidate: str, reference: str) -> float:
    """Unigram-overlap F1 with clipped counts."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    overlap = sum((Counter(cand) & Counter(ref)).values())
    return _f1(overlap, len(cand), len(ref))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rougeL(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F1."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    return _f1(_lcs_length(cand, ref), len(cand), len(ref))


def classification_metrics(preds: Sequence, labels: Sequence) -> dict[str, float]:
    """Accuracy plus macro F1 over the classes present in `labels`."""
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    preds = list(preds)
    labels = list(labels)
    correct = sum(p == l for p, l in zip(preds, labels))
    f1s = []
    for cls in sorted(set(labels), key=repr):
        tp = sum(p == cls and l == cls for p, l in zip(preds, labels))
        fp = sum(p == cls and l != cls for p, l in zip(preds, labels))
        fn = sum(p != cls and l == cls for p, l in zip(preds, labels))
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return {"accuracy": correct / len(labels), "macro_f1": float(np.mean(f1s))}


def regression_metrics(preds: Sequence[float], targets: Sequence[float]) -> dict[str, float]:
    if len(preds) != len(targets):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(targets)} targets")
    diff = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return {"mae": float(np.mean(np.abs(diff))), "rmse": float(np.sqrt(np.mean(diff**2)))}


def bm25_scores(query: str, docs: Sequence[str], k1: float = 1.2, b: float = 0.75) -> np.ndarray:
    if len(docs) == 0:
        raise ValueError("bm25 needs a non-empty corpus")
    doc_tokens = [_tokens(d) for d in docs]
    doc_lens = np.array([len(t) for t in doc_tokens], dtype=np.float64)
    avgdl = float(doc_lens.mean()) or 1.0
    n_docs = len(docs)
    df: Counter = Counter()
    for toks in doc_tokens:
        df.update(set(toks))
    scores = np.zeros(n_docs)
    term_freqs = [Counter(t) for t in doc_tokens]
    for term in _tokens(query):
        d_f = df.get(term)
        if not d_f:
            continue
        idf = np.log(1.0 + (n_docs - d_f + 0.5) / (d_f + 0.5))
        for i, tf in enumerate(term_freqs):
            f = tf.get(term)
            if not f:
                continue
            scores[i] += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * doc_lens[i] / avgdl))
    return scores


def _rank_descending(scores: np.ndarray) -> list[int]:
    return [int(i) for i in np.argsort(-scores, kind="stable")]


def bm25_rank(query: str, docs: Sequence[str], k1: float = 1.2, b: float = 0.75) -> list[int]:
    """Document indices by descending BM25 score; ties go to the lower index."""
    return _rank_descending(bm25_scores(query, docs, k1, b))


def cosine_scores(query_embedding: np.ndarray, record_embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine between mean-pooled token matrices (zero vectors score 0)."""
    q = np.asarray(query_embedding, dtype=np.float64)
    q_vec = q.mean(axis=0) if q.ndim == 2 else q
    qn = np.linalg.norm(q_vec)
    out = np.zeros(len(record_embeddings))
    for i, emb in enumerate(record_embeddings):
        e = np.asarray(emb, dtype=np.float64)
        vec = e.mean(axis=0) if e.ndim == 2 else e
        norm = np.linalg.norm(vec)
        if qn > 0 and norm > 0:
            out[i] = float(q_vec @ vec) / (qn * norm)
    return out


def cosine_rank(query_embedding: np.ndarray, record_embeddings: Sequence[np.ndarray]) -> list[int]:
    return _rank_descending(cosine_scores(query_embedding, record_embeddings))


def exact_expected_reward(dist: PLDistribution, reward_fn: Callable[[Profile], float]) -> float:
    """Σ_P π(P) R(P) over every ordered profile (guarded enumeration)."""
    profiles = policy.enumerate_profiles(dist.n, dist.k)
    probs = policy.profile_probs(dist, profiles)
    rewards = np.array([reward_fn(Profile(tuple(row))) for row in profiles])
    return float(probs @ rewards)


def exact_expected_utility(dist: PLDistribution, world: reward.SyntheticWorld) -> float:
    """Fast path of exact_expected_reward for the synthetic utility."""
    profiles = policy.enumerate_profiles(dist.n, dist.k)
    probs = policy.profile_probs(dist, profiles)
    return float(probs @ reward.synthetic_utilities(world, profiles))


def exact_gradient(
    params: scorer.ScorerParams,
    context: Context,
    reward_fn: Callable[[Profile], float],
    k: int,
) -> dict[str, np.ndarray]:
    """Σ_P π(P) ∇log π(P) R(P) through the scorer's tape, by full enumeration."""
    n = context.n
    count = policy.perm_count(n, k)
    if count > GRADIENT_GUARD:
        raise EnumerationGuardError(
            f"{count} profiles exceeds the {GRADIENT_GUARD} exact-gradient guard"
        )
    tape = Tape()
    score_node, leaves = scorer.propensity_node(tape, context, params)
    dist = PLDistribution(score_node.value[:, 0], k)
    profiles = policy.enumerate_profiles(n, k)
    probs = policy.profile_probs(dist, profiles)
    total = None
    for row, prob in zip(profiles, probs):
        term = tape.scale(
            policy.logprob_node(tape, score_node, tuple(int(i) for i in row)),
            prob * reward_fn(Profile(tuple(row))),
        )
        total = term if total is None else tape.add(total, term)
    tape.backward(total)
    return {
        name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }


def elbo_check(
    dist: PLDistribution, likelihood_fn: Callable[[Profile], float]
) -> tuple[float, float, bool]:
    """Compare log Σ_P π(P) p(y|P) against Σ_P π(P) log p(y|P).

    Returns (lhs, rhs, holds) with `holds` true when lhs >= rhs - 1e-12.
    """
    profiles = policy.enumerate_profiles(dist.n, dist.k)
    probs = policy.profile_probs(dist, profiles)
    likelihoods = np.array([likelihood_fn(Profile(tuple(row))) for row in profiles])
    if np.any(likelihoods <= 0.0):
        raise ValueError("likelihoods must be strictly positive (log undefined at zero)")
    if np.any(likelihoods > 1.0):
        raise ValueError("likelihoods must not exceed 1")
    lhs = float(np.log(probs @ likelihoods))
    rhs = float(probs @ np.log(likelihoods))
    return lhs, rhs, lhs >= rhs - 1e-12


@dataclass(frozen=True)
class RegretReport:
    """Utility of the enumerated optimum against policy and relevance baselines."""

    optimal_utility: float
    optimal_profile: Profile
    policy_utility: float
    policy_profile: Profile
    cosine_utility: float
    cosine_profile: Profile
    bm25_utility: float
    bm25_profile: Profile

    def ratios(self) -> dict[str, float]:
        denom = self.optimal_utility if self.optimal_utility != 0 else 1.0
        return {
            "policy": self.policy_utility / denom,
            "cosine": self.cosine_utility / denom,
            "bm25": self.bm25_utility / denom,
        }

    def to_dict(self) -> dict:
        return {
            "optimal_utility": self.optimal_utility,
            "optimal_profile": list(self.optimal_profile),
            "policy_utility": self.policy_utility,
            "policy_profile": list(self.policy_profile),
            "cosine_utility": self.cosine_utility,
            "cosine_profile": list(self.cosine_profile),
            "bm25_utility": self.bm25_utility,
            "bm25_profile": list(self.bm25_profile),
            "ratios": self.ratios(),
        }


def optimal_profile(world: reward.SyntheticWorld, k: int) -> tuple[Profile, float]:
    """Enumerated argmax of the synthetic utility (ties to the lexicographically first)."""
    profiles = policy.enumerate_profiles(world.n, k)
    utilities = reward.synthetic_utilities(world, profiles)
    best = int(np.argmax(utilities))
    return Profile(tuple(int(i) for i in profiles[best])), float(utilities[best])


def regret_report(
    world: reward.SyntheticWorld,
    context: Context,
    params: scorer.ScorerParams,
    k: int,
) -> RegretReport:
    """Compare the enumerated optimum, the policy's top-K, and relevance baselines."""
    if context.n != world.n:
        raise ValueError(f"context has {context.n} records but the world has {world.n}")
    best_profile, best_utility = optimal_profile(world, k)

    scores = scorer.encode_records(context, params)
    pol_profile = policy.top_k_profile(PLDistribution(scores.scores, k))

    if context.query_embeddings is None:
        raise scorer.EmbeddingsMissingError("regret_report needs query embeddings for the cosine baseline")
    embeddings = [rec.token_embeddings for rec in context.records]
    cos_profile = Profile(tuple(cosine_rank(context.query_embeddings, embeddings)[:k]))

    docs = [f"{rec.input_text} {rec.output_text}" for rec in context.records]
    bm_profile = Profile(tuple(bm25_rank(context.query_text, docs)[:k]))

    return RegretReport(
        optimal_utility=best_utility,
        optimal_profile=best_profile,
        policy_utility=reward.synthetic_utility(world, pol_profile),
        policy_profile=pol_profile,
        cosine_utility=reward.synthetic_utility(world, cos_profile),
        cosine_profile=cos_profile,
        bm25_utility=reward.synthetic_utility(world, bm_profile),
        bm25_profile=bm_profile,
    )
