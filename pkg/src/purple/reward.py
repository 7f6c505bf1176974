"""Reward oracles.

Three families:

* `llm_loglik_reward` — the over-the-wire reward: POST the rendered prompt and
  the reference response to a scoring service and sum the per-token
  log-probabilities of the reference continuation.
* `synthetic_utility` — a deterministic position-discounted max-coverage
  utility with pairwise conflict penalties.  Order-sensitive and non-additive
  by construction: a redundant record adds nothing and a conflicting one
  subtracts, so adding a record can lower the total.
* `metric_reward` — task metrics (exact-match accuracy, negated MAE, ROUGE-1
  F1) delegated to `purple.evalkit`.

Wire contract: ``POST {endpoint}/score`` with ``{"prompt": str, "reference":
str}``; the response carries ``{"token_logprobs": [float], "tokens": [str],
"reference_start": int}`` where the tokens from ``reference_start`` onward
concatenate to exactly the reference text.  The environment variable
``PURPLE_REWARD_ENDPOINT`` overrides any configured endpoint.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import requests

from . import _kernels
from .core import DatasetExample, Profile, require_valid_profile

ENDPOINT_ENV_VAR = "PURPLE_REWARD_ENDPOINT"

MAX_ATTEMPTS = 3
INITIAL_BACKOFF_S = 0.25


class RewardTransportError(RuntimeError):
    """The scoring service stayed unreachable through all retries."""


class RewardConfigError(RuntimeError):
    """The service answered but without usable log-probabilities."""


class RewardAlignmentError(RuntimeError):
    """The echoed tokens do not reproduce the reference text."""


@dataclass(frozen=True)
class RewardRequest:
    prompt: str
    reference: str

    def __post_init__(self) -> None:
        if not self.reference:
            raise ValueError("reference must be non-empty for reward computation")


def resolve_endpoint(configured: str | None = None) -> str:
    endpoint = os.environ.get(ENDPOINT_ENV_VAR) or configured
    if not endpoint:
        raise RewardConfigError(
            f"no reward endpoint: set {ENDPOINT_ENV_VAR} or pass one explicitly"
        )
    return endpoint.rstrip("/")


def llm_loglik_reward(
    request: RewardRequest,
    endpoint: str,
    *,
    normalize_by_length: bool = False,
    timeout: float = 30.0,
    session: requests.Session | None = None,
) -> float:
    """Sum of reference-token log-probabilities from the scoring service.

    Prompt tokens are excluded; only the tokens from `reference_start` onward
    count.  Transient transport failures are retried with exponential backoff
    (3 attempts starting at 250 ms).
    """
    url = endpoint.rstrip("/") + "/score"
    payload = {"prompt": request.prompt, "reference": request.reference}
    post = (session or requests).post
    last_error: Exception | None = None
    for attempt in range(MAX_ATTEMPTS):
        if attempt:
            time.sleep(INITIAL_BACKOFF_S * 2 ** (attempt - 1))
        try:
            response = post(url, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            last_error = exc
            continue
        if response.status_code >= 500:
            last_error = RewardTransportError(f"server error {response.status_code}")
            continue
        if response.status_code != 200:
            raise RewardConfigError(f"scoring service rejected the request: HTTP {response.status_code}")
        body = response.json()
        logprobs = body.get("token_logprobs")
        if not logprobs:
            raise RewardConfigError("scoring service returned no token_logprobs; enable logprob echo")
        tokens = body.get("tokens") or []
        start = body.get("reference_start")
        if start is None or not 0 <= start <= len(tokens):
            raise RewardConfigError(f"reference_start {start!r} outside the token range")
        if "".join(tokens[start:]) != request.reference:
            raise RewardAlignmentError(
                "echoed tokens after reference_start do not concatenate to the reference"
            )
        reference_logprobs = logprobs[start:]
        total = float(sum(reference_logprobs))
        if normalize_by_length:
            total /= len(reference_logprobs)
        return total
    raise RewardTransportError(
        f"scoring service unreachable after {MAX_ATTEMPTS} attempts: {last_error}"
    )


@dataclass(frozen=True)
class SyntheticWorld:
    """Ground-truth utility parameters for one user's record pool."""

    weights: np.ndarray  # (D,) topic weights, >= 0
    coverage: np.ndarray  # (N, D) per-record topic coverage in [0, 1]
    conflict: np.ndarray  # (N, N) symmetric 0/1, zero diagonal
    gamma: float  # position discount in (0, 1]
    lam: float  # conflict penalty >= 0

    def __post_init__(self) -> None:
        weights = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
        coverage = np.ascontiguousarray(self.coverage, dtype=np.float64)
        conflict = np.ascontiguousarray(self.conflict, dtype=np.int8)
        if np.any(weights < 0):
            raise ValueError("topic weights must be non-negative")
        if coverage.ndim != 2 or coverage.shape[1] != weights.size:
            raise ValueError(f"coverage must be (N, {weights.size}), got {coverage.shape}")
        if conflict.shape != (coverage.shape[0],) * 2:
            raise ValueError("conflict matrix must be N x N")
        if np.any(conflict != conflict.T):
            raise ValueError("conflict matrix must be symmetric")
        if np.any(np.diag(conflict) != 0):
            raise ValueError("conflict matrix must have a zero diagonal")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("conflict penalty must be >= 0")
        for arr in (weights, coverage, conflict):
            arr.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "coverage", coverage)
        object.__setattr__(self, "conflict", conflict)

    @property
    def n(self) -> int:
        return self.coverage.shape[0]

    @property
    def dims(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "coverage": self.coverage.tolist(),
            "conflict": self.conflict.tolist(),
            "gamma": self.gamma,
            "lam": self.lam,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticWorld":
        return cls(
            weights=np.array(obj["weights"]),
            coverage=np.array(obj["coverage"]),
            conflict=np.array(obj["conflict"]),
            gamma=obj["gamma"],
            lam=obj["lam"],
        )


def synthetic_utility(world: SyntheticWorld, profile: Profile | Sequence[int]) -> float:
    """U(P) = Σ_d w_d · max_j γ^(j-1) c[p_j, d]  -  λ · Σ_{j<j'} conflict[p_j, p_j']."""
    indices = tuple(profile)
    require_valid_profile(indices, world.n)
    covered = 0.0
    for d in range(world.dims):
        best = 0.0
        for j, idx in enumerate(indices):
            cand = world.gamma**j * world.coverage[idx, d]
            if cand > best:
                best = cand
        covered += world.weights[d] * best
    penalty = 0
    for a in range(len(indices)):
        for b in range(a + 1, len(indices)):
            penalty += int(world.conflict[indices[a], indices[b]])
    return float(covered - world.lam * penalty)


def synthetic_utilities(world: SyntheticWorld, profiles: np.ndarray) -> np.ndarray:
    """Kernel-backed batch form of synthetic_utility over an (m, k) index array."""
    arr = np.ascontiguousarray(np.asarray(profiles, dtype=np.int32))
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return _kernels.synthetic_utilities(
        world.weights, world.coverage, world.conflict, world.gamma, world.lam, arr
    )


@dataclass(frozen=True)
class RewardSample:
    """One sampled profile with its reward and sampling-time log-probability."""

    profile: Profile
    reward: float
    logprob: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


def metric_reward(metric: str, generated: str, reference: str) -> float:
    """Task-metric rewards: accuracy (exact match), neg_mae, or rouge1 F1."""
    from . import evalkit  # deferred: evalkit imports policy/scorer machinery

    if metric == "accuracy":
        return 1.0 if generated.strip() == reference.strip() else 0.0
    if metric == "neg_mae":
        try:
            pred = float(generated.strip())
            target = float(reference.strip())
        except ValueError:
            raise ValueError(
                f"neg_mae needs numeric texts, got {generated!r} vs {reference!r}"
            ) from None
        return -abs(pred - target)
    if metric == "rouge1":
        return evalkit.rouge1(generated, reference)
    raise ValueError(f"unknown metric {metric!r}; expected accuracy, neg_mae, or rouge1")


class RewardCache:
    """Thread-safe get-or-insert cache keyed by (prompt, reference) digests.

    The first caller for a key computes; concurrent callers for the same key
    block on its Future rather than recomputing.
    """

    def __init__(self) -> None:
        self._futures: dict[tuple[str, str], Future] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(prompt: str, reference: str) -> tuple[str, str]:
        return (
            hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            hashlib.sha256(reference.encode("utf-8")).hexdigest(),
        )

    def get_or_compute(self, prompt: str, reference: str, compute: Callable[[], float]) -> float:
        key = self._key(prompt, reference)
        with self._lock:
            future = self._futures.get(key)
            owner = future is None
            if owner:
                future = Future()
                self._futures[key] = future
        if owner:
            try:
                future.set_result(compute())
            except BaseException as exc:
                with self._lock:
                    self._futures.pop(key, None)
                future.set_exception(exc)
                raise
        return future.result()

    def __len__(self) -> int:
        with self._lock:
            return len(self._futures)


class SyntheticOracle:
    """In-process reward: ground-truth utility of the profile, per user world."""

    def __init__(self, worlds: Mapping[str, SyntheticWorld]):
        self.worlds = dict(worlds)

    def __call__(self, example: DatasetExample, profile: Profile, prompt: str) -> float:
        try:
            world = self.worlds[example.user_id]
        except KeyError:
            raise KeyError(f"no synthetic world for user {example.user_id!r}") from None
        return synthetic_utility(world, profile)


class HttpRewardOracle:
    """Over-the-wire reward with per-run caching and a shared session."""

    def __init__(
        self,
        endpoint: str | None = None,
        *,
        normalize_by_length: bool = False,
        timeout: float = 30.0,
        cache: RewardCache | None = None,
    ):
        self.endpoint = resolve_endpoint(endpoint)
        self.normalize_by_length = normalize_by_length
        self.timeout = timeout
        self.cache = cache if cache is not None else RewardCache()
        self._session = requests.Session()

    def __call__(self, example: DatasetExample, profile: Profile, prompt: str) -> float:
        reference = example.context.reference
        return self.cache.get_or_compute(
            prompt,
            reference,
            lambda: llm_loglik_reward(
                RewardRequest(prompt, reference),
                self.endpoint,
                normalize_by_length=self.normalize_by_length,
                timeout=self.timeout,
                session=self._session,
            ),
        )
