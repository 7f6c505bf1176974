"""REINFORCE training of the propensity scorer.

Per batch: for every example, sample M profiles from the current policy,
score their rewards, z-score them within the example, and accumulate
(1/B) Σ_b (1/M) Σ_m ∇log π(P_b^m | C_b) · r̃_b^m through the scorer's tapes.
Gradients are clipped by global L2 norm, parameters stepped with
bias-corrected Adam.  After each epoch the deterministic top-K profiles are
scored on a held-out validation split; every improvement writes a checkpoint
and the best one is returned.

Runs are a pure function of (seed, dataset, config, oracle): sampling draws
come from per-(epoch, example) seeded generators, so reward parallelism and
kernel choice never change the trajectory.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import policy, scorer
from .autodiff import Tape
from .core import DatasetExample, Profile, PromptTemplate, DEFAULT_TEMPLATE, serialize_profile
from .policy import PLDistribution
from .reward import RewardSample
from .scorer import ScorerParams

STD_GUARD = 1e-8


class NonFiniteGradientError(ArithmeticError):
    """A gradient tensor went NaN/inf; the batch is reported, not dropped."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    samples_per_example: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 10
    seed: int = 0
    reward_parallelism: int = 8
    k: int = 5
    validation_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.samples_per_example < 2:
            raise ValueError("samples_per_example must be >= 2 (z-scoring needs variance)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.reward_parallelism < 1:
            raise ValueError("reward_parallelism must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init_like(cls, params: ScorerParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like())


def normalize_rewards(rewards: Sequence[float]) -> np.ndarray:
    """Z-score with the population standard deviation; all zeros when std < 1e-8."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least 2 rewards to normalize")
    std = float(np.std(arr))
    if std < STD_GUARD:
        return np.zeros_like(arr)
    return (arr - np.mean(arr)) / std


def estimate_gradient(
    params: ScorerParams,
    batch: Sequence[tuple],
) -> dict[str, np.ndarray]:
    """Batched REINFORCE estimate from pre-sampled, pre-rewarded profiles.

    `batch` holds (Context, [RewardSample; M]) pairs, every example with the
    same M.  Examples whose rewards all tie contribute exactly zero.
    """
    if not batch:
        raise ValueError("empty batch")
    m_count = len(batch[0][1])
    grads = params.zeros_like()
    inv_b = 1.0 / len(batch)
    for context, samples in batch:
        if len(samples) != m_count:
            raise ValueError(
                f"inconsistent sample counts in batch: {len(samples)} != {m_count}"
            )
        normalized = normalize_rewards([s.reward for s in samples])
        if not np.any(normalized):
            continue
        tape = Tape()
        score_node, leaves = scorer.propensity_node(tape, context, params)
        surrogate = None
        for sample, weight in zip(samples, normalized):
            if weight == 0.0:
                continue
            term = tape.scale(
                policy.logprob_node(tape, score_node, sample.profile), weight / m_count
            )
            surrogate = term if surrogate is None else tape.add(surrogate, term)
        tape.backward(surrogate)
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                grads[name] += inv_b * leaf.grad
    return grads


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_global_norm(
    grads: dict[str, np.ndarray], clip_norm: float
) -> dict[str, np.ndarray]:
    """Scale all gradients by clip_norm/norm when the global L2 norm exceeds it."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    norm = global_grad_norm(grads)
    if norm <= clip_norm:
        return grads
    factor = clip_norm / norm
    return {name: g * factor for name, g in grads.items()}


def adam_step(
    params: ScorerParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[ScorerParams, AdamState]:
    """Standard bias-corrected Adam descent step; mutates and returns params/state.

    The training loop maximizes expected reward by descending on the negated
    objective gradient.
    """
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, tensor in params.tensors.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        tensor -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params, state


@dataclass
class TrainResult:
    best_checkpoint: str
    best_val_reward: float
    log_path: str
    history: list[dict] = field(default_factory=list)


RewardOracle = Callable[[DatasetExample, Profile, str], float]


def _score_rewards(
    oracle: RewardOracle,
    jobs: Sequence[tuple[DatasetExample, Profile, str]],
    parallelism: int,
) -> list[float]:
    if parallelism <= 1 or len(jobs) <= 1:
        return [oracle(ex, prof, prompt) for ex, prof, prompt in jobs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda job: oracle(*job), jobs))


def _chunks(seq: Sequence, size: int):
    for start in range(0, len(seq), size):
        yield seq[start : start + size]


def train(
    examples: Sequence[DatasetExample],
    config: TrainConfig,
    reward_oracle: RewardOracle,
    params: ScorerParams,
    out_dir,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> TrainResult:
    """Run the full REINFORCE loop; returns the best-on-validation checkpoint."""
    examples = list(examples)
    if not examples:
        raise ValueError("dataset must be non-empty")
    for ex in examples:
        if config.k > ex.context.n:
            raise ValueError(
                f"k={config.k} exceeds the {ex.context.n} records of user {ex.user_id!r}"
            )
    os.makedirs(out_dir, exist_ok=True)

    split_rng = np.random.default_rng([config.seed, 9001])
    order = split_rng.permutation(len(examples))
    n_val = max(1, round(config.validation_fraction * len(examples)))
    if n_val >= len(examples):
        raise ValueError("validation split leaves no training examples")
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]

    params = params.copy()
    adam = AdamState.init_like(params)
    log_path = os.path.join(os.fspath(out_dir), "training_log.jsonl")
    best_val = -math.inf
    best_path = ""
    history = []

    def top_k_for(example: DatasetExample) -> Profile:
        scores = scorer.encode_records(example.context, params)
        return policy.top_k_profile(PLDistribution(scores.scores, config.k))

    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            shuffle = np.random.default_rng([config.seed, 7, epoch])
            epoch_order = [train_idx[int(i)] for i in shuffle.permutation(len(train_idx))]
            epoch_rewards = []
            pre_norms = []
            for batch_idx in _chunks(epoch_order, config.batch_size):
                batch = []
                jobs = []
                per_example = []
                for ei in batch_idx:
                    ex = examples[ei]
                    scores = scorer.encode_records(ex.context, params)
                    dist = PLDistribution(scores.scores, config.k)
                    sample_rng = np.random.default_rng([config.seed, 11, epoch, ei])
                    profiles = policy.sample_profiles(dist, config.samples_per_example, sample_rng)
                    logprobs = [policy.profile_logprob(dist, p) for p in profiles]
                    prompts = [serialize_profile(p, ex.context, template) for p in profiles]
                    per_example.append((ex, profiles, logprobs))
                    jobs += [(ex, p, prompt) for p, prompt in zip(profiles, prompts)]
                rewards = _score_rewards(reward_oracle, jobs, config.reward_parallelism)
                cursor = 0
                for ex, profiles, logprobs in per_example:
                    chunk = rewards[cursor : cursor + config.samples_per_example]
                    cursor += config.samples_per_example
                    epoch_rewards += chunk
                    samples = [
                        RewardSample(profile=p, reward=r, logprob=lp)
                        for p, r, lp in zip(profiles, chunk, logprobs)
                    ]
                    batch.append((ex.context, samples))
                grads = estimate_gradient(params, batch)
                pre_norms.append(global_grad_norm(grads))
                grads = clip_global_norm(grads, config.clip_norm)
                loss_grads = {name: -g for name, g in grads.items()}
                adam_step(params, loss_grads, adam, config)

            val_jobs = []
            for vi in val_idx:
                ex = examples[vi]
                profile = top_k_for(ex)
                val_jobs.append((ex, profile, serialize_profile(profile, ex.context, template)))
            val_rewards = _score_rewards(reward_oracle, val_jobs, config.reward_parallelism)
            val_mean = float(np.mean(val_rewards))

            entry = {
                "epoch": epoch,
                "train_mean_reward": float(np.mean(epoch_rewards)),
                "val_mean_reward": val_mean,
                "grad_norm_pre_clip": float(np.mean(pre_norms)),
                "wall_ms": (time.perf_counter() - epoch_start) * 1000.0,
            }
            history.append(entry)
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()

            if val_mean > best_val:
                best_val = val_mean
                best_path = os.path.join(os.fspath(out_dir), f"checkpoint_epoch_{epoch:03d}.prpl")
                scorer.save_checkpoint(best_path, params)

    return TrainResult(
        best_checkpoint=best_path,
        best_val_reward=best_val,
        log_path=log_path,
        history=history,
    )
