"""Synthetic personalization tasks with known ground truth, plus embedding
providers standing in for a pretrained text encoder.

World construction bakes in the relevance/utility split the trainer must
learn to exploit:

* Topics carry descending weights; each user gets its own topic-to-weight
  permutation.  Queries repeat topic words proportionally to their weight, so
  both the weight order and the dominant topic are readable from text.
* Records cover one primary topic each.  A block of records all covers the
  dominant topic, and records sharing a primary topic conflict pairwise, so
  the query-similarity ranking walks into a redundant, mutually conflicting
  set while the utility optimum mixes one dominant record with complements.
* Because the utility discounts later positions, ordering matters too.

Everything is a pure function of (spec, seed): datasets, worlds, and hash
embeddings reproduce byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    Context,
    DatasetExample,
    DatasetError,
    Profile,
    PromptTemplate,
    Record,
)
from .reward import SyntheticWorld

logger = logging.getLogger(__name__)

TOPIC_WORDS = (
    "alfa", "bravo", "charlie", "delta", "echo", "foxtrot",
    "golf", "hotel", "india", "juliett", "kilo", "lima",
)

# weight ladder for topics ranked 0 (dominant) downward
_WEIGHT_LADDER = (1.0, 0.62, 0.45, 0.3, 0.22, 0.16, 0.12, 0.09, 0.07, 0.05, 0.04, 0.03)


@dataclass(frozen=True)
class WorldSpec:
    """Generation parameters; serialized into the dataset header for provenance."""

    seed: int = 0
    n_records: int = 20
    dims: int = 4
    gamma: float = 0.5
    lam: float = 0.3
    embed_width: int = 32
    noise: float = 0.0

    def __post_init__(self) -> None:
        if self.dims < 2:
            raise ValueError("need at least 2 topic dimensions for complementarity")
        if self.dims > len(TOPIC_WORDS):
            raise ValueError(f"at most {len(TOPIC_WORDS)} topic dimensions supported")
        if self.n_records < self.dims:
            raise ValueError("need at least one record per topic")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.lam < 0 or self.noise < 0:
            raise ValueError("lam and noise must be >= 0")
        if self.embed_width < 8:
            raise ValueError("embedding width must be >= 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "WorldSpec":
        return cls(**obj)


def _coverage_reps(coverage: float) -> int:
    if coverage >= 0.7:
        return 3
    if coverage >= 0.45:
        return 2
    return 1


def _generate_user(
    spec: WorldSpec, user_index: int
) -> tuple[DatasetExample, SyntheticWorld]:
    rng = np.random.default_rng([spec.seed, user_index])
    user_id = f"u{user_index:03d}"
    dims = spec.dims
    n = spec.n_records

    topic_order = rng.permutation(dims)  # topic_order[rank] = topic dimension
    weights = np.zeros(dims)
    for rank, topic in enumerate(topic_order):
        weights[topic] = _WEIGHT_LADDER[rank]
    dominant = int(topic_order[0])

    # record composition: a dominant block, one strong complement per other
    # topic, and weak filler on random non-dominant topics
    n_dominant = max(2, round(0.4 * n))
    primaries = [dominant] * n_dominant
    primaries += [int(t) for t in topic_order[1:]]
    while len(primaries) < n:
        primaries.append(int(topic_order[1 + rng.integers(dims - 1)]))
    primaries = primaries[:n]
    strong_cutoff = n_dominant + (dims - 1)

    coverage = np.zeros((n, dims))
    records = []
    for i, topic in enumerate(primaries):
        strength = rng.uniform(0.85, 1.0) if i < strong_cutoff else rng.uniform(0.25, 0.5)
        coverage[i, topic] = strength
        word = TOPIC_WORDS[topic]
        body = " ".join([word] * _coverage_reps(strength))
        records.append(
            Record(
                id=f"{user_id}-r{i:02d}",
                input_text=f"note {i}: {body}",
                output_text=f"tagged {word}",
            )
        )

    # same-primary-topic records contradict each other pairwise
    conflict = np.zeros((n, n), dtype=np.int8)
    for a in range(n):
        for b in range(a + 1, n):
            if primaries[a] == primaries[b]:
                conflict[a, b] = conflict[b, a] = 1

    order = rng.permutation(n)  # shuffle so the dominant block is not a prefix
    records = [records[i] for i in order]
    # re-key ids to their final position so ids stay positional
    records = [
        Record(id=f"{user_id}-r{pos:02d}", input_text=r.input_text, output_text=r.output_text)
        for pos, r in enumerate(records)
    ]
    coverage = coverage[order]
    conflict = conflict[np.ix_(order, order)]

    query_terms = []
    for rank, topic in enumerate(topic_order):
        query_terms += [TOPIC_WORDS[topic]] * max(0, 3 - rank)
    query = f"{user_id}: looking for " + " ".join(query_terms)
    reference = "recommend " + " ".join(TOPIC_WORDS[t] for t in topic_order[:2])

    world = SyntheticWorld(
        weights=weights,
        coverage=coverage,
        conflict=conflict,
        gamma=spec.gamma,
        lam=spec.lam,
    )
    example = DatasetExample(
        user_id=user_id,
        context=Context(query_text=query, records=tuple(records), reference=reference),
    )
    return example, world


def generate_dataset(
    spec: WorldSpec, users: int
) -> tuple[list[DatasetExample], dict[str, SyntheticWorld]]:
    """Examples plus their paired ground-truth worlds, deterministic in (spec, users)."""
    if users < 1:
        raise ValueError("users must be >= 1")
    examples = []
    worlds = {}
    for u in range(users):
        example, world = _generate_user(spec, u)
        examples.append(example)
        worlds[example.user_id] = world
    return examples, worlds


def dataset_header(spec: WorldSpec, users: int) -> dict:
    return {"world_spec": spec.to_dict(), "users": users}


def save_worlds(path, worlds: Mapping[str, SyntheticWorld]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user_id, world in worlds.items():
            line = {"user_id": user_id, "world": world.to_dict()}
            fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")


def load_worlds(path) -> dict[str, SyntheticWorld]:
    worlds = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                worlds[obj["user_id"]] = SyntheticWorld.from_dict(obj["world"])
    return worlds


def hash_embed(text: str, width: int, table_seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm vector per token; tokens are [a-z0-9] runs, lowercased.

    Empty (or token-free) text yields a single zero row, flagged in the log,
    so downstream pooling still sees a T x d matrix.
    """
    if width < 8:
        raise ValueError("embedding width must be >= 8")
    tokens = _hash_tokens(text)
    if not tokens:
        logger.warning("hash_embed: no tokens in %r; emitting one zero row", text)
        return np.zeros((1, width))
    rows = [_token_vector(tok, width, table_seed) for tok in tokens]
    return np.vstack(rows)


def _hash_tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def _token_vector(token: str, width: int, table_seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{table_seed}|{token}".encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(width)
    return vec / np.linalg.norm(vec)


@dataclass(frozen=True)
class EmbeddingProvider:
    """Token-embedding source: deterministic feature hashing or a sidecar file."""

    mode: str = "hash"
    width: int = 32
    path: str | None = None
    table_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("hash", "file"):
            raise ValueError(f"mode must be 'hash' or 'file', got {self.mode!r}")
        if self.mode == "file" and not self.path:
            raise ValueError("file mode needs a path")

    def attach(self, examples: Sequence[DatasetExample]) -> list[DatasetExample]:
        if self.mode == "file":
            return load_embeddings(self.path, examples)
        return [
            _with_embeddings(
                ex,
                query=hash_embed(ex.context.query_text, self.width, self.table_seed),
                records={
                    r.id: hash_embed(r.input_text + " " + r.output_text, self.width, self.table_seed)
                    for r in ex.context.records
                },
            )
            for ex in examples
        ]


def _with_embeddings(
    example: DatasetExample, query: np.ndarray, records: Mapping[str, np.ndarray]
) -> DatasetExample:
    ctx = example.context
    return DatasetExample(
        user_id=example.user_id,
        context=Context(
            query_text=ctx.query_text,
            records=tuple(r.with_embeddings(records[r.id]) for r in ctx.records),
            reference=ctx.reference,
            query_embeddings=query,
        ),
    )


def query_key(user_id: str) -> str:
    return f"q:{user_id}"


def save_embeddings(path, examples: Sequence[DatasetExample], width: int, table_seed: int = 0) -> None:
    """Hash-embed every record and query into the sidecar JSONL format."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            entries = [(query_key(ex.user_id), hash_embed(ex.context.query_text, width, table_seed))]
            for rec in ex.context.records:
                entries.append(
                    (rec.id, hash_embed(rec.input_text + " " + rec.output_text, width, table_seed))
                )
            for key, matrix in entries:
                line = {"id": key, "vectors": [[float(x) for x in row] for row in matrix]}
                fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")


def load_embeddings(path, examples: Sequence[DatasetExample]) -> list[DatasetExample]:
    """Attach sidecar embeddings; every record id and query key must be present."""
    table: dict[str, np.ndarray] = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            matrix = np.asarray(obj["vectors"], dtype=np.float64)
            if matrix.ndim != 2:
                raise DatasetError(f"{path}:{lineno}: vectors must be a T x d matrix")
            if width is None:
                width = matrix.shape[1]
            elif matrix.shape[1] != width:
                raise DatasetError(
                    f"{path}:{lineno}: embedding width {matrix.shape[1]} != {width} seen earlier"
                )
            table[obj["id"]] = matrix

    missing = []
    for ex in examples:
        if query_key(ex.user_id) not in table:
            missing.append(query_key(ex.user_id))
        missing += [r.id for r in ex.context.records if r.id not in table]
    if missing:
        raise DatasetError(f"embedding file {path} is missing ids: {', '.join(sorted(missing))}")

    return [
        _with_embeddings(
            ex,
            query=table[query_key(ex.user_id)],
            records={r.id: table[r.id] for r in ex.context.records},
        )
        for ex in examples
    ]


class NoisyOracle:
    """Gaussian reward jitter around a base oracle, deterministic per (user, profile)."""

    def __init__(self, base: Callable, sigma: float, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.base = base
        self.sigma = sigma
        self.seed = seed

    def __call__(self, example: DatasetExample, profile: Profile, prompt: str) -> float:
        value = self.base(example, profile, prompt)
        if self.sigma == 0:
            return value
        digest = hashlib.sha256(
            f"{self.seed}|{example.user_id}|{tuple(profile)}".encode("utf-8")
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return value + self.sigma * float(rng.standard_normal())


def make_prompt_reward_fn(
    examples: Sequence[DatasetExample],
    worlds: Mapping[str, SyntheticWorld],
    template: PromptTemplate,
) -> Callable[[str, str], float]:
    """Server-side reward: recover (user, profile) from a rendered prompt and
    return the ground-truth utility — the wire twin of `SyntheticOracle`.

    Assumes the record pattern ends with a newline, as the default template
    does, so the prompt splits into record blocks plus the query suffix.
    """
    from .reward import synthetic_utility

    by_query_suffix = {}
    for ex in examples:
        suffix = template.query_pattern.format(query=ex.context.query_text)
        blocks = {
            template.record_pattern.format(input=r.input_text, output=r.output_text): i
            for i, r in enumerate(ex.context.records)
        }
        by_query_suffix[suffix] = (ex, blocks)

    def reward_fn(prompt: str, reference: str) -> float:
        for suffix, (ex, blocks) in by_query_suffix.items():
            if prompt.endswith(suffix):
                body = prompt[: len(prompt) - len(suffix)]
                indices = []
                while body:
                    for block, idx in blocks.items():
                        if body.startswith(block):
                            indices.append(idx)
                            body = body[len(block):]
                            break
                    else:
                        raise ValueError(f"unparseable record block at: {body[:60]!r}")
                return synthetic_utility(worlds[ex.user_id], Profile(tuple(indices)))
        raise ValueError("prompt does not end with any known query")

    return reward_fn
