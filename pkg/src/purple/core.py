"""Domain types, dataset I/O, and profile-to-prompt rendering.

A dataset is JSONL, one example per line:

    {"user_id": str, "query": str, "reference": str,
     "records": [{"id": str, "input": str, "output": str}]}

An optional first line holding generation provenance (any object with a
"world_spec" key and no "user_id") is skipped by `load_dataset` and readable
via `read_dataset_header`.  Token embeddings travel in a sidecar file, not in
the dataset itself (see `purple.environment`).

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class DatasetError(ValueError):
    """Malformed or invariant-violating dataset content."""


class ProfileError(ValueError):
    """A profile that is invalid for its context."""


def _freeze(matrix: np.ndarray | None, what: str) -> np.ndarray | None:
    if matrix is None:
        return None
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DatasetError(f"{what}: token embeddings must be a T x d matrix with T >= 1, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Record:
    """One user-history item: an input/output text pair, optionally with token embeddings."""

    id: str
    input_text: str
    output_text: str
    token_embeddings: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("record id must be non-empty")
        object.__setattr__(self, "token_embeddings", _freeze(self.token_embeddings, f"record {self.id}"))

    def with_embeddings(self, matrix: np.ndarray) -> "Record":
        return Record(self.id, self.input_text, self.output_text, matrix)


@dataclass(frozen=True)
class Context:
    """A query plus the candidate record set it will be answered against."""

    query_text: str
    records: tuple[Record, ...]
    reference: str = ""
    query_embeddings: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if len(self.records) < 1:
            raise DatasetError("a context needs at least one record")
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DatasetError(f"duplicate record id {rec.id!r} within one context")
            seen.add(rec.id)
        object.__setattr__(self, "query_embeddings", _freeze(self.query_embeddings, "query"))

    @property
    def n(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class Profile:
    """An ordered selection of distinct record indices; order is meaningful."""

    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __getitem__(self, i: int) -> int:
        return self.indices[i]


def validate_profile(profile: Profile | Sequence[int], n: int) -> list[str]:
    """Check distinctness and range; returns a list of violations (empty means ok)."""
    indices = tuple(profile)
    violations = []
    seen: set[int] = set()
    for idx in indices:
        if idx in seen:
            violations.append(f"duplicate index {idx}")
        seen.add(idx)
        if not 0 <= idx < n:
            violations.append(f"index {idx} out of range for {n} records")
    return violations


def require_valid_profile(profile: Profile | Sequence[int], n: int) -> None:
    violations = validate_profile(profile, n)
    if violations:
        raise ProfileError("; ".join(violations))


@dataclass(frozen=True)
class DatasetExample:
    user_id: str
    context: Context

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "query": self.context.query_text,
            "reference": self.context.reference,
            "records": [
                {"id": r.id, "input": r.input_text, "output": r.output_text}
                for r in self.context.records
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetExample":
        try:
            records = tuple(
                Record(id=r["id"], input_text=r["input"], output_text=r["output"])
                for r in obj["records"]
            )
            return cls(
                user_id=obj["user_id"],
                context=Context(
                    query_text=obj["query"],
                    records=records,
                    reference=obj["reference"],
                ),
            )
        except KeyError as exc:
            raise DatasetError(f"missing dataset field {exc.args[0]!r}") from None


def example_to_json(example: DatasetExample) -> str:
    """Canonical single-line serialization; round-trips byte-identically."""
    return json.dumps(example.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _is_header(obj: dict) -> bool:
    return "user_id" not in obj and "world_spec" in obj


def load_dataset(path) -> list[DatasetExample]:
    """Read and validate a JSONL dataset; raises DatasetError with the offending line number."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            if _is_header(obj):
                continue
            try:
                examples.append(DatasetExample.from_dict(obj))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return examples


def read_dataset_header(path) -> dict | None:
    """Provenance header written by the generator, if present."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                return obj if _is_header(obj) else None
    return None


def save_dataset(path, examples: Sequence[DatasetExample], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
        for ex in examples:
            fh.write(example_to_json(ex) + "\n")


@dataclass(frozen=True)
class PromptTemplate:
    """Rendering patterns for one record line and the trailing query line.

    `record_pattern` may use {input} and {output}; `query_pattern` may use {query}.
    """

    record_pattern: str = "- {input} => {output}\n"
    query_pattern: str = "\nQuery: {query}"


DEFAULT_TEMPLATE = PromptTemplate()


def serialize_profile(
    profile: Profile | Sequence[int],
    context: Context,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> str:
    """Render the selected records, in profile order, followed by the query.

    Pure function of its inputs; distinct orderings of the same index set
    always produce distinct strings (each record block is rendered at the
    position its index occupies).
    """
    require_valid_profile(profile, context.n)
    parts = []
    for idx in profile:
        rec = context.records[idx]
        parts.append(template.record_pattern.format(input=rec.input_text, output=rec.output_text))
    parts.append(template.query_pattern.format(query=context.query_text))
    return "".join(parts)
