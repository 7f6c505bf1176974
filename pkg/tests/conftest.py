import numpy as np
import pytest

from purple.core import Context, DatasetExample, Record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_embedded_example(rng, n=4, d=8, user_id="u", tokens_per_record=3, query_tokens=2):
    """Random context with token embeddings attached, for scorer-level tests."""
    records = tuple(
        Record(
            id=f"r{i}",
            input_text=f"in {i}",
            output_text=f"out {i}",
            token_embeddings=rng.standard_normal((tokens_per_record, d)),
        )
        for i in range(n)
    )
    context = Context(
        query_text="query",
        records=records,
        reference="ref",
        query_embeddings=rng.standard_normal((query_tokens, d)),
    )
    return DatasetExample(user_id=user_id, context=context)


@pytest.fixture
def embedded_example(rng):
    return make_embedded_example(rng)
