"""FIFO memory queue of normalized keys."""

from collections import deque

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.memory_queue import EmbeddingBatch, MemoryQueue, enqueue, queue_contents


def _keys(rng: np.random.Generator, n: int, dim: int) -> EmbeddingBatch:
    vectors = F.normalize(torch.as_tensor(rng.normal(size=(n, dim))), dim=1)
    return EmbeddingBatch(vectors=vectors, normalized=True)


class TestEmbeddingBatch:

    def test_normalized_flag_is_checked(self):
        with pytest.raises(ValueError, match='deviates'):
            EmbeddingBatch(vectors=torch.ones(2, 3, dtype=torch.float64), normalized=True)

    def test_must_be_matrix(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(vectors=torch.ones(3))


def _check_against_fifo(rng: np.random.Generator, trials: int) -> None:
    """Random enqueue sizes against a bounded deque."""
    for _ in range(trials):
        capacity = int(rng.integers(1, 12))
        queue = MemoryQueue.empty(capacity, 4, dtype=torch.float64)
        oracle = deque(maxlen=capacity)
        for _ in range(int(rng.integers(1, 10))):
            batch = int(rng.integers(1, capacity + 1))
            keys = _keys(rng, batch, 4)
            labels = rng.integers(0, 100, size=batch)
            enqueue(queue, keys, labels)
            oracle.extend(zip(keys.vectors, labels))

            contents, content_labels = queue_contents(queue)
            assert queue.filled == len(oracle)
            np.testing.assert_array_equal(contents.numpy(), np.stack([k.numpy() for k, _ in oracle]))
            np.testing.assert_array_equal(content_labels.numpy(), [label for _, label in oracle])


class TestEnqueue:

    def test_starts_empty(self):
        queue = MemoryQueue.empty(4, 3)
        keys, labels = queue.negatives()
        assert keys.shape == (0, 3) and labels.shape == (0,)

    def test_matches_fifo_oracle(self):
        _check_against_fifo(np.random.default_rng(42), trials=50)

    @pytest.mark.slow
    def test_matches_fifo_oracle_over_many_sequences(self):
        _check_against_fifo(np.random.default_rng(43), trials=10_000)

    def test_negatives_are_filled_rows_only(self):
        rng = np.random.default_rng(0)
        queue = MemoryQueue.empty(8, 4, dtype=torch.float64)
        enqueue(queue, _keys(rng, 3, 4), [1, 2, 3])
        keys, labels = queue.negatives()
        assert len(keys) == 3
        np.testing.assert_array_equal(labels.numpy(), [1, 2, 3])

    def test_rejects_unnormalized(self):
        queue = MemoryQueue.empty(4, 2)
        with pytest.raises(ValueError, match='normalized'):
            enqueue(queue, EmbeddingBatch(vectors=torch.ones(1, 2)), [0])

    def test_rejects_batch_larger_than_capacity(self):
        rng = np.random.default_rng(0)
        queue = MemoryQueue.empty(2, 4, dtype=torch.float64)
        with pytest.raises(ValueError, match='capacity'):
            enqueue(queue, _keys(rng, 3, 4), [0, 0, 0])

    def test_rejects_label_count_mismatch(self):
        rng = np.random.default_rng(0)
        queue = MemoryQueue.empty(4, 4, dtype=torch.float64)
        with pytest.raises(ValueError, match='labels'):
            enqueue(queue, _keys(rng, 2, 4), [0])

    def test_rejects_zero_capacity(self):
        with pytest.raises(ValueError):
            MemoryQueue.empty(0, 4)
