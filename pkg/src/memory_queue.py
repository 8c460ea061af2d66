"""
Labeled FIFO memory of key embeddings used as the negative pool.
"""
from dataclasses import dataclass
from typing import Tuple

import torch


def _norm_tolerance(dtype: torch.dtype) -> float:
    return 1e-6 if dtype == torch.float64 else 1e-5


@dataclass
class EmbeddingBatch:
    vectors: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.vectors.dim() != 2:
            raise ValueError(f"Embeddings must be a B x d matrix, got shape {tuple(self.vectors.shape)}")
        if self.normalized and len(self.vectors):
            norms = torch.linalg.vector_norm(self.vectors.detach(), dim=1)
            worst = float((norms - 1).abs().max())
            if worst > _norm_tolerance(self.vectors.dtype):
                raise ValueError(f"Embeddings flagged normalized but a row norm deviates from 1 by {worst:.2e}")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class MemoryQueue:
    keys: torch.Tensor
    labels: torch.Tensor
    write_ptr: int = 0
    filled: int = 0

    @classmethod
    def empty(cls, capacity: int, dim: int, dtype: torch.dtype = torch.float32) -> 'MemoryQueue':
        if capacity < 1:
            raise ValueError(f"Queue capacity must be >= 1, got {capacity}")
        return cls(keys=torch.zeros(capacity, dim, dtype=dtype),
                   labels=torch.full((capacity,), -1, dtype=torch.long))

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    def negatives(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Filled rows only; rows 0..filled-1 are always the occupied ones."""
        return self.keys[:self.filled], self.labels[:self.filled]


def enqueue(queue: MemoryQueue, keys: EmbeddingBatch, labels) -> MemoryQueue:
    """
    Writes a batch at the write pointer, wrapping around and overwriting the
    oldest entries. Labels travel with their keys. Mutates and returns `queue`.
    """
    if not keys.normalized:
        raise ValueError("Queue keys must be L2-normalized")
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    batch = len(keys)
    if batch > queue.capacity:
        raise ValueError(f"Batch of {batch} keys exceeds queue capacity {queue.capacity}")
    if labels.shape[0] != batch:
        raise ValueError(f"Got {batch} keys but {labels.shape[0]} labels")
    if keys.vectors.shape[1] != queue.keys.shape[1]:
        raise ValueError(f"Key dimension {keys.vectors.shape[1]} does not match queue dimension {queue.keys.shape[1]}")

    index = (queue.write_ptr + torch.arange(batch)) % queue.capacity
    queue.keys[index] = keys.vectors.detach().to(queue.keys.dtype)
    queue.labels[index] = labels
    queue.write_ptr = (queue.write_ptr + batch) % queue.capacity
    queue.filled = min(queue.filled + batch, queue.capacity)
    return queue


def queue_contents(queue: MemoryQueue) -> Tuple[torch.Tensor, torch.Tensor]:
    """Keys and labels ordered oldest first."""
    if queue.filled < queue.capacity:
        return queue.negatives()
    order = (queue.write_ptr + torch.arange(queue.capacity)) % queue.capacity
    return queue.keys[order], queue.labels[order]
