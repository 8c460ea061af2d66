"""
Contrastive and supervised objectives.

Per-instance losses return the loss together with its analytic gradient with
respect to the query; `contrastive_loss` is the batched, autograd version
used during training.
"""
from typing import Tuple

import torch
import torch.nn.functional as F

from src.memory_queue import MemoryQueue


def l2_normalize(v: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(v)
    if norm == 0:
        raise ValueError("cannot normalize zero vector")
    return v / norm


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"Temperature must be positive, got {tau}")


def _loss_and_grad(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor,
                   tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
    # Row 0 is the positive.
    candidates = torch.cat([k_pos.unsqueeze(0), negatives.to(q.dtype)], dim=0)
    logits = candidates @ q / tau
    loss = torch.logsumexp(logits, dim=0) - logits[0]
    probs = torch.softmax(logits, dim=0)
    grad = (probs @ candidates - k_pos) / tau
    return loss, grad


def infonce_loss(q: torch.Tensor, k_pos: torch.Tensor, queue: MemoryQueue,
                 tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Instance-discrimination loss of one query against its positive key and
    every filled queue entry.

    Returns:
        (loss, d loss / d q). An empty queue gives a zero loss and gradient.
    """
    _check_tau(tau)
    keys, _ = queue.negatives()
    return _loss_and_grad(q, k_pos, keys, tau)


def exemplar_loss(q: torch.Tensor, k_pos: torch.Tensor, queue: MemoryQueue, y_i: int,
                  tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Label-filtered variant: queue entries sharing the query's label are dropped
    from the negatives and are not used as positives either.
    """
    _check_tau(tau)
    keys, labels = queue.negatives()
    keep = labels != int(y_i)
    return _loss_and_grad(q, k_pos, keys[keep], tau)


def contrastive_loss(q: torch.Tensor, k: torch.Tensor, queue: MemoryQueue, labels: torch.Tensor,
                     tau: float, filter_same_label: bool) -> torch.Tensor:
    """
    Mean per-instance loss over a batch of queries (B x d) and their positive
    keys (B x d). With `filter_same_label` the exemplar loss is computed,
    otherwise InfoNCE. Gradients flow into `q` only.
    """
    _check_tau(tau)
    keys, queue_labels = queue.negatives()
    l_pos = (q * k.detach()).sum(dim=1, keepdim=True)
    l_neg = q @ keys.to(q.dtype).T
    if filter_same_label:
        same = labels.reshape(-1, 1) == queue_labels.reshape(1, -1)
        l_neg = l_neg.masked_fill(same, float('-inf'))
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def cross_entropy_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"Labels must lie in [0, {n_classes}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)
