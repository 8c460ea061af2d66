"""
Linear read-off of frozen features and result aggregation.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Z_95 = 1.96


@dataclass(frozen=True)
class EvalResult:
    mean: float
    half_width: float
    n: int

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError(f"half_width must be >= 0, got {self.half_width}")

    def __str__(self) -> str:
        return f"{self.mean:.4f} ± {self.half_width:.4f} (n={self.n})"


def confidence_interval(samples: Sequence[float]) -> EvalResult:
    """Mean and normal-approximation 95% half-width, z * s / sqrt(n)."""
    values = np.asarray(samples, dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"confidence_interval needs at least 2 samples, got {values.size}")
    half_width = Z_95 * values.std(ddof=1) / np.sqrt(values.size)
    return EvalResult(mean=float(values.mean()), half_width=float(half_width), n=int(values.size))


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: Optional[int] = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or not self.lr > 0:
            raise ValueError(f"Probe needs epochs >= 1 and lr > 0, got {self.epochs}, {self.lr}")


def fit_linear_classifier(features: np.ndarray, labels: np.ndarray, n_classes: int,
                          config: ProbeConfig) -> nn.Linear:
    """
    Trains a zero-initialised linear layer with softmax cross-entropy and SGD.
    `batch_size=None` means full-batch steps, one per epoch.
    """
    x = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    layer = nn.Linear(x.shape[1], n_classes).double()
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    optimizer = torch.optim.SGD(layer.parameters(), lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)

    rng = np.random.default_rng(config.seed)
    batch_size = config.batch_size or len(x)
    for _ in range(config.epochs):
        order = rng.permutation(len(x)) if batch_size < len(x) else np.arange(len(x))
        for start in range(0, len(x), batch_size):
            idx = torch.as_tensor(order[start:start + batch_size])
            loss = F.cross_entropy(layer(x[idx]), y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return layer


@torch.no_grad()
def classifier_accuracy(layer: nn.Linear, features: np.ndarray, labels: np.ndarray) -> float:
    x = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    predictions = layer(x).argmax(dim=1).numpy()
    return float(np.mean(predictions == np.asarray(labels)))


def linear_probe(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray,
                 test_labels: np.ndarray, config: ProbeConfig = None) -> float:
    """
    Fits a single linear classifier on frozen training features and reports
    test accuracy in [0, 1].
    """
    config = config or ProbeConfig()
    train_feats, test_feats = np.asarray(train_feats), np.asarray(test_feats)
    if len(train_feats) == 0 or len(test_feats) == 0:
        raise ValueError("Linear probe needs non-empty train and test splits")
    if train_feats.ndim != 2 or test_feats.ndim != 2 or train_feats.shape[1] != test_feats.shape[1]:
        raise ValueError(f"Feature dimension mismatch: train {train_feats.shape}, test {test_feats.shape}")
    if len(train_feats) != len(train_labels) or len(test_feats) != len(test_labels):
        raise ValueError("Each split needs one label per feature row")

    n_classes = int(max(np.max(train_labels), np.max(test_labels))) + 1
    layer = fit_linear_classifier(train_feats, train_labels, n_classes, config)
    accuracy = classifier_accuracy(layer, test_feats, test_labels)
    logging.info(f"Linear probe: {len(train_feats)} train / {len(test_feats)} test, accuracy {accuracy:.4f}")
    return accuracy
