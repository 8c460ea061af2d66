"""
Convolutional backbone, query/key encoder pair and the momentum update.
"""
import copy
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from config.contrast import CONTRAST_DEFAULTS
from src.datasets import Image
from src.memory_queue import EmbeddingBatch


def _group_count(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ConvEncoder(nn.Module):
    """
    Four conv blocks (the first keeps resolution, the rest halve it), global
    average pooling and a two-layer projection head.

    GroupNorm keeps every sample's embedding independent of the rest of its batch.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = CONTRAST_DEFAULTS['backbone_channels'],
                 embedding_dim: int = CONTRAST_DEFAULTS['embedding_dim']):
        super().__init__()
        self.in_channels = in_channels
        self.embedding_dim = embedding_dim
        blocks, previous = [], in_channels
        for i, width in enumerate(channels):
            blocks.append(nn.Sequential(
                nn.Conv2d(previous, width, kernel_size=3, stride=1 if i == 0 else 2, padding=1, bias=False),
                nn.GroupNorm(_group_count(width), width),
                nn.ReLU(inplace=True),
            ))
            previous = width
        self.blocks = nn.ModuleList(blocks)
        self.feature_dim = previous
        self.projection = nn.Sequential(
            nn.Linear(previous, previous),
            nn.ReLU(inplace=True),
            nn.Linear(previous, embedding_dim),
        )

    def block_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return outputs

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        """Last spatial map, before pooling (N x C x h x w)."""
        return self.block_features(x)[-1]

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(F.adaptive_avg_pool2d(self.feature_map(x), 1), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(self.pooled(x))


@dataclass
class EncoderPair:
    query: nn.Module
    key: nn.Module
    momentum: float = CONTRAST_DEFAULTS['momentum']

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"Momentum must be in [0, 1], got {self.momentum}")

    @classmethod
    def from_query(cls, query: nn.Module, momentum: float = CONTRAST_DEFAULTS['momentum']) -> 'EncoderPair':
        """The key encoder starts as an exact copy and never receives gradients."""
        key = copy.deepcopy(query)
        for param in key.parameters():
            param.requires_grad = False
        return cls(query=query, key=key, momentum=momentum)


@torch.no_grad()
def momentum_update(pair: EncoderPair) -> EncoderPair:
    """
    theta_k <- m * theta_k + (1 - m) * theta_q, elementwise, clamped to the
    interval spanned by the old key and query values. Query parameters are
    untouched.
    """
    query_params = list(pair.query.parameters())
    key_params = list(pair.key.parameters())
    if len(query_params) != len(key_params):
        raise ValueError(f"Query has {len(query_params)} parameter tensors, key has {len(key_params)}")
    for p_q, p_k in zip(query_params, key_params):
        if p_q.shape != p_k.shape:
            raise ValueError(f"Parameter shape mismatch: query {tuple(p_q.shape)} vs key {tuple(p_k.shape)}")

    m = pair.momentum
    for p_q, p_k in zip(query_params, key_params):
        updated = p_k * m + p_q * (1.0 - m)
        low = torch.minimum(p_k, p_q)
        high = torch.maximum(p_k, p_q)
        p_k.copy_(torch.minimum(torch.maximum(updated, low), high))
    return pair


def encode(encoder: ConvEncoder, images: torch.Tensor, normalize: bool = True) -> EmbeddingBatch:
    """
    Embeds a batch (N x C x H x W). Rows are L2-normalized when `normalize`.
    """
    if images.dim() != 4 or images.shape[1] != encoder.in_channels:
        raise ValueError(f"Expected a batch of shape N x {encoder.in_channels} x H x W, got {tuple(images.shape)}")
    vectors = encoder(images)
    if normalize:
        vectors = F.normalize(vectors, dim=1)
    return EmbeddingBatch(vectors=vectors, normalized=normalize)


def images_to_tensor(images: Sequence[Image], size: int = None, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stacks images into N x C x H x W, bilinearly resized to size x size when given."""
    tensors = []
    for image in images:
        x = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))
        if size is not None and tuple(x.shape[1:]) != (size, size):
            x = TF.resize(x, [size, size], interpolation=InterpolationMode.BILINEAR, antialias=True)
        tensors.append(x)
    return torch.stack(tensors).to(dtype)


@torch.no_grad()
def extract_features(encoder: ConvEncoder, images: Sequence[Image], batch_size: int = 256,
                     size: int = None) -> np.ndarray:
    """Pooled backbone features (N x feature_dim) of a frozen encoder."""
    dtype = next(encoder.parameters()).dtype
    was_training = encoder.training
    encoder.eval()
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = images_to_tensor(images[start:start + batch_size], size=size, dtype=dtype)
        chunks.append(encoder.pooled(batch).cpu().numpy())
    encoder.train(was_training)
    return np.concatenate(chunks).astype(np.float64)
