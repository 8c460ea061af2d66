"""
Momentum-contrast pretraining loop for the three objectives:
InfoNCE ('moco'), label-filtered InfoNCE ('exemplar') and supervised
cross-entropy ('cross_entropy').
"""
import math
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from config.contrast import CONTRAST_DEFAULTS
from src.augmentations import AugmentationPipeline, augment, make_two_views
from src.datasets import LabeledImageSet
from src.encoders import ConvEncoder, EncoderPair, encode, images_to_tensor, momentum_update
from src.exceptions import NumericAbortError
from src.losses import contrastive_loss, cross_entropy_loss
from src.memory_queue import EmbeddingBatch, MemoryQueue, enqueue
from src.storage import load_checkpoint, save_checkpoint

VARIANTS = ('moco', 'exemplar', 'cross_entropy')
DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass
class ContrastConfig:
    variant: str = 'exemplar'
    tau: float = CONTRAST_DEFAULTS['tau']
    queue_capacity: int = CONTRAST_DEFAULTS['queue_capacity']
    momentum: float = CONTRAST_DEFAULTS['momentum']
    epochs: int = CONTRAST_DEFAULTS['epochs']
    batch_size: int = CONTRAST_DEFAULTS['batch_size']
    lr: float = CONTRAST_DEFAULTS['lr']
    sgd_momentum: float = CONTRAST_DEFAULTS['sgd_momentum']
    weight_decay: float = CONTRAST_DEFAULTS['weight_decay']
    cosine: bool = CONTRAST_DEFAULTS['cosine']
    embedding_dim: int = CONTRAST_DEFAULTS['embedding_dim']
    backbone_channels: Tuple[int, ...] = CONTRAST_DEFAULTS['backbone_channels']
    dtype: str = 'float32'
    loader_workers: int = 0
    progress: bool = False

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown variant '{self.variant}'; expected one of {VARIANTS}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.queue_capacity < 1:
            raise ValueError(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.variant != 'cross_entropy' and self.batch_size > self.queue_capacity:
            raise ValueError(f"batch_size {self.batch_size} exceeds queue_capacity {self.queue_capacity}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got '{self.dtype}'")

    @property
    def contrastive(self) -> bool:
        return self.variant != 'cross_entropy'

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['backbone_channels'] = list(self.backbone_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ContrastConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class TrainState:
    pair: EncoderPair
    queue: MemoryQueue
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    classifier: Optional[nn.Linear] = None
    n_classes: int = 0
    in_channels: int = 3
    epoch: int = 0
    step: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def encoder(self) -> ConvEncoder:
        return self.pair.query


def build_train_state(config: ContrastConfig, n_classes: int, in_channels: int = 3, seed: int = 0) -> TrainState:
    """
    Fresh query/key encoders (key copied from query), an empty queue, and SGD
    over the query encoder (plus the classifier head for cross-entropy).
    """
    torch.manual_seed(seed)
    query = ConvEncoder(in_channels=in_channels, channels=config.backbone_channels,
                        embedding_dim=config.embedding_dim).to(config.torch_dtype)
    pair = EncoderPair.from_query(query, momentum=config.momentum)

    params = list(query.parameters())
    classifier = None
    if config.variant == 'cross_entropy':
        classifier = nn.Linear(query.feature_dim, n_classes).to(config.torch_dtype)
        params += list(classifier.parameters())

    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.sgd_momentum,
                                weight_decay=config.weight_decay)
    queue = MemoryQueue.empty(config.queue_capacity, config.embedding_dim, dtype=config.torch_dtype)
    return TrainState(pair=pair, queue=queue, optimizer=optimizer, rng=np.random.default_rng(seed),
                      classifier=classifier, n_classes=n_classes, in_channels=in_channels)


def cosine_learning_rate(base_lr: float, epoch: int, epochs: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def _make_views(dataset: LabeledImageSet, indices: np.ndarray, seeds: np.ndarray,
                pipeline: AugmentationPipeline, two_views: bool, workers: int):
    def load(item):
        index, seed = item
        rng = np.random.default_rng(int(seed))
        image = dataset.images[int(index)]
        if two_views:
            return make_two_views(image, pipeline, rng)
        return augment(image, pipeline, rng), None

    items = list(zip(indices, seeds))
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(load, items))
    return [load(item) for item in items]


def _batch_loss(state: TrainState, x_q: torch.Tensor, x_k: Optional[torch.Tensor], labels: torch.Tensor,
                config: ContrastConfig) -> Tuple[torch.Tensor, Optional[EmbeddingBatch]]:
    if config.variant == 'cross_entropy':
        logits = state.classifier(state.encoder.pooled(x_q))
        return cross_entropy_loss(logits, labels), None

    q = encode(state.pair.query, x_q)
    with torch.no_grad():
        k = encode(state.pair.key, x_k)
    loss = contrastive_loss(q.vectors, k.vectors, state.queue, labels, config.tau,
                            filter_same_label=config.variant == 'exemplar')
    return loss, k


def train_epoch(state: TrainState, dataset: LabeledImageSet, pipeline: AugmentationPipeline,
                config: ContrastConfig) -> Tuple[TrainState, Dict[str, Any]]:
    """
    One pass over the dataset in ceil(N / batch_size) steps.

    Each step: two views per image, query embeddings with gradient, key
    embeddings without, the variant's loss, an SGD step on the query side,
    then the momentum update and enqueue of the keys with their labels. The
    cross-entropy variant uses one view and leaves the key encoder and queue
    untouched.

    Returns:
        The mutated state and metrics: mean loss, throughput (images/s), steps,
        learning rate and per-step losses.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("Cannot train on an empty dataset")

    lr = cosine_learning_rate(config.lr, state.epoch, config.epochs) if config.cosine else config.lr
    for group in state.optimizer.param_groups:
        group['lr'] = lr

    order = state.rng.permutation(n)
    n_steps = math.ceil(n / config.batch_size)
    dtype = config.torch_dtype
    step_losses = []
    started = time.perf_counter()

    batches = tqdm(range(n_steps), desc=f"epoch {state.epoch + 1}/{config.epochs}", disable=not config.progress)
    for b in batches:
        indices = order[b * config.batch_size:(b + 1) * config.batch_size]
        seeds = state.rng.integers(0, 2 ** 63 - 1, size=len(indices))
        views = _make_views(dataset, indices, seeds, pipeline, config.contrastive, config.loader_workers)
        x_q = images_to_tensor([v[0] for v in views], dtype=dtype)
        x_k = images_to_tensor([v[1] for v in views], dtype=dtype) if config.contrastive else None
        labels = torch.as_tensor(dataset.labels[indices], dtype=torch.long)

        loss, keys = _batch_loss(state, x_q, x_k, labels, config)
        if not torch.isfinite(loss):
            logging.error(f"Non-finite loss {float(loss)} at batch {b} of epoch {state.epoch + 1}")
            raise NumericAbortError(f"Non-finite loss at batch {b} of epoch {state.epoch + 1}", index=b)

        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()

        if config.contrastive:
            momentum_update(state.pair)
            enqueue(state.queue, keys, labels)

        step_losses.append(float(loss))
        state.step += 1

    elapsed = max(time.perf_counter() - started, 1e-9)
    state.epoch += 1
    metrics = {
        'epoch': state.epoch,
        'step': state.step,
        'loss': float(np.mean(step_losses)),
        'lr': lr,
        'steps': n_steps,
        'throughput': n / elapsed,
        'step_losses': step_losses,
    }
    state.history.append({k: v for k, v in metrics.items() if k != 'step_losses'})
    logging.info(f"Epoch {state.epoch}/{config.epochs} [{config.variant}]: loss {metrics['loss']:.4f}, "
                 f"lr {lr:.4g}, {metrics['throughput']:.1f} img/s")
    return state, metrics


def train(state: TrainState, dataset: LabeledImageSet, pipeline: AugmentationPipeline,
          config: ContrastConfig) -> List[Dict[str, Any]]:
    """Runs the remaining epochs up to config.epochs."""
    logging.info(f"--- Pretraining: {config.variant}, tau={config.tau}, K={config.queue_capacity}, "
                 f"{len(dataset)} images, stage {pipeline.stage} ({pipeline.mode}) ---")
    all_metrics = []
    while state.epoch < config.epochs:
        _, metrics = train_epoch(state, dataset, pipeline, config)
        all_metrics.append(metrics)
    return all_metrics


def save_train_state(state: TrainState, config: ContrastConfig, directory: Path) -> Path:
    tensors = {}
    for prefix, module in (('query', state.pair.query), ('key', state.pair.key), ('classifier', state.classifier)):
        if module is None:
            continue
        for name, tensor in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = tensor
    tensors['queue.keys'] = state.queue.keys
    tensors['queue.labels'] = state.queue.labels
    for i, param in enumerate(_optimized_params(state)):
        buffer = state.optimizer.state.get(param, {}).get('momentum_buffer')
        if buffer is not None:
            tensors[f"optimizer.{i}.momentum_buffer"] = buffer

    metadata = {
        'config': config.to_dict(),
        'epoch': state.epoch,
        'step': state.step,
        'n_classes': state.n_classes,
        'in_channels': state.in_channels,
        'queue': {'write_ptr': state.queue.write_ptr, 'filled': state.queue.filled},
        'rng_state': state.rng.bit_generator.state,
        'history': state.history,
    }
    return save_checkpoint(directory, tensors, metadata)


def load_train_state(directory: Path) -> Tuple[TrainState, ContrastConfig]:
    tensors, metadata = load_checkpoint(directory)
    config = ContrastConfig.from_dict(metadata['config'])
    state = build_train_state(config, metadata['n_classes'], metadata['in_channels'])

    for prefix, module in (('query', state.pair.query), ('key', state.pair.key), ('classifier', state.classifier)):
        if module is None:
            continue
        module.load_state_dict({name[len(prefix) + 1:]: tensor for name, tensor in tensors.items()
                                if name.startswith(prefix + '.')})

    state.queue.keys.copy_(tensors['queue.keys'])
    state.queue.labels.copy_(tensors['queue.labels'])
    state.queue.write_ptr = metadata['queue']['write_ptr']
    state.queue.filled = metadata['queue']['filled']

    for i, param in enumerate(_optimized_params(state)):
        name = f"optimizer.{i}.momentum_buffer"
        if name in tensors:
            state.optimizer.state[param]['momentum_buffer'] = tensors[name].clone()

    state.rng.bit_generator.state = metadata['rng_state']
    state.epoch = metadata['epoch']
    state.step = metadata['step']
    state.history = list(metadata.get('history', []))
    return state, config


def _optimized_params(state: TrainState) -> List[torch.nn.Parameter]:
    return [p for group in state.optimizer.param_groups for p in group['params']]
