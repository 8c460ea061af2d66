"""
N-way K-shot episodic evaluation of a frozen encoder.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.datasets import Image, LabeledImageSet
from src.encoders import ConvEncoder, extract_features
from src.evaluation import EvalResult, ProbeConfig, classifier_accuracy, confidence_interval, fit_linear_classifier

FeatureFn = Callable[[Sequence[Image]], np.ndarray]


@dataclass
class Episode:
    classes: List[int]
    support_indices: np.ndarray
    support_labels: np.ndarray
    query_indices: np.ndarray
    query_labels: np.ndarray
    support_images: List[Image]
    query_images: List[Image]


@dataclass
class FewShotConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    rounds: int = 100
    lr: float = 0.1
    lr_grid: Tuple[float, ...] = (0.01, 0.1, 1.0)
    seed: int = 0
    workers: int = 0
    image_size: Optional[int] = None
    progress: bool = False


def sample_episode(dataset: LabeledImageSet, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator) -> Episode:
    """
    Samples ways without replacement, then k_shot + n_query distinct items per
    way. Way labels are remapped to 0..n_way-1 in sorted order of the original ids.
    """
    members = dataset.class_indices()
    eligible = sorted(c for c, idx in members.items() if len(idx) >= k_shot + n_query)
    if len(eligible) < n_way:
        raise ValueError(f"Need {n_way} classes with >= {k_shot + n_query} items each; "
                         f"only {len(eligible)} of {len(members)} qualify")

    classes = sorted(int(c) for c in rng.choice(eligible, size=n_way, replace=False))
    support, support_labels, query, query_labels = [], [], [], []
    for way, c in enumerate(classes):
        chosen = rng.choice(members[c], size=k_shot + n_query, replace=False)
        support.extend(chosen[:k_shot])
        query.extend(chosen[k_shot:])
        support_labels.extend([way] * k_shot)
        query_labels.extend([way] * n_query)

    return Episode(
        classes=classes,
        support_indices=np.array(support, dtype=np.int64),
        support_labels=np.array(support_labels, dtype=np.int64),
        query_indices=np.array(query, dtype=np.int64),
        query_labels=np.array(query_labels, dtype=np.int64),
        support_images=[dataset.images[i] for i in support],
        query_images=[dataset.images[i] for i in query],
    )


def _feature_fn(encoder: Union[ConvEncoder, FeatureFn], image_size: Optional[int]) -> FeatureFn:
    if isinstance(encoder, ConvEncoder):
        return lambda images: extract_features(encoder, images, size=image_size)
    return encoder


def _episode_accuracy(features: np.ndarray, episode: Episode, config: FewShotConfig, lr: float) -> float:
    probe = ProbeConfig(epochs=config.rounds, lr=lr, batch_size=None)
    layer = fit_linear_classifier(features[episode.support_indices], episode.support_labels, config.n_way, probe)
    return classifier_accuracy(layer, features[episode.query_indices], episode.query_labels)


def _run_episodes(features: np.ndarray, dataset: LabeledImageSet, n_episodes: int, config: FewShotConfig,
                  lr: float) -> List[float]:
    streams = np.random.SeedSequence(config.seed).spawn(n_episodes)

    def run(stream):
        rng = np.random.default_rng(stream)
        episode = sample_episode(dataset, config.n_way, config.k_shot, config.n_query, rng)
        return _episode_accuracy(features, episode, config, lr)

    if config.workers > 0:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(run, streams))
    return [run(s) for s in tqdm(streams, desc='episodes', disable=not config.progress)]


def few_shot_eval(encoder: Union[ConvEncoder, FeatureFn], dataset: LabeledImageSet, n_episodes: int,
                  config: FewShotConfig = None) -> EvalResult:
    """
    Mean episode accuracy with a 95% half-width.

    Features come from the frozen encoder (or any callable mapping images to a
    feature matrix). Per episode a linear classifier is fitted for
    `config.rounds` full-batch steps on the support set and scored on the query
    set; no normalisation layer is inserted before it.
    """
    if n_episodes < 2:
        raise ValueError(f"few_shot_eval needs at least 2 episodes for an interval, got {n_episodes}")
    config = config or FewShotConfig()
    features = _feature_fn(encoder, config.image_size)(dataset.images)
    accuracies = _run_episodes(features, dataset, n_episodes, config, config.lr)
    result = confidence_interval(accuracies)
    logging.info(f"{config.n_way}-way {config.k_shot}-shot over {n_episodes} episodes: {result}")
    return result


def cross_validate_learning_rate(encoder: Union[ConvEncoder, FeatureFn], validation_set: LabeledImageSet,
                                 config: FewShotConfig, n_episodes: int = 50) -> float:
    """
    Picks the learning rate from config.lr_grid with the best mean episode
    accuracy on validation classes. Ties go to the earlier grid entry.
    """
    features = _feature_fn(encoder, config.image_size)(validation_set.images)
    best_lr, best_accuracy = None, -1.0
    for lr in config.lr_grid:
        accuracy = float(np.mean(_run_episodes(features, validation_set, n_episodes, config, lr)))
        logging.info(f"  -> lr {lr}: validation accuracy {accuracy:.4f}")
        if accuracy > best_accuracy:
            best_lr, best_accuracy = lr, accuracy
    return best_lr


def with_learning_rate(config: FewShotConfig, lr: float) -> FewShotConfig:
    return replace(config, lr=lr)
