"""Episodic N-way K-shot evaluation."""

import numpy as np
import pytest
from scipy import stats

from src.datasets import LabeledImageSet
from src.few_shot import FewShotConfig, cross_validate_learning_rate, few_shot_eval, sample_episode
from tests.conftest import random_image


def _noise_dataset(n_classes: int, per_class: int, seed: int = 0, size: int = 8) -> LabeledImageSet:
    rng = np.random.default_rng(seed)
    images = [random_image(rng, size=size, source=f'noise_{i}') for i in range(n_classes * per_class)]
    return LabeledImageSet(images=images, labels=np.repeat(np.arange(n_classes), per_class))


def _one_hot_features(dataset: LabeledImageSet):
    """Feature function that leaks the true class."""
    return lambda images: np.eye(dataset.num_classes)[dataset.labels]


class TestSampleEpisode:

    def test_counts_and_labels(self):
        dataset = _noise_dataset(10, 8)
        episode = sample_episode(dataset, n_way=5, k_shot=2, n_query=3, rng=np.random.default_rng(0))
        assert len(episode.classes) == 5 and episode.classes == sorted(episode.classes)
        assert len(episode.support_indices) == 10 and len(episode.query_indices) == 15
        np.testing.assert_array_equal(np.bincount(episode.support_labels), [2] * 5)
        np.testing.assert_array_equal(np.bincount(episode.query_labels), [3] * 5)
        assert not set(episode.support_indices) & set(episode.query_indices)
        for way, c in enumerate(episode.classes):
            assert np.all(dataset.labels[episode.support_indices[episode.support_labels == way]] == c)
            assert np.all(dataset.labels[episode.query_indices[episode.query_labels == way]] == c)

    def test_same_rng_same_episode(self):
        dataset = _noise_dataset(10, 8)
        a = sample_episode(dataset, 5, 1, 4, np.random.default_rng(9))
        b = sample_episode(dataset, 5, 1, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(a.support_indices, b.support_indices)
        np.testing.assert_array_equal(a.query_indices, b.query_indices)

    def test_too_few_eligible_classes(self):
        dataset = _noise_dataset(4, 8)
        with pytest.raises(ValueError, match='classes'):
            sample_episode(dataset, 5, 1, 4, np.random.default_rng(0))

    def test_small_classes_are_not_eligible(self):
        dataset = _noise_dataset(6, 3)
        with pytest.raises(ValueError, match='qualify'):
            sample_episode(dataset, 5, 1, 3, np.random.default_rng(0))


class TestFewShotEval:

    def test_oracle_features_are_perfect(self):
        dataset = _noise_dataset(10, 8)
        config = FewShotConfig(n_way=5, k_shot=1, n_query=3, rounds=20)
        result = few_shot_eval(_one_hot_features(dataset), dataset, 10, config)
        assert result.mean == 1.0
        assert result.half_width == pytest.approx(0.0, abs=1e-12)
        assert result.n == 10

    @pytest.mark.parametrize('n_episodes', [0, 1])
    def test_rejects_fewer_than_two_episodes(self, n_episodes):
        dataset = _noise_dataset(10, 8)
        with pytest.raises(ValueError, match='at least 2 episodes'):
            few_shot_eval(_one_hot_features(dataset), dataset, n_episodes, FewShotConfig(n_query=3))

    def test_random_encoder_on_noise_is_at_chance(self, small_encoder):
        dataset = _noise_dataset(10, 30, seed=1, size=16)
        config = FewShotConfig(n_way=5, k_shot=1, n_query=5, rounds=50)
        result = few_shot_eval(small_encoder, dataset, 60, config)
        standard_error = result.half_width / 1.96
        assert abs(result.mean - 0.2) <= 4 * standard_error

    @pytest.mark.slow
    def test_random_encoder_inside_binomial_band(self, small_encoder):
        dataset = _noise_dataset(10, 30, seed=2, size=16)
        config = FewShotConfig(n_way=5, k_shot=1, n_query=5, rounds=50, seed=1)
        result = few_shot_eval(small_encoder, dataset, 200, config)
        n_queries = 200 * config.n_way * config.n_query
        low, high = stats.binom.interval(0.99, n_queries, 0.2)
        assert low / n_queries <= result.mean <= high / n_queries

    def test_deterministic_and_worker_independent(self, small_encoder):
        dataset = _noise_dataset(8, 6, size=16)
        serial = few_shot_eval(small_encoder, dataset, 6, FewShotConfig(n_query=3, rounds=10, seed=4))
        again = few_shot_eval(small_encoder, dataset, 6, FewShotConfig(n_query=3, rounds=10, seed=4))
        threaded = few_shot_eval(small_encoder, dataset, 6, FewShotConfig(n_query=3, rounds=10, seed=4, workers=3))
        assert serial == again == threaded

    def test_learning_rate_ties_go_to_first(self):
        dataset = _noise_dataset(10, 8)
        config = FewShotConfig(n_way=5, n_query=3, rounds=20, lr_grid=(0.5, 0.1, 1.0))
        assert cross_validate_learning_rate(_one_hot_features(dataset), dataset, config, n_episodes=5) == 0.5
