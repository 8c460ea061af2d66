"""Pretraining loop, variants and resumable checkpoints."""

import numpy as np
import pytest
import torch

from src.augmentations import pipeline_stage
from src.exceptions import NumericAbortError
from src.trainer import (ContrastConfig, build_train_state, cosine_learning_rate, load_train_state,
                         save_train_state, train, train_epoch)
from tests.conftest import SMALL_CHANNELS


def _config(**overrides) -> ContrastConfig:
    values = dict(variant='moco', tau=0.1, queue_capacity=32, momentum=0.9, epochs=1, batch_size=8, lr=0.05,
                  embedding_dim=16, backbone_channels=SMALL_CHANNELS, dtype='float64')
    values.update(overrides)
    return ContrastConfig(**values)


def _pipeline():
    return pipeline_stage(5, output_size=16)


def _run(dataset, config, seed=0):
    state = build_train_state(config, dataset.num_classes, seed=seed)
    metrics = train(state, dataset, _pipeline(), config)
    return state, metrics


class TestContrastConfig:

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match='variant'):
            _config(variant='simclr')

    def test_batch_larger_than_queue(self):
        with pytest.raises(ValueError, match='queue_capacity'):
            _config(batch_size=64, queue_capacity=32)

    def test_cross_entropy_ignores_queue_bound(self):
        assert _config(variant='cross_entropy', batch_size=64, queue_capacity=32).batch_size == 64

    def test_dict_round_trip(self):
        config = _config(tau=0.2)
        assert ContrastConfig.from_dict(config.to_dict()) == config


class TestTraining:

    def test_epoch_metrics(self, small_dataset):
        state, metrics = _run(small_dataset, _config(epochs=2))
        assert [m['epoch'] for m in metrics] == [1, 2]
        assert all(m['steps'] == 4 for m in metrics)
        assert state.step == 8
        assert all(np.isfinite(m['loss']) for m in metrics)
        assert state.queue.filled == 32

    def test_queue_grows_by_batch(self, small_dataset):
        config = _config(queue_capacity=64)
        state = build_train_state(config, small_dataset.num_classes)
        train_epoch(state, small_dataset, _pipeline(), config)
        assert state.queue.filled == len(small_dataset)
        _, labels = state.queue.negatives()
        np.testing.assert_array_equal(np.sort(labels.numpy()), np.sort(small_dataset.labels))

    def test_same_seed_same_losses(self, small_dataset):
        _, a = _run(small_dataset, _config())
        _, b = _run(small_dataset, _config())
        assert a[0]['step_losses'] == b[0]['step_losses']

    def test_exemplar_equals_moco_with_unique_labels(self, unique_label_dataset):
        """With no label shared in the queue the filtered loss is InfoNCE, step for step."""
        moco_state, moco = _run(unique_label_dataset, _config(variant='moco'))
        exemplar_state, exemplar = _run(unique_label_dataset, _config(variant='exemplar'))
        assert moco[0]['step_losses'] == exemplar[0]['step_losses']
        for p, q in zip(moco_state.encoder.parameters(), exemplar_state.encoder.parameters()):
            assert torch.equal(p, q)

    def test_cross_entropy_leaves_key_and_queue(self, small_dataset):
        state, metrics = _run(small_dataset, _config(variant='cross_entropy'))
        assert state.queue.filled == 0
        assert state.classifier is not None
        for p in state.pair.key.parameters():
            assert not p.requires_grad
        assert np.isfinite(metrics[0]['loss'])

    def test_non_finite_loss_aborts(self, small_dataset, monkeypatch):
        monkeypatch.setattr('src.trainer.contrastive_loss',
                            lambda *args, **kwargs: torch.tensor(float('nan'), requires_grad=True))
        state = build_train_state(_config(), small_dataset.num_classes)
        with pytest.raises(NumericAbortError) as error:
            train_epoch(state, small_dataset, _pipeline(), _config())
        assert error.value.index == 0

    def test_empty_dataset(self, small_dataset):
        state = build_train_state(_config(), small_dataset.num_classes)
        with pytest.raises(ValueError, match='empty'):
            train_epoch(state, small_dataset.subset([]), _pipeline(), _config())

    def test_cosine_schedule(self):
        assert cosine_learning_rate(0.1, 0, 10) == pytest.approx(0.1)
        assert cosine_learning_rate(0.1, 5, 10) == pytest.approx(0.05)


class TestCheckpointResume:

    def test_resume_matches_uninterrupted_run(self, small_dataset, tmp_path):
        config = _config(epochs=2)
        straight, straight_metrics = _run(small_dataset, config)

        first = build_train_state(config, small_dataset.num_classes)
        train_epoch(first, small_dataset, _pipeline(), config)
        save_train_state(first, config, tmp_path / 'checkpoint')
        resumed, loaded_config = load_train_state(tmp_path / 'checkpoint')
        assert loaded_config == config
        assert resumed.epoch == 1
        _, metrics = train_epoch(resumed, small_dataset, _pipeline(), loaded_config)

        assert metrics['step_losses'] == straight_metrics[1]['step_losses']
        for p, q in zip(resumed.encoder.parameters(), straight.encoder.parameters()):
            assert torch.equal(p, q)
        assert torch.equal(resumed.queue.keys, straight.queue.keys)

    def test_cross_entropy_round_trip(self, small_dataset, tmp_path):
        config = _config(variant='cross_entropy')
        state, _ = _run(small_dataset, config)
        save_train_state(state, config, tmp_path / 'ce')
        loaded, _ = load_train_state(tmp_path / 'ce')
        assert torch.equal(loaded.classifier.weight, state.classifier.weight)
        assert loaded.history == state.history
