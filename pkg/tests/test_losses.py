"""InfoNCE, the label-filtered exemplar loss and cross-entropy."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.losses import contrastive_loss, cross_entropy_loss, exemplar_loss, infonce_loss, l2_normalize
from src.memory_queue import EmbeddingBatch, MemoryQueue, enqueue


def _unit(rng: np.random.Generator, *shape) -> torch.Tensor:
    return F.normalize(torch.as_tensor(rng.normal(size=shape)), dim=-1)


def _queue(rng: np.random.Generator, n: int, dim: int, labels) -> MemoryQueue:
    queue = MemoryQueue.empty(max(n, 1), dim, dtype=torch.float64)
    if n:
        enqueue(queue, EmbeddingBatch(vectors=_unit(rng, n, dim), normalized=True), labels)
    return queue


def _explicit_queue(keys, labels) -> MemoryQueue:
    keys = torch.as_tensor(keys, dtype=torch.float64)
    queue = MemoryQueue.empty(len(keys), keys.shape[1], dtype=torch.float64)
    enqueue(queue, EmbeddingBatch(vectors=keys, normalized=True), labels)
    return queue


def _random_instance(rng: np.random.Generator):
    dim = int(rng.integers(2, 17))
    n = int(rng.integers(0, 21))
    return dim, n, float(rng.uniform(0.05, 1.0))


class TestInfoNCE:

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        q, k = _unit(rng, 8), _unit(rng, 8)
        queue = _queue(rng, 5, 8, list(range(5)))
        tau = 0.2
        negatives = queue.negatives()[0]
        expected = -torch.log(torch.exp(q @ k / tau) /
                              (torch.exp(q @ k / tau) + torch.exp(negatives @ q / tau).sum()))
        loss, _ = infonce_loss(q, k, queue, tau)
        assert abs(float(loss) - float(expected)) <= 1e-12

    def test_empty_queue_gives_zero(self):
        rng = np.random.default_rng(1)
        q, k = _unit(rng, 8), _unit(rng, 8)
        loss, grad = infonce_loss(q, k, MemoryQueue.empty(4, 8, dtype=torch.float64), 0.07)
        assert float(loss) == 0.0
        np.testing.assert_allclose(grad.numpy(), 0.0, atol=1e-12)

    def test_gradient_matches_autograd(self):
        rng = np.random.default_rng(2)
        q = _unit(rng, 16).requires_grad_(True)
        k = _unit(rng, 16)
        queue = _queue(rng, 10, 16, list(range(10)))
        loss, grad = infonce_loss(q, k, queue, 0.1)
        (autograd,) = torch.autograd.grad(loss, q)
        np.testing.assert_allclose(grad.detach().numpy(), autograd.numpy(), atol=1e-10)

    @pytest.mark.parametrize('tau', [0.0, -0.1])
    def test_non_positive_tau_rejected(self, tau):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match='Temperature'):
            infonce_loss(_unit(rng, 4), _unit(rng, 4), MemoryQueue.empty(2, 4), tau)


class TestExemplarLoss:

    def test_reduces_to_infonce_without_shared_labels(self):
        rng = np.random.default_rng(4)
        q, k = _unit(rng, 8), _unit(rng, 8)
        queue = _queue(rng, 6, 8, [10, 11, 12, 13, 14, 15])
        exemplar, _ = exemplar_loss(q, k, queue, y_i=3, tau=0.1)
        infonce, _ = infonce_loss(q, k, queue, 0.1)
        assert abs(float(exemplar) - float(infonce)) <= 1e-9

    def test_all_same_label_gives_zero(self):
        """Every negative is filtered, leaving only the positive."""
        rng = np.random.default_rng(5)
        q, k = _unit(rng, 8), _unit(rng, 8)
        queue = _queue(rng, 6, 8, [2] * 6)
        loss, grad = exemplar_loss(q, k, queue, y_i=2, tau=0.1)
        assert float(loss) == 0.0
        np.testing.assert_allclose(grad.numpy(), 0.0, atol=1e-12)

    def test_filtered_entries_do_not_affect_loss(self):
        rng = np.random.default_rng(6)
        q, k = _unit(rng, 8), _unit(rng, 8)
        queue = _queue(rng, 6, 8, [1, 2, 1, 3, 1, 4])
        full, _ = exemplar_loss(q, k, queue, y_i=1, tau=0.1)
        keys, labels = queue.negatives()
        keep = labels != 1
        reduced = MemoryQueue.empty(3, 8, dtype=torch.float64)
        enqueue(reduced, EmbeddingBatch(keys[keep], normalized=True), labels[keep])
        expected, _ = infonce_loss(q, k, reduced, 0.1)
        assert abs(float(full) - float(expected)) <= 1e-12


class TestBatchedLoss:

    def test_matches_per_instance_mean(self):
        rng = np.random.default_rng(7)
        q, k = _unit(rng, 4, 8), _unit(rng, 4, 8)
        labels = torch.tensor([0, 1, 2, 3])
        queue = _queue(rng, 6, 8, [0, 1, 5, 6, 7, 8])
        for filter_same_label in (False, True):
            batched = contrastive_loss(q, k, queue, labels, 0.1, filter_same_label)
            if filter_same_label:
                singles = [exemplar_loss(q[i], k[i], queue, int(labels[i]), 0.1)[0] for i in range(4)]
            else:
                singles = [infonce_loss(q[i], k[i], queue, 0.1)[0] for i in range(4)]
            assert abs(float(batched) - float(torch.stack(singles).mean())) <= 1e-12

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        k = _unit(rng, 3, 6)
        labels = torch.tensor([0, 1, 2])
        queue = _queue(rng, 5, 6, [0, 3, 4, 1, 5])
        q = torch.as_tensor(rng.normal(size=(3, 6))).requires_grad_(True)
        for filter_same_label in (False, True):
            assert torch.autograd.gradcheck(
                lambda x: contrastive_loss(x, k, queue, labels, 0.2, filter_same_label), (q,))

    def test_key_receives_no_gradient(self):
        rng = np.random.default_rng(9)
        q = _unit(rng, 2, 4).requires_grad_(True)
        k = _unit(rng, 2, 4).requires_grad_(True)
        loss = contrastive_loss(q, k, _queue(rng, 3, 4, [5, 6, 7]), torch.tensor([0, 1]), 0.1, False)
        loss.backward()
        assert k.grad is None


class TestCrossEntropy:

    def test_uniform_logits(self):
        loss = cross_entropy_loss(torch.zeros(3, 5, dtype=torch.float64), [0, 1, 4])
        assert abs(float(loss) - np.log(5)) <= 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match='Labels'):
            cross_entropy_loss(torch.zeros(2, 3), [0, 3])


class TestNormalize:

    def test_unit_norm(self):
        v = l2_normalize(torch.tensor([3.0, 4.0], dtype=torch.float64))
        np.testing.assert_allclose(v.numpy(), [0.6, 0.8], atol=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ValueError, match='zero vector'):
            l2_normalize(torch.zeros(3))


class TestWorkedExamples:

    @pytest.mark.parametrize('tau', [0.07, 0.5, 3.0])
    def test_equal_negative_gives_ln2(self, tau):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss, _ = infonce_loss(q, q.clone(), _explicit_queue([[1.0, 0.0]], [0]), tau)
        assert float(loss) == pytest.approx(np.log(2), abs=1e-12)

    def test_orthogonal_negative(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss, _ = infonce_loss(q, q.clone(), _explicit_queue([[0.0, 1.0]], [0]), 1.0)
        assert float(loss) == pytest.approx(0.31326, abs=1e-5)
        assert float(loss) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)

    def test_exemplar_filters_same_label_key(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        queue = _explicit_queue([[0.0, 1.0], [-1.0, 0.0]], [7, 8])
        loss, _ = exemplar_loss(q, q.clone(), queue, y_i=7, tau=1.0)
        assert float(loss) == pytest.approx(0.12693, abs=1e-5)
        assert float(loss) == pytest.approx(-np.log(np.e / (np.e + np.exp(-1.0))), abs=1e-12)

    def test_cross_entropy_two_logits(self):
        loss = cross_entropy_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0])
        assert float(loss) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)


class TestLossProperties:

    def test_reduction_without_shared_labels(self):
        """Exemplar equals InfoNCE whenever no queue label matches the query's."""
        rng = np.random.default_rng(100)
        for _ in range(1000):
            dim, n, tau = _random_instance(rng)
            q, k = _unit(rng, dim), _unit(rng, dim)
            queue = _queue(rng, n, dim, rng.integers(1, 50, size=n).tolist())
            exemplar, _ = exemplar_loss(q, k, queue, y_i=0, tau=tau)
            infonce, _ = infonce_loss(q, k, queue, tau)
            assert abs(float(exemplar) - float(infonce)) <= 1e-9

    def test_nullity_when_every_label_matches(self):
        rng = np.random.default_rng(101)
        for _ in range(1000):
            dim, n, tau = _random_instance(rng)
            label = int(rng.integers(0, 10))
            queue = _queue(rng, n, dim, [label] * n)
            loss, _ = exemplar_loss(_unit(rng, dim), _unit(rng, dim), queue, y_i=label, tau=tau)
            assert float(loss) == 0.0

    def test_losses_are_non_negative(self):
        rng = np.random.default_rng(102)
        for _ in range(200):
            dim, n, tau = _random_instance(rng)
            q, k = _unit(rng, dim), _unit(rng, dim)
            queue = _queue(rng, n, dim, rng.integers(0, 3, size=n).tolist())
            assert float(infonce_loss(q, k, queue, tau)[0]) >= 0.0
            assert float(exemplar_loss(q, k, queue, 1, tau)[0]) >= 0.0

    def test_queue_row_order_does_not_matter(self):
        rng = np.random.default_rng(103)
        for _ in range(200):
            dim, tau = int(rng.integers(2, 17)), float(rng.uniform(0.05, 1.0))
            n = int(rng.integers(1, 21))
            q, k = _unit(rng, dim), _unit(rng, dim)
            keys = _unit(rng, n, dim)
            labels = rng.integers(0, 4, size=n)
            order = rng.permutation(n)
            original = _explicit_queue(keys, labels.tolist())
            shuffled = _explicit_queue(keys[order], labels[order].tolist())
            for loss_fn in (lambda queue: infonce_loss(q, k, queue, tau),
                            lambda queue: exemplar_loss(q, k, queue, 2, tau)):
                assert abs(float(loss_fn(original)[0]) - float(loss_fn(shuffled)[0])) <= 1e-9

    def test_closer_negative_raises_infonce(self):
        rng = np.random.default_rng(104)
        for _ in range(200):
            dim, tau = int(rng.integers(2, 17)), float(rng.uniform(0.05, 1.0))
            n = int(rng.integers(1, 21))
            q, k = _unit(rng, dim), _unit(rng, dim)
            keys = _unit(rng, n, dim)
            j = int(rng.integers(0, n))
            moved = keys.clone()
            moved[j] = F.normalize(keys[j] + 0.5 * q, dim=0)
            assert float(moved[j] @ q) > float(keys[j] @ q)
            before, _ = infonce_loss(q, k, _explicit_queue(keys, [0] * n), tau)
            after, _ = infonce_loss(q, k, _explicit_queue(moved, [0] * n), tau)
            assert float(after) > float(before)

    @pytest.mark.parametrize('filtered', [False, True])
    def test_gradient_matches_central_differences(self, filtered):
        rng = np.random.default_rng(105)
        h = 1e-5
        for _ in range(100):
            dim, n = int(rng.integers(2, 9)), int(rng.integers(1, 11))
            tau = float(rng.uniform(0.2, 1.0))
            q, k = _unit(rng, dim), _unit(rng, dim)
            queue = _queue(rng, n, dim, rng.integers(0, 3, size=n).tolist())

            def loss_at(x):
                if filtered:
                    return float(exemplar_loss(x, k, queue, 1, tau)[0])
                return float(infonce_loss(x, k, queue, tau)[0])

            _, analytic = exemplar_loss(q, k, queue, 1, tau) if filtered else infonce_loss(q, k, queue, tau)
            numeric = np.array([(loss_at(q + h * e) - loss_at(q - h * e)) / (2 * h)
                                for e in torch.eye(dim, dtype=torch.float64)])
            error = np.linalg.norm(analytic.numpy() - numeric)
            assert error <= max(1e-4 * np.linalg.norm(numeric), 1e-9)
