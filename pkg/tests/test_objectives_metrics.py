"""
Тесты потерь, метрик сегментации и оптимизаторов.
"""

import math

import numpy as np
import pytest

from src.core.tensor import Tensor
from src.domain.config import TrainRecipe
from src.domain.errors import ContractError, DimensionError
from src.training.losses import ce_loss, dice_loss, hybrid_loss, one_hot, probabilities
from src.training.metrics import boundary, confusion_matrix, dsc_metric, hausdorff, per_class_dice, region_metrics
from src.training.optim import OptimState, Optimizer, adamw_step, poly_lr, sgd_step
from src.nn.module import Parameter


def _labels_with_all_classes(rng, num_classes: int = 3) -> np.ndarray:
    labels = rng.integers(0, num_classes, (2, 4, 4))
    labels[0, 0, :num_classes] = np.arange(num_classes)
    return labels


def _hausdorff_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Двойной цикл по граничным пикселям (8-соседство, вне изображения - фон)."""
    def edge(mask):
        points = []
        height, width = mask.shape
        for r in range(height):
            for c in range(width):
                if not mask[r, c]:
                    continue
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if not (0 <= rr < height and 0 <= cc < width) or not mask[rr, cc]:
                            points.append((r, c))
                            break
                    else:
                        continue
                    break
        return points

    pa, pb = edge(a), edge(b)

    def directed(src, dst):
        return max(min(math.dist(p, q) for q in dst) for p in src)

    return max(directed(pa, pb), directed(pb, pa))


class TestDiceLoss:

    def test_perfect_prediction(self, rng):
        labels = _labels_with_all_classes(rng)
        assert dice_loss(Tensor(one_hot(labels, 3)), labels).item() <= 1e-4

    def test_disjoint_masks(self):
        p = np.zeros((1, 1, 2, 4))
        g = np.zeros((1, 1, 2, 4))
        p[0, 0, 0] = 1.0
        g[0, 0, 1] = 1.0
        assert dice_loss(Tensor(p), g).item() == pytest.approx(1.0, abs=1e-9)

    def test_half_overlap(self):
        p = np.zeros((1, 1, 2, 4))
        g = np.zeros((1, 1, 2, 4))
        p[0, 0, 0, :4] = 1.0
        g[0, 0, 0, 2:] = 1.0
        g[0, 0, 1, :2] = 1.0
        assert dice_loss(Tensor(p), g, weights=[1.0]).item() == pytest.approx(0.5, abs=1e-6)

    def test_weights_must_sum_to_one(self, rng):
        labels = _labels_with_all_classes(rng)
        with pytest.raises(ContractError):
            dice_loss(Tensor(one_hot(labels, 3)), labels, weights=[0.5, 0.5, 0.5])

    def test_one_hot_matches_mean_dsc(self, rng):
        labels = _labels_with_all_classes(rng)
        pred = _labels_with_all_classes(np.random.default_rng(7))
        loss = dice_loss(Tensor(one_hot(pred, 3)), labels, eps=1e-12).item()
        scores = []
        for k in range(3):
            p, g = pred == k, labels == k
            scores.append(2.0 * (p & g).sum() / (p.sum() + g.sum()))
        assert 1.0 - loss == pytest.approx(np.mean(scores), abs=1e-9)

    def test_target_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice_loss(Tensor(np.full((1, 2, 4, 4), 0.5)), np.zeros((1, 2, 3, 3)))


class TestCELoss:

    def test_clamped_perfect_prediction(self, rng):
        labels = _labels_with_all_classes(rng)
        assert ce_loss(Tensor(one_hot(labels, 3)), labels).item() <= 2e-6

    def test_uniform_binary(self, rng):
        labels = rng.integers(0, 2, (2, 4, 4))
        assert ce_loss(Tensor(np.full((2, 2, 4, 4), 0.5)), labels).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            ce_loss(Tensor(np.full((1, 2, 2, 2), 0.5)), np.full((1, 2, 2), 2))


class TestHybridLoss:

    @pytest.fixture
    def probs_labels(self, rng):
        return probabilities(Tensor(rng.standard_normal((2, 3, 4, 4)))), _labels_with_all_classes(rng)

    def test_endpoints(self, probs_labels):
        probs, labels = probs_labels
        assert hybrid_loss(probs, labels, 0.0).item() == ce_loss(probs, labels).item()
        assert hybrid_loss(probs, labels, 1.0).item() == dice_loss(probs, labels).item()

    def test_convex_combination(self, probs_labels):
        probs, labels = probs_labels
        dice, ce = dice_loss(probs, labels).item(), ce_loss(probs, labels).item()
        assert hybrid_loss(probs, labels, 0.6).item() == pytest.approx(0.6 * dice + 0.4 * ce, abs=1e-12)

    @pytest.mark.parametrize("weight", [-0.1, 1.5])
    def test_weight_out_of_range(self, probs_labels, weight):
        probs, labels = probs_labels
        with pytest.raises(ContractError):
            hybrid_loss(probs, labels, weight)


class TestDSC:

    def test_identical(self):
        labels = np.array([[0, 1, 1], [2, 2, 0]])
        assert dsc_metric(labels, labels, 3)[1] == 1.0

    def test_disjoint(self):
        pred = np.array([[1, 1, 0, 0]])
        gt = np.array([[0, 0, 1, 1]])
        assert dsc_metric(pred, gt, 2)[1] == 0.0

    def test_counts(self):
        pred = np.zeros((4, 4), dtype=int)
        gt = np.zeros((4, 4), dtype=int)
        pred.reshape(-1)[:6] = 1
        gt.reshape(-1)[3:7] = 1
        assert per_class_dice(pred, gt, 2)[1] == pytest.approx(0.6)

    def test_absent_class_skipped(self):
        pred = np.array([[0, 1]])
        scores, mean = dsc_metric(pred, pred, 3)
        assert math.isnan(scores[2])
        assert mean == 1.0


class TestHausdorff:

    def test_identical_single_pixel(self):
        mask = np.zeros((5, 5), dtype=int)
        mask[2, 2] = 1
        assert hausdorff(mask, mask, 1)["distance"] == 0.0

    def test_pythagorean_pixels(self):
        pred = np.zeros((6, 6), dtype=int)
        gt = np.zeros((6, 6), dtype=int)
        pred[0, 0] = 1
        gt[3, 4] = 1
        assert hausdorff(pred, gt, 1)["distance"] == pytest.approx(5.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_double_loop_oracle(self, seed):
        local = np.random.default_rng(seed)
        a = local.random((16, 16)) < 0.3
        b = local.random((16, 16)) < 0.3
        result = hausdorff(a.astype(int), b.astype(int), 1)
        assert result["distance"] == pytest.approx(_hausdorff_oracle(a, b), abs=1e-12)

    def test_boundary_of_filled_square(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True
        edge = boundary(mask)
        assert edge.sum() == 8 and not edge[2, 2]

    def test_empty_prediction_penalized(self, caplog):
        gt = np.zeros((3, 4), dtype=int)
        gt[1, 1] = 1
        result = hausdorff(np.zeros_like(gt), gt, 1)
        assert result["penalized"]
        assert result["distance"] == pytest.approx(5.0)
        assert "penalized" in caplog.text

    def test_both_empty(self):
        empty = np.zeros((4, 4), dtype=int)
        assert hausdorff(empty, empty, 1) == {"distance": 0.0, "penalized": False}

    def test_hd95_not_above_max(self):
        local = np.random.default_rng(3)
        a = (local.random((16, 16)) < 0.3).astype(int)
        b = (local.random((16, 16)) < 0.3).astype(int)
        assert hausdorff(a, b, 1, 95.0)["distance"] <= hausdorff(a, b, 1)["distance"]


class TestRegionMetrics:

    def test_identical(self):
        labels = np.array([[0, 1], [2, 1]])
        metrics = region_metrics(labels, labels, 3)
        assert metrics == {"miou": 1.0, "accuracy": 1.0, "precision": 1.0, "recall": 1.0}

    def test_binary_confusion(self):
        gt = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).reshape(4, 4)
        pred = np.array([1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).reshape(4, 4)
        metrics = region_metrics(pred, gt, 2)
        assert metrics["precision"] == pytest.approx(0.75)
        assert metrics["recall"] == pytest.approx(0.6)
        assert metrics["miou"] == pytest.approx(0.5)
        assert metrics["accuracy"] == pytest.approx(13 / 16)

    def test_all_background_prediction(self):
        gt = np.array([[0, 1], [1, 0]])
        assert region_metrics(np.zeros_like(gt), gt, 2)["recall"] == 0.0

    def test_confusion_rows_are_ground_truth(self):
        matrix = confusion_matrix(np.array([1, 1]), np.array([0, 1]), 2)
        np.testing.assert_array_equal(matrix, [[0, 1], [0, 1]])


class TestOptimizers:

    def test_sgd_first_step(self):
        w = np.array([1.0])
        sgd_step([w], [np.array([1.0])], OptimState(kind="sgd", lr=0.05, momentum=0.0))
        assert w[0] == pytest.approx(0.95)

    def test_sgd_momentum_decay(self):
        w = np.array([2.0])
        state = OptimState(kind="sgd", lr=0.05, momentum=0.9, slots={0: {"v": np.array([1.0])}})
        sgd_step([w], [np.array([0.0])], state)
        assert w[0] == pytest.approx(2.0 - 0.05 * 0.9)

    def test_sgd_two_steps_unrolled(self):
        lr, mu, wd = 0.1, 0.9, 0.01
        w = np.array([1.5])
        state = OptimState(kind="sgd", lr=lr, momentum=mu, weight_decay=wd)
        grads = [0.4, -0.2]
        expected_w, v = 1.5, 0.0
        for g in grads:
            sgd_step([w], [np.array([g])], state)
            v = mu * v + (g + wd * expected_w)
            expected_w -= lr * v
        assert w[0] == pytest.approx(expected_w, abs=1e-15)
        assert state.step == 2

    def test_adamw_first_step(self):
        w = np.array([0.0])
        adamw_step([w], [np.array([1.0])], OptimState(kind="adamw", lr=3e-4))
        assert w[0] == pytest.approx(-3e-4 / (1.0 + 1e-8), abs=1e-15)

    def test_adamw_decoupled_decay(self):
        lr, wd = 0.01, 0.5
        w = np.array([2.0])
        state = OptimState(kind="adamw", lr=lr, weight_decay=wd)
        for step in range(1, 4):
            adamw_step([w], [np.array([0.0])], state)
            assert w[0] == pytest.approx(2.0 * (1.0 - lr * wd) ** step, rel=1e-12)

    def test_adamw_three_steps_unrolled(self):
        lr, wd, b1, b2, eps = 1e-3, 5e-4, 0.9, 0.999, 1e-8
        w = np.array([0.3])
        state = OptimState(kind="adamw", lr=lr, weight_decay=wd)
        expected, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate([0.5, -1.0, 0.25], start=1):
            adamw_step([w], [np.array([g])], state)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected -= lr * ((m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps) + wd * expected)
        assert w[0] == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            sgd_step([np.zeros(3)], [np.zeros(2)], OptimState(kind="sgd", lr=0.1))

    def test_poly_schedule(self):
        assert poly_lr(0.05, 0, 10) == 0.05
        assert poly_lr(0.05, 5, 10) == pytest.approx(0.05 * 0.5 ** 0.9)

    def test_optimizer_from_recipe(self):
        recipe = TrainRecipe(optimizer="sgd", lr=0.05, momentum=0.0, batch_size=1, epochs=1)
        param = Parameter(np.array([1.0]))
        param.grad = np.array([1.0])
        optimizer = Optimizer([param], OptimState.from_recipe(recipe))
        optimizer.step()
        assert param.data[0] == pytest.approx(0.95)
        optimizer.zero_grad()
        assert not param.has_grad
