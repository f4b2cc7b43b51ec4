"""
Функции потерь сегментации: взвешенный Dice, покомпонентная бинарная
кросс-энтропия и их выпуклая комбинация.

Все потери принимают вероятности (softmax логитов по оси классов)
и метки B×H×W (или готовую one-hot цель B×K×H×W).
"""

# Стандартные библиотеки
from typing import Optional, Sequence

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core import functional as F
from src.core.tensor import Tensor, get_dtype
from src.domain.errors import ContractError, DimensionError

DICE_EPS = 1e-5
PROB_CLAMP = 1e-7
DEFAULT_DICE_WEIGHT = 0.6


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """
    Метки B×H×W -> one-hot B×K×H×W.

    :raises ContractError: Если метка вне [0, K)
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"label ids must lie in [0, {num_classes})")
    classes = np.arange(num_classes).reshape(1, num_classes, *([1] * (labels.ndim - 1)))
    return (labels[:, None] == classes).astype(get_dtype())


def _target(probs: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == probs.ndim:
        target = labels.astype(get_dtype())
    else:
        target = one_hot(labels, probs.shape[1])
    if target.shape != probs.shape:
        raise DimensionError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    return target


def probabilities(logits: Tensor) -> Tensor:
    """Softmax по оси классов."""
    return F.softmax(logits, axis=1)


def dice_loss(probs: Tensor, labels: np.ndarray, weights: Optional[Sequence[float]] = None,
              eps: float = DICE_EPS) -> Tensor:
    """
    L = 1 - Σ_k 2·ω_k·Σ p·g / (Σ p² + Σ g² + ε), суммы по всем пикселям пакета.

    :param probs: Вероятности B×K×H×W
    :param labels: Метки B×H×W или one-hot цель B×K×H×W
    :param weights: Веса классов ω_k (по умолчанию 1/K), сумма должна быть 1
    :raises ContractError: Если сумма весов не равна 1
    """
    classes = probs.shape[1]
    omega = np.full(classes, 1.0 / classes) if weights is None else np.asarray(weights, dtype=float)
    if omega.shape != (classes,):
        raise ContractError(f"expected {classes} class weights, got {omega.size}")
    if abs(omega.sum() - 1.0) > 1e-6:
        raise ContractError(f"class weights must sum to 1, got {omega.sum():.6f}")

    target = _target(probs, labels)
    axes = (0, 2, 3)
    overlap = F.sum(probs * Tensor(target), axis=axes)
    denominator = F.sum(F.square(probs), axis=axes) + Tensor(target.sum(axis=axes) + eps)
    per_class = overlap * Tensor(2.0 * omega) / denominator
    return 1.0 - F.sum(per_class)


def ce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """
    Бинарная кросс-энтропия для каждого канала класса против one-hot цели,
    усреднённая по пикселям и затем по K каналам.
    """
    target = _target(probs, labels)
    p = F.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    positive = Tensor(target) * F.log(p)
    negative = Tensor(1.0 - target) * F.log(1.0 - p)
    return -F.mean(positive + negative)


def hybrid_loss(probs: Tensor, labels: np.ndarray, dice_weight: float = DEFAULT_DICE_WEIGHT,
                weights: Optional[Sequence[float]] = None) -> Tensor:
    """
    λ·Dice + (1 - λ)·CE. При λ = 0 или 1 вычисляется только нужная компонента.

    :raises ContractError: Если λ вне [0, 1]
    """
    if not 0.0 <= dice_weight <= 1.0:
        raise ContractError(f"dice weight must lie in [0, 1], got {dice_weight}")
    if dice_weight == 1.0:
        return dice_loss(probs, labels, weights)
    if dice_weight == 0.0:
        return ce_loss(probs, labels)
    return dice_loss(probs, labels, weights) * dice_weight + ce_loss(probs, labels) * (1.0 - dice_weight)
