"""
Аугментации с сохранением согласованности изображения и разметки.

Каждое преобразование применяется независимо с вероятностью p:
горизонтальное и вертикальное отражение, поворот на k·90°, cutout
(только изображение).
"""

# Стандартные библиотеки
from typing import Tuple

# Сторонние библиотеки
import numpy as np

Sample = Tuple[np.ndarray, np.ndarray]


def hflip(image: np.ndarray, label: np.ndarray) -> Sample:
    return image[:, :, ::-1], label[:, ::-1]


def vflip(image: np.ndarray, label: np.ndarray) -> Sample:
    return image[:, ::-1, :], label[::-1, :]


def rotate90(image: np.ndarray, label: np.ndarray, k: int) -> Sample:
    return np.rot90(image, k, axes=(1, 2)), np.rot90(label, k, axes=(0, 1))


def cutout(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Обнуляет случайный квадрат со стороной H/8..H/4."""
    height, width = image.shape[1:]
    side = int(rng.integers(max(height // 8, 1), max(height // 4, 1) + 1))
    side = min(side, height, width)
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    image = image.copy()
    image[:, top:top + side, left:left + side] = 0.0
    return image


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, p: float = 0.25) -> Sample:
    """
    :param image: 3×H×W
    :param label: H×W
    :param rng: Генератор пары (независимый поток на пример)
    :param p: Вероятность каждого преобразования
    :return: Новая пара (при p=0 - исходные значения)
    """
    if p <= 0.0:
        return image, label
    if rng.random() < p:
        image, label = hflip(image, label)
    if rng.random() < p:
        image, label = vflip(image, label)
    if rng.random() < p:
        # На неквадратной сетке допустим только поворот на 180°
        k = int(rng.integers(1, 4)) if image.shape[1] == image.shape[2] else 2
        image, label = rotate90(image, label, k)
    if rng.random() < p:
        image = cutout(image, rng)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)
