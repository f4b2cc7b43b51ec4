"""
Детерминированный синтетический корпус сегментации.

Каждая сцена: шумный фон (0.3 ± σ 0.1) и 1..K-1 непересекающихся фигур
(круги, прямоугольники, эллипсы) разных классов с яркостью, зависящей
от класса. Генератор - счётный Philox, ключ которого зависит только
от (seed, индекс сцены), поэтому сцены генерируются параллельно
и порядок завершения не влияет на результат.

Раскладка каталога: manifest.txt, images/NNNNN.mten, masks/NNNNN.mten.
"""

# Стандартные библиотеки
import asyncio
import logging
import os
from typing import List, Tuple

# Сторонние библиотеки
import aiofiles
import numpy as np

# Модули текущего проекта
from src.core.serialization import mten_encode
from src.domain.errors import ContractError

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 0.3
NOISE_SIGMA = 0.1
SHAPE_ATTEMPTS = 64
MAX_CONCURRENT_WRITES = 16
MANIFEST_NAME = "manifest.txt"

# Номера потоков Philox
STREAM_SCENE = 0
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2


def counter_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """
    Независимый генератор для (seed, поток, индекс).

    :raises ContractError: Если seed не помещается в 64 бита
    """
    if not 0 <= seed < 2 ** 64:
        raise ContractError(f"seed must be a non-negative 64-bit integer, got {seed}")
    key = (seed << 64) | ((stream & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def class_intensity(k: int, num_classes: int) -> np.ndarray:
    """Яркость класса k по трём каналам."""
    level = BACKGROUND_LEVEL + 0.6 * k / (num_classes - 1)
    phases = 2.0 * np.pi * (k / num_classes + np.arange(3) / 3.0)
    return level + 0.05 * np.cos(phases)


def _shape_mask(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = min(height, width)
    rows, cols = np.mgrid[0:height, 0:width]
    kind = rng.integers(3)
    if kind == 0:
        radius = rng.uniform(0.09, 0.2) * base
        cy = rng.uniform(radius, height - radius)
        cx = rng.uniform(radius, width - radius)
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
    if kind == 1:
        side_h = rng.uniform(0.16, 0.36) * base
        side_w = rng.uniform(0.16, 0.36) * base
        top = rng.uniform(0, height - side_h)
        left = rng.uniform(0, width - side_w)
        return (rows >= top) & (rows < top + side_h) & (cols >= left) & (cols < left + side_w)
    semi_y = rng.uniform(0.1, 0.22) * base
    semi_x = rng.uniform(0.1, 0.22) * base
    cy = rng.uniform(semi_y, height - semi_y)
    cx = rng.uniform(semi_x, width - semi_x)
    return ((rows - cy) / semi_y) ** 2 + ((cols - cx) / semi_x) ** 2 <= 1.0


def render_scene(seed: int, index: int, height: int, width: int, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Рисует одну сцену.

    :return: (изображение 3×H×W float32 в [0, 1], метки H×W int64)
    """
    rng = counter_rng(seed, STREAM_SCENE, index)
    count = int(rng.integers(1, num_classes))
    classes = rng.permutation(np.arange(1, num_classes))[:count]

    label = np.zeros((height, width), dtype=np.int64)
    for k in classes:
        for _ in range(SHAPE_ATTEMPTS):
            mask = _shape_mask(rng, height, width)
            if mask.any() and not (mask & (label > 0)).any():
                label[mask] = k
                break

    image = np.full((3, height, width), BACKGROUND_LEVEL)
    for k in classes:
        image[:, label == k] = class_intensity(int(k), num_classes)[:, None]
    image += rng.normal(0.0, NOISE_SIGMA, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def scene_name(index: int) -> str:
    return f"{index:05d}.mten"


async def _write_bytes(path: str, payload: bytes) -> None:
    async with aiofiles.open(path, "wb") as f:
        await f.write(payload)


async def _write_scene(root: str, seed: int, index: int, height: int, width: int, num_classes: int,
                       limit: asyncio.Semaphore) -> None:
    async with limit:
        image, label = render_scene(seed, index, height, width, num_classes)
        name = scene_name(index)
        await _write_bytes(os.path.join(root, "images", name), mten_encode(image))
        await _write_bytes(os.path.join(root, "masks", name), mten_encode(label.astype(np.float32)))


async def generate_async(root: str, seed: int, count: int, height: int, width: int, num_classes: int) -> None:
    """Параллельная генерация сцен и запись манифеста."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    limit = asyncio.Semaphore(MAX_CONCURRENT_WRITES)
    tasks = [_write_scene(root, seed, i, height, width, num_classes, limit) for i in range(count)]
    await asyncio.gather(*tasks)

    lines: List[str] = [f"# mslau synthetic seed={seed} count={count} size={height}x{width} classes={num_classes}"]
    lines += [f"images/{scene_name(i)} masks/{scene_name(i)}" for i in range(count)]
    await _write_bytes(os.path.join(root, MANIFEST_NAME), ("\n".join(lines) + "\n").encode("utf-8"))


def gen_synthetic(seed: int, count: int, height: int, width: int, num_classes: int, root: str) -> str:
    """
    Генерирует корпус в каталоге root.

    :return: Путь к каталогу
    :raises ContractError: K < 2, count < 1 или размеры не кратны 32
    :raises OSError: Каталог недоступен для записи
    """
    if num_classes < 2:
        raise ContractError(f"synthetic scenes need at least 2 classes, got {num_classes}")
    if count < 1:
        raise ContractError(f"scene count must be positive, got {count}")
    if height % 32 or width % 32 or height < 32 or width < 32:
        raise ContractError(f"scene size {height}x{width} must be a positive multiple of 32")
    logger.info(f"▶️ Generating {count} scenes {height}x{width}, K={num_classes}, seed={seed} into {root}")
    asyncio.run(generate_async(root, seed, count, height, width, num_classes))
    logger.info(f"✅ Synthetic corpus ready: {root}")
    return root
