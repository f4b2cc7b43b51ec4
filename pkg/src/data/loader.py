"""
Чтение синтетического корпуса, детерминированная нарезка на пакеты
и фоновая подготовка пакетов.
"""

# Стандартные библиотеки
import logging
import os
import queue
import re
import threading
from typing import Iterator, List, Optional, Sequence, Tuple

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.serialization import mten_read
from src.core.tensor import get_dtype
from src.data.augment import augment
from src.data.synthetic import MANIFEST_NAME, STREAM_AUGMENT, STREAM_SHUFFLE, counter_rng
from src.domain.errors import ContractError, FormatError
from src.domain.state import SampleBatch

logger = logging.getLogger(__name__)

PREFETCH_DEPTH = 2

_CLASSES_PATTERN = re.compile(r"classes=(\d+)")


class SegmentationDataset:
    """
    Пары (изображение, метки) из каталога с manifest.txt.

    :param root: Каталог корпуса
    :param indices: Подмножество индексов манифеста (по умолчанию все)
    """

    def __init__(self, root: str, indices: Optional[Sequence[int]] = None):
        self.root = root
        self.pairs, self.num_classes = self._read_manifest(root)
        self.indices = list(range(len(self.pairs))) if indices is None else list(indices)

    @staticmethod
    def _read_manifest(root: str) -> Tuple[List[Tuple[str, str]], Optional[int]]:
        path = os.path.join(root, MANIFEST_NAME)
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        pairs: List[Tuple[str, str]] = []
        num_classes = None
        for line_no, line in enumerate(lines, start=1):
            if line.startswith("#"):
                found = _CLASSES_PATTERN.search(line)
                if found:
                    num_classes = int(found.group(1))
                continue
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path} line {line_no}: expected '<image> <mask>'")
            pairs.append((parts[0], parts[1]))
        return pairs, num_classes

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, position: int) -> Tuple[np.ndarray, np.ndarray]:
        image_path, mask_path = self.pairs[self.indices[position]]
        image = mten_read(os.path.join(self.root, image_path))
        label = mten_read(os.path.join(self.root, mask_path)).astype(np.int64)
        return image, label

    def subset(self, positions: Sequence[int]) -> "SegmentationDataset":
        view = SegmentationDataset.__new__(SegmentationDataset)
        view.root, view.pairs, view.num_classes = self.root, self.pairs, self.num_classes
        view.indices = [self.indices[p] for p in positions]
        return view

    def split(self, val_fraction: float, seed: int) -> Tuple["SegmentationDataset", "SegmentationDataset"]:
        """
        Детерминированное разбиение на обучающую и валидационную части.

        :return: (train, val); при доле 0 валидационная часть пуста
        """
        order = counter_rng(seed, STREAM_SHUFFLE, 0xFFFFFFFF).permutation(len(self))
        held = int(round(len(self) * val_fraction))
        return self.subset(sorted(order[held:])), self.subset(sorted(order[:held]))


def epoch_order(size: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Перестановка примеров эпохи, зависящая только от (seed, epoch)."""
    return counter_rng(shuffle_seed, STREAM_SHUFFLE, epoch).permutation(size)


def batch_iter(dataset: SegmentationDataset, batch_size: int, shuffle_seed: int, epoch: int = 0,
               augment_p: float = 0.0, shuffle: bool = True) -> Iterator[SampleBatch]:
    """
    Пакеты эпохи; последний неполный пакет сохраняется.

    :raises ContractError: Пустой набор или batch_size < 1
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be at least 1, got {batch_size}")
    if len(dataset) == 0:
        raise ContractError("cannot iterate over an empty dataset")
    order = epoch_order(len(dataset), shuffle_seed, epoch) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        positions = [int(p) for p in order[start:start + batch_size]]
        images, labels = [], []
        for position in positions:
            image, label = dataset[position]
            if augment_p > 0.0:
                rng = counter_rng(shuffle_seed, STREAM_AUGMENT + 2 * epoch, dataset.indices[position])
                image, label = augment(image, label, rng, augment_p)
            images.append(image)
            labels.append(label)
        yield SampleBatch(images=np.stack(images).astype(get_dtype()), labels=np.stack(labels),
                          indices=[dataset.indices[p] for p in positions])


def prefetch(batches: Iterator[SampleBatch], depth: int = PREFETCH_DEPTH) -> Iterator[SampleBatch]:
    """
    Готовит пакеты в фоновом потоке через ограниченную очередь.

    Исключения рабочего потока пробрасываются потребителю.
    """
    handoff: "queue.Queue" = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker() -> None:
        try:
            for batch in batches:
                if stop.is_set():
                    return
                handoff.put(batch)
            handoff.put(done)
        except BaseException as e:  # noqa: BLE001
            handoff.put(e)

    thread = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        # Освобождаем место, чтобы рабочий поток не завис на put
        while thread.is_alive():
            try:
                handoff.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)
