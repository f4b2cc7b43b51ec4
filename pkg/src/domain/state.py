"""
Модель данных MSLAU-Net.

Определяет структуры, передаваемые между слоями сети, загрузчиком данных,
циклом обучения и отчётами. Все TypedDict классы используются для строгой
типизации данных в пайплайне.
"""

# Стандартные библиотеки
from typing import Dict, List, Optional, Tuple, TypedDict

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.tensor import Tensor


class AttentionMap(TypedDict):
    """
    Строка неявной матрицы внимания φ_q(Q)·φ_k(K)ᵀ для одного запроса.

    :param query_index: Индекс токена-запроса n
    :param scores: Веса по всем N токенам (неотрицательны, сумма 1)
    :param grid: Пространственная форма (H, W) строки; (0, 0) - форма неизвестна
    """
    query_index: int
    scores: np.ndarray
    grid: Tuple[int, int]


class EncoderOutputs(TypedDict):
    """
    Пирамида признаков энкодера.

    s1..s4 - карты B×Ci×H/4..H/32 на выходах четырёх стадий.
    """
    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor


class SampleBatch(TypedDict):
    """
    Пакет обучающих примеров.

    :param images: B×3×H×W, значения в [0, 1]
    :param labels: B×H×W, целые идентификаторы классов
    :param indices: Индексы сцен в наборе данных
    """
    images: np.ndarray
    labels: np.ndarray
    indices: List[int]


class EpochRecord(TypedDict):
    """Итоги одной эпохи обучения."""
    epoch: int
    loss: float
    train_dsc: float
    val_dsc: Optional[float]
    lr: float


class HausdorffResult(TypedDict):
    """
    Результат метрики Хаусдорфа.

    :param distance: Расстояние в пикселях
    :param penalized: True, если одна из масок пуста и возвращена диагональ
    """
    distance: float
    penalized: bool


class RegionMetrics(TypedDict):
    """Метрики по матрице ошибок (micro-усреднение по переднему плану)."""
    miou: float
    accuracy: float
    precision: float
    recall: float


class MetricReport(TypedDict):
    """
    Полный отчёт оценки.

    :param per_class_dsc: DSC по классам переднего плана (NaN - класс пропущен)
    :param per_class_hd: HD по классам переднего плана
    :param hd_penalties: Число случаев штрафа за пустую маску
    """
    mean_dsc: float
    mean_hd: float
    hd_variant: str
    per_class_dsc: Dict[int, float]
    per_class_hd: Dict[int, float]
    hd_penalties: int
    miou: float
    accuracy: float
    precision: float
    recall: float
    samples: int


class BenchRow(TypedDict):
    """
    Строка отчёта бенчмарка внимания.

    :param median_ms: Медиана времени (None при ошибке выделения памяти)
    :param peak_bytes: Пик живых буферов за один прогон
    """
    mechanism: str
    N: int
    C: int
    median_ms: Optional[float]
    flops: int
    peak_bytes: Optional[int]


class GradCheckResult(TypedDict):
    """
    Итог проверки градиента одного тензора конечными разностями.

    :param check: Имя проверки из набора
    :param tensor: Имя проверяемого входа или параметра
    :param rel_error: Нормированная относительная ошибка ||a - n|| / max(||a||, ||n||)
    """
    check: str
    seed: int
    tensor: str
    rel_error: float
    passed: bool


class TrainSummary(TypedDict):
    """
    Итоги обучения.

    :param best_dsc: Лучший DSC (валидационный, либо обучающий без валидации)
    :param best_path: Чекпоинт с лучшим DSC
    :param final_path: Чекпоинт после последней эпохи
    """
    history: List[EpochRecord]
    best_epoch: int
    best_dsc: float
    best_path: str
    final_path: str


class BenchReport(TypedDict):
    """
    Отчёт бенчмарка внимания.

    :param monotone: Механизм -> время не убывает с ростом N
    """
    rows: List[BenchRow]
    monotone: Dict[str, bool]
