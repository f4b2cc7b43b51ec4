"""
Метрики оценки сегментации: DSC, расстояние Хаусдорфа (max и HD95),
mIoU, точность, precision и recall по матрице ошибок.

Класс 0 - фон, в средние по классам не входит.
"""

# Стандартные библиотеки
import logging
import math
from typing import Dict, List, Tuple

# Сторонние библиотеки
import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import cdist

# Модули текущего проекта
from src.domain.errors import ContractError, DimensionError
from src.domain.state import HausdorffResult, RegionMetrics

logger = logging.getLogger(__name__)

# Структура 8-связности для выделения границы
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

HD_VARIANTS = {"max": 100.0, "95": 95.0}


def _same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")


def per_class_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Dict[int, float]:
    """
    DSC 2|P∩G|/(|P|+|G|) для каждого класса переднего плана.

    :return: Класс -> DSC; NaN, если класс отсутствует и в предсказании, и в разметке
    """
    _same_shape(pred, gt)
    scores: Dict[int, float] = {}
    for k in range(1, num_classes):
        p, g = pred == k, gt == k
        total = int(p.sum()) + int(g.sum())
        scores[k] = 2.0 * int((p & g).sum()) / total if total else math.nan
    return scores


def dsc_metric(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Tuple[Dict[int, float], float]:
    """
    DSC по классам и среднее по присутствующим классам переднего плана.

    :return: (DSC по классам, средний DSC); среднее NaN, если классов нет
    """
    scores = per_class_dice(pred, gt, num_classes)
    present = [v for v in scores.values() if not math.isnan(v)]
    return scores, float(np.mean(present)) if present else math.nan


def boundary(mask: np.ndarray) -> np.ndarray:
    """Пиксели маски, у которых хотя бы один из 8 соседей вне маски (край изображения - вне)."""
    mask = mask.astype(bool)
    return mask & ~binary_erosion(mask, structure=_EIGHT_CONNECTED, border_value=0)


def hausdorff(pred: np.ndarray, gt: np.ndarray, k: int, percentile: float = 100.0) -> HausdorffResult:
    """
    Симметричное расстояние Хаусдорфа между границами масок класса k.

    :param pred: Предсказанные метки H×W
    :param gt: Разметка H×W
    :param k: Класс
    :param percentile: 100 - максимум, 95 - HD95
    :return: Расстояние; если пуста одна маска - диагональ изображения и флаг штрафа,
             если пусты обе - 0
    """
    _same_shape(pred, gt)
    if pred.ndim != 2:
        raise DimensionError(f"hausdorff expects 2-D label maps, got {pred.shape}")
    if not 0.0 < percentile <= 100.0:
        raise ContractError(f"percentile must lie in (0, 100], got {percentile}")
    a, b = pred == k, gt == k
    if not a.any() and not b.any():
        return HausdorffResult(distance=0.0, penalized=False)
    if not a.any() or not b.any():
        diagonal = math.hypot(*pred.shape)
        logger.warning(f"⚠️ Class {k} is empty in {'prediction' if not a.any() else 'ground truth'}, "
                       f"Hausdorff penalized with image diagonal {diagonal:.2f}")
        return HausdorffResult(distance=diagonal, penalized=True)

    points_a = np.argwhere(boundary(a)).astype(float)
    points_b = np.argwhere(boundary(b)).astype(float)
    distances = cdist(points_a, points_b)
    forward = distances.min(axis=1)
    backward = distances.min(axis=0)
    distance = max(np.percentile(forward, percentile), np.percentile(backward, percentile))
    return HausdorffResult(distance=float(distance), penalized=False)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Матрица ошибок K×K: строки - разметка, столбцы - предсказание."""
    _same_shape(pred, gt)
    codes = gt.astype(np.int64).reshape(-1) * num_classes + pred.astype(np.int64).reshape(-1)
    return np.bincount(codes, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def region_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> RegionMetrics:
    """
    mIoU (по классам переднего плана), accuracy, micro-precision и micro-recall.

    Класс, отсутствующий и в предсказании, и в разметке, не входит в mIoU.
    """
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes))


def metrics_from_confusion(matrix: np.ndarray) -> RegionMetrics:
    tp = np.diag(matrix).astype(float)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    fg_tp, fg_fp, fg_fn = tp[1:], fp[1:], fn[1:]
    union = fg_tp + fg_fp + fg_fn
    ious: List[float] = [t / u for t, u in zip(fg_tp, union) if u]
    return RegionMetrics(
        miou=float(np.mean(ious)) if ious else 1.0,
        accuracy=_ratio(tp.sum(), matrix.sum()),
        precision=_ratio(fg_tp.sum(), fg_tp.sum() + fg_fp.sum()),
        recall=_ratio(fg_tp.sum(), fg_tp.sum() + fg_fn.sum()),
    )
