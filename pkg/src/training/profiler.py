"""
Подсчёт параметров, FLOPs и замер времени инференса.

FLOPs считаются прогоном прямого прохода без графа с подпиской на отчёты
операций conv2d и matmul; нормализации, активации и интерполяция не
учитываются. По умолчанию одно умножение-накопление считается одной
операцией (convention="mac"), convention="2mac" удваивает счёт.
"""

# Стандартные библиотеки
import logging
import statistics
import time
from collections import Counter
from typing import Callable, Dict, Tuple

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.tensor import Tensor, get_dtype, mac_listener, no_grad
from src.domain.errors import ContractError
from src.nn.module import Module

logger = logging.getLogger(__name__)

FLOP_CONVENTIONS = {"mac": 1, "2mac": 2}
TIMING_RUNS = 3


def count_params(model: Module) -> int:
    """Сумма размеров всех обучаемых тензоров."""
    return sum(p.size for p in model.parameters())


def count_macs(forward: Callable[[], object]) -> Dict[str, int]:
    """Умножения-накопления по тегам операций за один вызов forward (без графа)."""
    totals: Counter = Counter()

    def listener(op: str, macs: int) -> None:
        totals[op] += macs

    with no_grad(), mac_listener(listener):
        forward()
    return dict(totals)


def to_flops(macs: int, convention: str = "mac") -> int:
    if convention not in FLOP_CONVENTIONS:
        raise ContractError(f"unknown FLOP convention '{convention}', expected one of {sorted(FLOP_CONVENTIONS)}")
    return macs * FLOP_CONVENTIONS[convention]


def count_flops(model: Module, height: int, width: int, convention: str = "mac") -> int:
    """
    FLOPs одного прямого прохода на входе 1×3×H×W.

    :param convention: "mac" (1 MAC = 1 FLOP) или "2mac"
    """
    was_training = model.training
    model.eval()
    x = Tensor(np.zeros((1, 3, height, width), dtype=get_dtype()))
    try:
        macs = count_macs(lambda: model(x))
    finally:
        model.train(was_training)
    logger.debug(f"MACs by op at {height}x{width}: {macs}")
    return to_flops(sum(macs.values()), convention)


def inference_timing(model: Module, height: int, width: int, runs: int = TIMING_RUNS) -> Tuple[float, float]:
    """
    Медианное время инференса одного изображения после прогрева.

    :return: (миллисекунды, кадров в секунду)
    """
    was_training = model.training
    model.eval()
    x = Tensor(np.random.default_rng(0).random((1, 3, height, width)).astype(get_dtype()))
    timings = []
    try:
        with no_grad():
            model(x)
            for _ in range(runs):
                start = time.perf_counter()
                model(x)
                timings.append((time.perf_counter() - start) * 1000.0)
    finally:
        model.train(was_training)
    median_ms = statistics.median(timings)
    return median_ms, 1000.0 / median_ms
