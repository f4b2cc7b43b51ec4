"""
Бенчмарк сложности внимания по числу токенов N.

Механизмы: softmax (явная матрица N×N), efficient (линейный порядок),
msla (полный модуль MSLA). Для каждой пары (механизм, N): прогрев,
не менее 9 замеров, медиана; FLOPs по отчётам операций; пик памяти
живых буферов через tracemalloc.
"""

# Стандартные библиотеки
import logging
import math
import statistics
import time
import tracemalloc
from typing import Callable, Dict, List, Sequence

# Сторонние библиотеки
import numpy as np
import pandas as pd

# Модули текущего проекта
from src.core.tensor import Tensor, get_dtype, no_grad
from src.domain.errors import ContractError
from src.domain.state import BenchReport, BenchRow
from src.nn.attention import MultiScaleLinearAttention, efficient_attention, softmax_attention
from src.nn.module import ParamInit
from src.training.profiler import count_macs, to_flops

logger = logging.getLogger(__name__)

MECHANISMS = ("softmax", "efficient", "msla")
MIN_REPS = 9
BENCH_COLUMNS = ["mechanism", "N", "C", "median_ms", "flops", "peak_bytes"]


def _workload(mechanism: str, tokens: int, channels: int, head_width: int, seed: int) -> Callable[[], Tensor]:
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    if mechanism == "msla":
        side = math.isqrt(tokens)
        if side * side != tokens:
            raise ContractError(f"msla benchmark needs a perfect-square N, got {tokens}")
        module = MultiScaleLinearAttention(channels, head_width, [3, 5, 7, 9], ParamInit(seed))
        x = Tensor(rng.standard_normal((1, tokens, channels)).astype(dtype))
        return lambda: module(x)
    heads = channels // head_width
    q, k, v = (Tensor(rng.standard_normal((1, heads, tokens, head_width)).astype(dtype)) for _ in range(3))
    attend = softmax_attention if mechanism == "softmax" else efficient_attention
    return lambda: attend(q, k, v)


def attention_macs(mechanism: str, tokens: int, channels: int, head_width: int) -> int:
    """
    Аналитическое число MAC механизма внимания.

    softmax: QKᵀ и AV - 2·h·N²·d; efficient: KᵀV и Q(KᵀV) - 2·h·N·d².
    Для msla - оценка по ветвям (без свёрток), уточняется прогоном.
    """
    heads = channels // head_width
    if mechanism == "softmax":
        return 2 * heads * tokens * tokens * head_width
    return 2 * heads * tokens * head_width * head_width


def _measure(run: Callable[[], Tensor], reps: int) -> Dict[str, float]:
    with no_grad():
        run()
        timings = []
        for _ in range(reps):
            start = time.perf_counter()
            run()
            timings.append((time.perf_counter() - start) * 1000.0)
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            run()
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    return {"median_ms": statistics.median(timings), "peak_bytes": peak}


def bench_attention(mechanisms: Sequence[str], sizes: Sequence[int], channels: int = 64, reps: int = MIN_REPS,
                    head_width: int = 16, seed: int = 0, convention: str = "mac") -> BenchReport:
    """
    Замеряет механизмы внимания на всех N.

    Ошибка выделения памяти записывается в строку (median_ms и peak_bytes пусты),
    прогон продолжается.

    :raises ContractError: Неизвестный механизм, reps < 9 или C не делится на head_width
    """
    unknown = set(mechanisms) - set(MECHANISMS)
    if unknown:
        raise ContractError(f"unknown mechanisms {sorted(unknown)}, expected a subset of {list(MECHANISMS)}")
    if reps < MIN_REPS:
        raise ContractError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    if channels % head_width:
        raise ContractError(f"C={channels} is not divisible by head_width={head_width}")

    rows: List[BenchRow] = []
    for mechanism in mechanisms:
        for tokens in sizes:
            flops = to_flops(attention_macs(mechanism, tokens, channels, head_width), convention)
            try:
                run = _workload(mechanism, tokens, channels, head_width, seed)
                if mechanism == "msla":
                    flops = to_flops(sum(count_macs(run).values()), convention)
                measured = _measure(run, reps)
                row = BenchRow(mechanism=mechanism, N=tokens, C=channels, median_ms=measured["median_ms"],
                               flops=flops, peak_bytes=int(measured["peak_bytes"]))
            except MemoryError:
                logger.warning(f"⚠️ {mechanism} at N={tokens}: allocation failed, row recorded without timing")
                row = BenchRow(mechanism=mechanism, N=tokens, C=channels, median_ms=None, flops=flops,
                               peak_bytes=None)
            logger.info(f"⏱️ {mechanism} N={tokens} C={channels}: median={row['median_ms']} ms flops={flops}")
            rows.append(row)

    monotone = {m: _is_monotone([r for r in rows if r["mechanism"] == m]) for m in mechanisms}
    for mechanism, ok in monotone.items():
        if not ok:
            logger.warning(f"⚠️ {mechanism}: median time is not monotone in N (scheduler noise?)")
    return BenchReport(rows=rows, monotone=monotone)


def _is_monotone(rows: List[BenchRow]) -> bool:
    timed = [r["median_ms"] for r in sorted(rows, key=lambda r: r["N"]) if r["median_ms"] is not None]
    return all(a <= b for a, b in zip(timed, timed[1:]))


def bench_frame(report: BenchReport) -> pd.DataFrame:
    return pd.DataFrame(report["rows"], columns=BENCH_COLUMNS)


def save_bench_csv(report: BenchReport, path: str) -> None:
    """CSV с заголовком mechanism,N,C,median_ms,flops,peak_bytes."""
    bench_frame(report).to_csv(path, index=False)
