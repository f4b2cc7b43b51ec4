"""
Линейное внимание (Efficient Attention) и Multi-Scale Linear Attention (MSLA).

Efficient Attention заменяет softmax-сходство на произведение отображений
φ_q(Q) = softmax по строкам и φ_k(K) = softmax по столбцам, что позволяет
вычислять φ_q(Q)·(φ_k(K)ᵀ·V) за O(N) вместо O(N²).

MSLA делит карту признаков по каналам на ветви, извлекает мультимасштабные
признаки depth-wise свёртками с ядрами разного размера, применяет
многоголовое Efficient Attention в каждой ветви и сливает ветви
взвешенной конкатенацией и свёрткой 1×1.
"""

# Стандартные библиотеки
import logging
import math
from typing import List, Optional, Sequence, Tuple

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core import functional as F
from src.core.tensor import Tensor, no_grad
from src.domain.errors import ConfigurationError, ContractError, DimensionError
from src.domain.state import AttentionMap
from src.nn.layers import depthwise, pointwise
from src.nn.module import Module, ModuleList, ParameterList, ParamInit

logger = logging.getLogger(__name__)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return F.transpose(x, axes)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention operands disagree: Q{q.shape} K{k.shape} V{v.shape}")


def efficient_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """
    Efficient Attention в линейном порядке σ_row(Q)·(σ_col(K)ᵀ·V).

    :param q: Запросы ...×N×d
    :param k: Ключи ...×N×d
    :param v: Значения ...×N×d
    :return: Выход ...×N×d
    :raises DimensionError: Если формы операндов не согласованы
    """
    _check_qkv(q, k, v)
    phi_q = F.softmax(q, axis=-1)
    phi_k = F.softmax(k, axis=-2)
    context = F.matmul(_swap_last(phi_k), v)
    return F.matmul(phi_q, context)


def efficient_attention_quadratic(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Тот же оператор в квадратичном порядке (σ_row(Q)·σ_col(K)ᵀ)·V - эталон."""
    _check_qkv(q, k, v)
    phi_q = F.softmax(q, axis=-1)
    phi_k = F.softmax(k, axis=-2)
    return F.matmul(F.matmul(phi_q, _swap_last(phi_k)), v)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Классическое softmax-внимание softmax(QKᵀ/√d)·V с явной матрицей N×N."""
    _check_qkv(q, k, v)
    scores = F.matmul(q, _swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return F.matmul(F.softmax(scores, axis=-1), v)


def attention_map(q: Tensor, k: Tensor, query_index: int) -> AttentionMap:
    """
    Материализует строку query_index неявной матрицы φ_q(Q)·φ_k(K)ᵀ.

    Только для диагностики: стоимость O(N·d) на строку, без записи графа.

    :param q: Запросы N×d
    :param k: Ключи N×d
    :param query_index: Индекс запроса
    :return: AttentionMap со строкой весов (сумма равна 1)
    :raises ContractError: Если индекс вне диапазона
    """
    if q.ndim != 2 or q.shape != k.shape:
        raise DimensionError(f"attention_map expects matching N×d operands, got {q.shape} and {k.shape}")
    tokens = q.shape[0]
    if not 0 <= query_index < tokens:
        raise ContractError(f"query index {query_index} is out of range for {tokens} tokens")
    with no_grad():
        phi_q = F.softmax(q, axis=-1).data
        phi_k = F.softmax(k, axis=-2).data
    scores = phi_k @ phi_q[query_index]
    side = math.isqrt(tokens)
    grid = (side, side) if side * side == tokens else (0, 0)
    return AttentionMap(query_index=query_index, scores=scores, grid=grid)


def attention_heatmap(amap: AttentionMap) -> np.ndarray:
    """
    Пространственная форма H×W строки внимания.

    :raises DimensionError: Если сетка строки неизвестна
    """
    height, width = amap["grid"]
    if height * width != amap["scores"].size:
        raise DimensionError(f"{amap['scores'].size} tokens do not fit the grid {height}×{width}")
    return amap["scores"].reshape(height, width)


class MultiScaleLinearAttention(Module):
    """
    Модуль MSLA.

    Параметры именуются так: dwconv.<ветвь>, wq/wk/wv.<ветвь>.<голова>,
    wo.<ветвь>, branch_weights (по скаляру на ветвь), fusion.

    :param channels: Ширина C
    :param head_width: Ширина головы d
    :param kernel_set: Ядра depth-wise свёрток ветвей (пусто - одна ветвь без свёрток)
    :param init: Источник начальных значений
    """

    def __init__(self, channels: int, head_width: int, kernel_set: Sequence[int], init: ParamInit):
        super().__init__()
        self.kernel_set = list(kernel_set)
        self.branches = max(len(self.kernel_set), 1)
        if channels % self.branches:
            raise ConfigurationError(f"MSLA width {channels} is not divisible by {self.branches} branches")
        self.branch_width = channels // self.branches
        if self.branch_width % head_width:
            raise ConfigurationError(
                f"MSLA branch width {self.branch_width} is not divisible by head_width {head_width}")
        self.head_width = head_width
        self.heads = self.branch_width // head_width
        self.channels = channels

        self.dwconv = ModuleList([depthwise(self.branch_width, k, init) for k in self.kernel_set])
        self.wq = ModuleList([self._head_projections(init) for _ in range(self.branches)])
        self.wk = ModuleList([self._head_projections(init) for _ in range(self.branches)])
        self.wv = ModuleList([self._head_projections(init) for _ in range(self.branches)])
        self.wo = ParameterList([init.trunc_normal((self.branch_width, self.branch_width))
                                 for _ in range(self.branches)])
        self.branch_weights = init.full((self.branches,), 1.0)
        self.fusion = pointwise(channels, channels, init)

        # Диагностика: при capture=True сохраняются Q и K каждой ветви
        self.capture = False
        self.captured: List[Tuple[np.ndarray, np.ndarray]] = []
        self.captured_grid: Tuple[int, int] = (0, 0)

    def _head_projections(self, init: ParamInit) -> ParameterList:
        return ParameterList([init.trunc_normal((self.branch_width, self.head_width)) for _ in range(self.heads)])

    # --- Этапы ---

    def extract(self, x: Tensor) -> List[Tensor]:
        """
        Мультимасштабное извлечение: ReLU(dwconv_k(X_i) + X_i) для каждой ветви.

        :param x: Карта B×C×H×W
        :return: Список карт B×(C/b)×H×W
        """
        if x.shape[1] != self.channels:
            raise DimensionError(f"MSLA expects {self.channels} channels, got {x.shape[1]}")
        if not self.kernel_set:
            return [x]
        parts = F.split(x, self.branches, axis=1)
        return [F.relu(conv(part) + part) for conv, part in zip(self.dwconv, parts)]

    def _project(self, tokens: Tensor, weights: ParameterList) -> Tensor:
        batch, count, _ = tokens.shape
        merged = F.concat(list(weights), axis=1) if self.heads > 1 else weights[0]
        projected = F.matmul(tokens, merged).reshape(batch, count, self.heads, self.head_width)
        return F.transpose(projected, (0, 2, 1, 3))

    def attend(self, index: int, part: Tensor) -> Tensor:
        """
        Многоголовое Efficient Attention ветви index и выходная проекция W^O.

        :param index: Номер ветви
        :param part: Карта ветви B×(C/b)×H×W
        :return: Карта O_i той же формы
        """
        tokens = F.map_to_tokens(part)
        batch, count, width = tokens.shape
        q = self._project(tokens, self.wq[index])
        k = self._project(tokens, self.wk[index])
        v = self._project(tokens, self.wv[index])
        if self.capture:
            self.captured.append((q.data.copy(), k.data.copy()))
        heads = efficient_attention(q, k, v)
        merged = F.transpose(heads, (0, 2, 1, 3)).reshape(batch, count, width)
        return F.tokens_to_map(F.matmul(merged, self.wo[index]), part.shape[2:])

    def fuse(self, outputs: Sequence[Tensor]) -> Tensor:
        """Взвешенная конкатенация [w_1·O_1, ..., w_b·O_b] и свёртка 1×1."""
        scales = F.split(self.branch_weights, self.branches, axis=0) if self.branches > 1 else [self.branch_weights]
        weighted = [out * scale for out, scale in zip(outputs, scales)]
        stacked = F.concat(weighted, axis=1) if len(weighted) > 1 else weighted[0]
        return self.fusion(stacked)

    def forward(self, x: Tensor, grid: Optional[Tuple[int, int]] = None) -> Tensor:
        """
        :param x: Токены B×N×C
        :param grid: Сетка (H, W) токенов; без неё N должно быть полным квадратом
        :return: Токены B×N×C
        :raises DimensionError: Если сетка не соответствует N
        """
        fmap = F.tokens_to_map(x, grid)
        if self.capture:
            self.captured = []
            self.captured_grid = fmap.shape[2:]
        parts = self.extract(fmap)
        outputs = [self.attend(i, part) for i, part in enumerate(parts)]
        return F.map_to_tokens(self.fuse(outputs))


def multi_scale_extract(x: Tensor, msla: MultiScaleLinearAttention) -> List[Tensor]:
    """Функциональная форма MultiScaleLinearAttention.extract."""
    return msla.extract(x)


def msla_forward(x: Tensor, msla: MultiScaleLinearAttention) -> Tensor:
    """
    Функциональная форма MultiScaleLinearAttention.forward на квадратной сетке √N×√N.

    :raises DimensionError: Если N не полный квадрат
    """
    return msla(x)


def msla_attention_map(msla: MultiScaleLinearAttention, query_index: int, sample: int = 0,
                       branch: Optional[int] = None, head: Optional[int] = None) -> AttentionMap:
    """
    Строка внимания по Q/K, захваченным при последнем прямом проходе.

    Без branch/head строки всех ветвей и голов усредняются (среднее
    строк-распределений остаётся распределением).

    :raises ContractError: Если захват не включался или индексы вне диапазона
    """
    if not msla.captured:
        raise ContractError("no captured Q/K: enable capture and run a forward pass first")
    branches = range(msla.branches) if branch is None else [branch]
    heads = range(msla.heads) if head is None else [head]
    rows = []
    for b in branches:
        if not 0 <= b < msla.branches:
            raise ContractError(f"branch {b} is out of range for {msla.branches} branches")
        q_all, k_all = msla.captured[b]
        for h in heads:
            if not 0 <= h < msla.heads:
                raise ContractError(f"head {h} is out of range for {msla.heads} heads")
            rows.append(attention_map(Tensor(q_all[sample, h]), Tensor(k_all[sample, h]), query_index)["scores"])
    scores = np.mean(rows, axis=0)
    height, width = msla.captured_grid
    return AttentionMap(query_index=query_index, scores=scores, grid=(int(height), int(width)))
