"""
Базовые слои: линейный, свёрточный, пакетная и послойная нормализации.
"""

# Стандартные библиотеки
from typing import Optional

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core import functional as F
from src.core.tensor import Tensor, get_dtype
from src.nn.module import Module, ParamInit


class Linear(Module):
    """
    Потокенное линейное отображение x·W + b (W хранится как in×out).

    :param in_features: Входная ширина
    :param out_features: Выходная ширина
    :param init: Источник начальных значений
    :param bias: Добавлять ли смещение
    """

    def __init__(self, in_features: int, out_features: int, init: ParamInit, bias: bool = True):
        super().__init__()
        self.weight = init.trunc_normal((in_features, out_features))
        if bias:
            self.bias = init.zeros((out_features,))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        out = F.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """Свёртка со смещением; groups == in_channels даёт depth-wise."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, init: ParamInit,
                 stride: int = 1, pad: Optional[int] = None, groups: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.pad = (kernel_size - 1) // 2 if pad is None else pad
        self.groups = groups
        self.kernel_size = kernel_size
        self.weight = init.trunc_normal((out_channels, in_channels // groups, kernel_size, kernel_size))
        if bias:
            self.bias = init.zeros((out_channels,))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad, groups=self.groups)


def depthwise(channels: int, kernel_size: int, init: ParamInit) -> Conv2d:
    """Depth-wise свёртка, сохраняющая пространственный размер."""
    return Conv2d(channels, channels, kernel_size, init, groups=channels)


def pointwise(in_channels: int, out_channels: int, init: ParamInit) -> Conv2d:
    """Свёртка 1×1."""
    return Conv2d(in_channels, out_channels, 1, init)


class BatchNorm2d(Module):
    """Пакетная нормализация со скользящими статистиками (среднее 0, дисперсия 1 до обучения)."""

    def __init__(self, channels: int, init: ParamInit):
        super().__init__()
        self.weight = init.ones((channels,))
        self.bias = init.zeros((channels,))
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training=self.training)


class LayerNorm(Module):
    """Нормализация по последней оси (токены B×N×C)."""

    def __init__(self, channels: int, init: ParamInit):
        super().__init__()
        self.weight = init.ones((channels,))
        self.bias = init.zeros((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.weight, self.bias)


class ChannelLayerNorm(LayerNorm):
    """LayerNorm по оси каналов карты B×C×H×W в каждой позиции."""

    def forward(self, x: Tensor) -> Tensor:
        moved = F.transpose(x, (0, 2, 3, 1))
        return F.transpose(F.layernorm(moved, self.weight, self.bias), (0, 3, 1, 2))
