"""
Строительные блоки энкодера.

- PatchEmbed: понижающая свёртка с шагом и LayerNorm по каналам
- LFEBlock: свёрточный блок локальных признаков (работает с картами)
- GFEBlock: трансформерный блок глобальных признаков с MSLA (работает с токенами)

Все блоки, кроме PatchEmbed, сохраняют форму входа.
"""

# Стандартные библиотеки
from typing import Optional, Sequence, Tuple

# Модули текущего проекта
from src.core import functional as F
from src.core.tensor import Tensor
from src.nn.attention import MultiScaleLinearAttention
from src.nn.layers import BatchNorm2d, ChannelLayerNorm, Conv2d, LayerNorm, Linear, depthwise, pointwise
from src.nn.module import Module, ParamInit

# Коэффициент расширения FFN
FFN_RATIO = 4


class PatchEmbed(Module):
    """
    Свёртка k=s с шагом s (4 для первой стадии, 2 для остальных) и LN по каналам.

    :param in_channels: Входные каналы
    :param out_channels: Выходные каналы
    :param stride: Шаг понижения
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int, init: ParamInit):
        super().__init__()
        self.stride = stride
        self.proj = Conv2d(in_channels, out_channels, stride, init, stride=stride, pad=0)
        self.norm = ChannelLayerNorm(out_channels, init)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(x))


def patch_embed(x: Tensor, embed: PatchEmbed) -> Tensor:
    """
    :raises DimensionError: Если H или W не делятся на шаг
    """
    return embed(x)


class ConvFFN(Module):
    """FFN на картах: 1×1 расширение ×4, GELU, 1×1 сужение."""

    def __init__(self, channels: int, init: ParamInit):
        super().__init__()
        self.fc1 = pointwise(channels, channels * FFN_RATIO, init)
        self.fc2 = pointwise(channels * FFN_RATIO, channels, init)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TokenFFN(Module):
    """FFN на токенах: Linear C→4C, GELU, Linear 4C→C."""

    def __init__(self, channels: int, init: ParamInit):
        super().__init__()
        self.fc1 = Linear(channels, channels * FFN_RATIO, init)
        self.fc2 = Linear(channels * FFN_RATIO, channels, init)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class LFEBlock(Module):
    """
    Блок Local Feature Extraction.

        ẑ  = dwconv3(z) + z
        ẑ' = pw2(dwconv5(pw1(BN(ẑ)))) + ẑ
        out = FFN(BN(ẑ')) + ẑ'
    """

    def __init__(self, channels: int, init: ParamInit):
        super().__init__()
        self.pos = depthwise(channels, 3, init)
        self.norm1 = BatchNorm2d(channels, init)
        self.pw1 = pointwise(channels, channels, init)
        self.dw = depthwise(channels, 5, init)
        self.pw2 = pointwise(channels, channels, init)
        self.norm2 = BatchNorm2d(channels, init)
        self.ffn = ConvFFN(channels, init)

    def forward(self, x: Tensor) -> Tensor:
        x = self.pos(x) + x
        x = self.pw2(self.dw(self.pw1(self.norm1(x)))) + x
        return self.ffn(self.norm2(x)) + x


def lfe_forward(x: Tensor, block: LFEBlock, training: bool = True) -> Tensor:
    """Прямой проход LFE в заданном режиме пакетной нормализации."""
    block.train(training)
    return block(x)


class GFEBlock(Module):
    """
    Блок Global Feature Extraction на токенах B×N×C.

        ẑ  = dwconv3(z) + z          (позиционная свёртка в форме карты)
        ẑ' = MSLA(LN(ẑ)) + ẑ
        out = FFN(LN(ẑ')) + ẑ'
    """

    def __init__(self, channels: int, head_width: int, kernel_set: Sequence[int], init: ParamInit):
        super().__init__()
        self.pos = depthwise(channels, 3, init)
        self.norm1 = LayerNorm(channels, init)
        self.msla = MultiScaleLinearAttention(channels, head_width, kernel_set, init)
        self.norm2 = LayerNorm(channels, init)
        self.ffn = TokenFFN(channels, init)

    def forward(self, x: Tensor, grid: Optional[Tuple[int, int]] = None) -> Tensor:
        """
        :param x: Токены B×N×C
        :param grid: Сетка (H, W) токенов; без неё N должно быть полным квадратом
        """
        fmap = F.tokens_to_map(x, grid)
        grid = fmap.shape[2:]
        x = F.map_to_tokens(self.pos(fmap)) + x
        x = self.msla(self.norm1(x), grid) + x
        return self.ffn(self.norm2(x)) + x


def gfe_forward(x: Tensor, block: GFEBlock) -> Tensor:
    """
    Прямой проход GFE на квадратной сетке √N×√N.

    :raises DimensionError: Если N не полный квадрат
    """
    return block(x)
