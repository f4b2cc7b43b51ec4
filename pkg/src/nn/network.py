"""
Сборка MSLAU-Net: четырёхстадийный энкодер, декодер с нисходящей агрегацией
и построение всей модели по ModelConfig.
"""

# Стандартные библиотеки
import logging
from typing import List, Sequence

# Модули текущего проекта
from src.core import functional as F
from src.core.tensor import Tensor
from src.domain.config import ModelConfig
from src.domain.errors import ConfigurationError, DimensionError
from src.domain.state import EncoderOutputs
from src.nn.blocks import GFEBlock, LFEBlock, PatchEmbed
from src.nn.layers import Conv2d, pointwise
from src.nn.module import Module, ModuleList, ParamInit

logger = logging.getLogger(__name__)

# Шаги понижения по стадиям
STAGE_STRIDES = (4, 2, 2, 2)
# Общий коэффициент понижения энкодера
TOTAL_STRIDE = 32


class EncoderStage(Module):
    """
    PatchEmbed и depth блоков одного типа.

    Блоки L работают с картами, блоки G - с токенами (переход на границах стадии).
    """

    def __init__(self, in_channels: int, channels: int, stride: int, depth: int, kind: str,
                 config: ModelConfig, init: ParamInit):
        super().__init__()
        self.kind = kind
        self.depth = depth
        self.embed = PatchEmbed(in_channels, channels, stride, init)
        for j in range(depth):
            if kind == "L":
                block: Module = LFEBlock(channels, init)
            else:
                block = GFEBlock(channels, config.head_width, config.kernel_set, init)
            self.add_module(f"block{j}", block)

    def blocks(self) -> List[Module]:
        return [getattr(self, f"block{j}") for j in range(self.depth)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.embed(x)
        if self.kind == "L":
            for block in self.blocks():
                x = block(x)
            return x
        grid = x.shape[2:]
        tokens = F.map_to_tokens(x)
        for block in self.blocks():
            tokens = block(tokens, grid)
        return F.tokens_to_map(tokens, grid)


class Encoder(Module):
    """Иерархический энкодер: стадии stage1..stage4 с разрешениями H/4..H/32."""

    def __init__(self, config: ModelConfig, init: ParamInit):
        super().__init__()
        in_channels = 3
        for i in range(4):
            stage = EncoderStage(in_channels, config.stage_widths[i], STAGE_STRIDES[i],
                                 config.stage_depths[i], config.block_pattern[i], config, init)
            self.add_module(f"stage{i + 1}", stage)
            in_channels = config.stage_widths[i]

    def stages(self) -> List[EncoderStage]:
        return [getattr(self, f"stage{i + 1}") for i in range(4)]

    def forward(self, x: Tensor) -> EncoderOutputs:
        features = []
        for stage in self.stages():
            x = stage(x)
            features.append(x)
        return EncoderOutputs(s1=features[0], s2=features[1], s3=features[2], s4=features[3])


class RefineBranch(Module):
    """3×3 свёртка, GELU, 3×3 свёртка, увеличение ×2."""

    def __init__(self, channels: int, init: ParamInit):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, init)
        self.conv2 = Conv2d(channels, channels, 3, init)

    def forward(self, x: Tensor) -> Tensor:
        return F.bilinear_upsample2x(self.conv2(F.gelu(self.conv1(x))))


class Decoder(Module):
    """
    Декодер с нисходящей агрегацией.

    1. Выравнивание: стадия m+1 проходит m шагов [1×1 свёртка с делением каналов
       пополам, увеличение ×2] и приводится к сетке стадии 1 (H/4, C1).
    2. Нисходящее сложение: B4=A4, B3=A3+B4, B2=A2+B3, B1=s1.
    3. Уточнение каждой ветви и увеличение до H/2.
    4. Конкатенация ветвей, 3×3 свёртка в K классов, увеличение до H.
    """

    def __init__(self, widths: Sequence[int], num_classes: int, init: ParamInit):
        super().__init__()
        if any(widths[i + 1] != 2 * widths[i] for i in range(3)):
            raise ConfigurationError("stage_widths: decoder alignment requires doubling widths")
        self.widths = list(widths)
        for m in range(1, 4):
            steps = [pointwise(widths[m] // 2 ** s, widths[m] // 2 ** (s + 1), init) for s in range(m)]
            self.add_module(f"align{m + 1}", ModuleList(steps))
        self.refine = ModuleList([RefineBranch(widths[0], init) for _ in range(4)])
        self.head = Conv2d(4 * widths[0], num_classes, 3, init)

    def align(self, x: Tensor, stage: int) -> Tensor:
        for conv in getattr(self, f"align{stage}"):
            x = F.bilinear_upsample2x(conv(x))
        return x

    def forward(self, enc: EncoderOutputs) -> Tensor:
        for i, key in enumerate(("s1", "s2", "s3", "s4")):
            if enc[key].shape[1] != self.widths[i]:
                raise DimensionError(f"encoder output {key} has {enc[key].shape[1]} channels, "
                                     f"decoder expects {self.widths[i]}")
        b4 = self.align(enc["s4"], 4)
        b3 = self.align(enc["s3"], 3) + b4
        b2 = self.align(enc["s2"], 2) + b3
        b1 = enc["s1"]
        refined = [branch(b) for branch, b in zip(self.refine, (b1, b2, b3, b4))]
        return F.bilinear_upsample2x(self.head(F.concat(refined, axis=1)))


class MSLAUNet(Module):
    """Полная модель: энкодер enc и декодер dec."""

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__()
        self.config = config
        init = ParamInit(seed)
        self.enc = Encoder(config, init)
        self.dec = Decoder(config.stage_widths, config.num_classes, init)

    def forward(self, x: Tensor) -> Tensor:
        """
        :param x: Изображения B×3×H×W, H и W кратны 32
        :return: Ненормированные логиты B×K×H×W
        :raises DimensionError: При неверной форме входа
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected B×3×H×W images, got {x.shape}")
        if x.shape[2] % TOTAL_STRIDE or x.shape[3] % TOTAL_STRIDE:
            raise DimensionError(f"spatial extent {x.shape[2]}×{x.shape[3]} is not divisible by {TOTAL_STRIDE}")
        return self.dec(self.enc(x))


def build_model(config: ModelConfig, seed: int) -> MSLAUNet:
    """
    Строит модель с детерминированной инициализацией.

    :param config: Проверенная конфигурация
    :param seed: Зерно инициализации
    :return: Модель с иерархически именованными параметрами
    """
    model = MSLAUNet(config, seed)
    total = sum(p.size for p in model.parameters())
    logger.debug(f"Built MSLAU-Net {config.block_pattern} depths={config.stage_depths}: {total} parameters")
    return model


def encoder_forward(x: Tensor, model: MSLAUNet) -> EncoderOutputs:
    return model.enc(x)


def decoder_forward(enc: EncoderOutputs, model: MSLAUNet) -> Tensor:
    return model.dec(enc)


def model_forward(x: Tensor, model: MSLAUNet) -> Tensor:
    return model(x)
