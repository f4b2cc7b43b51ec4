"""
Модели конфигурации: архитектура сети, рецепты обучения, настройки запуска.

Архитектура задаётся плоским текстом key=value (комментарии через '#'),
настройки запуска - YAML-файлом config/run_config.yaml. Оба формата
валидируются моделями pydantic.
"""

# Стандартные библиотеки
import logging
from typing import Dict, List, Literal, Tuple

# Сторонние библиотеки
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

# Модули текущего проекта
from src.domain.errors import ConfigParseError, ConfigurationError

logger = logging.getLogger(__name__)

# Допустимые наборы ядер MSLA для четырёх ветвей
FOUR_BRANCH_KERNEL_SETS = ([3, 5, 7, 9], [1, 3, 5, 7])

# Пресеты масштаба модели
PRESETS: Dict[str, Dict[str, object]] = {
    "base": {
        "stage_depths": [4, 8, 11, 5],
        "stage_widths": [64, 128, 256, 512],
        "block_pattern": "LLGG",
        "kernel_set": [3, 5, 7, 9],
        "head_width": 32,
        "num_classes": 9,
        "input_size": (224, 224),
    },
    "small": {
        "stage_depths": [3, 4, 8, 3],
        "stage_widths": [64, 128, 256, 512],
        "block_pattern": "LLGG",
        "kernel_set": [3, 5, 7, 9],
        "head_width": 32,
        "num_classes": 9,
        "input_size": (224, 224),
    },
    "desk": {
        "stage_depths": [2, 2, 4, 2],
        "stage_widths": [32, 64, 128, 256],
        "block_pattern": "LLGG",
        "kernel_set": [3, 5, 7, 9],
        "head_width": 16,
        "num_classes": 4,
        "input_size": (64, 64),
    },
}

# Синонимы ключей в текстовом формате
_KEY_ALIASES = {
    "pattern": "block_pattern",
    "depths": "stage_depths",
    "widths": "stage_widths",
    "kernels": "kernel_set",
    "classes": "num_classes",
}


class ModelConfig(BaseModel):
    """
    Полный набор гиперпараметров архитектуры.

    :param stage_depths: Число блоков в каждой из четырёх стадий
    :param stage_widths: Ширины стадий (строгое удвоение)
    :param block_pattern: Тип блоков по стадиям, строка из L/G длины 4
    :param kernel_set: Ядра ветвей MSLA (пустой список - без мультимасштаба)
    :param head_width: Ширина головы внимания d
    :param num_classes: Число классов K
    :param input_size: Размер входа (H, W), кратный 32
    """

    stage_depths: List[int] = Field(min_length=4, max_length=4)
    stage_widths: List[int] = Field(min_length=4, max_length=4)
    block_pattern: str
    kernel_set: List[int]
    head_width: int = Field(gt=0)
    num_classes: int = Field(ge=1)
    input_size: Tuple[int, int]

    @field_validator("stage_depths")
    @classmethod
    def _depths_positive(cls, value: List[int]) -> List[int]:
        if any(d < 1 for d in value):
            raise ValueError("stage_depths: every stage needs at least one block")
        return value

    @field_validator("block_pattern")
    @classmethod
    def _pattern_alphabet(cls, value: str) -> str:
        value = value.upper()
        if len(value) != 4 or set(value) - {"L", "G"}:
            raise ValueError("block_pattern: expected 4 characters over {L, G}")
        return value

    @field_validator("kernel_set")
    @classmethod
    def _kernels_valid(cls, value: List[int]) -> List[int]:
        if any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError("kernel_set: kernel sizes must be odd positive integers")
        if len(value) not in (0, 2, 4):
            raise ValueError("kernel_set: branch count must be 2 or 4 (or none)")
        if len(value) == 4 and sorted(value) not in FOUR_BRANCH_KERNEL_SETS:
            raise ValueError("kernel_set: four-branch sets are {3,5,7,9} or {1,3,5,7}")
        return value

    @model_validator(mode="after")
    def _structural_invariants(self) -> "ModelConfig":
        widths = self.stage_widths
        if widths[0] < 2 or any(widths[i + 1] != 2 * widths[i] for i in range(3)):
            raise ValueError("stage_widths: widths must double stage to stage (width[i+1] == 2*width[i])")
        height, width = self.input_size
        if height < 32 or width < 32 or height % 32 or width % 32:
            raise ValueError("input_size: H and W must be positive multiples of 32")
        for stage, kind in enumerate(self.block_pattern):
            if kind != "G":
                continue
            channels = widths[stage]
            if channels % (self.branches * self.head_width):
                raise ValueError(
                    f"head_width: stage {stage + 1} width {channels} is not divisible by "
                    f"{self.branches} branches x head_width {self.head_width}")
        return self

    @property
    def branches(self) -> int:
        """Число ветвей MSLA (1 - без мультимасштабного извлечения)."""
        return max(len(self.kernel_set), 1)

    @classmethod
    def create(cls, **fields: object) -> "ModelConfig":
        """
        Создаёт конфигурацию, превращая ошибки pydantic в ConfigurationError.

        :raises ConfigurationError: С названием нарушенного ограничения
        """
        try:
            return cls(**fields)
        except ValidationError as e:
            reasons = "; ".join(_describe(err) for err in e.errors())
            raise ConfigurationError(reasons) from e

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
        return cls.create(**PRESETS[name])

    def to_text(self) -> str:
        """Сериализация в формат key=value (обратима через parse_config)."""
        kernels = ",".join(map(str, self.kernel_set)) or "none"
        return "\n".join([
            f"stage_depths={','.join(map(str, self.stage_depths))}",
            f"stage_widths={','.join(map(str, self.stage_widths))}",
            f"block_pattern={self.block_pattern}",
            f"kernel_set={kernels}",
            f"head_width={self.head_width}",
            f"num_classes={self.num_classes}",
            f"input_size={self.input_size[0]},{self.input_size[1]}",
        ]) + "\n"


def _describe(error: dict) -> str:
    """Текст ошибки pydantic с именем поля."""
    message = error["msg"].removeprefix("Value error, ")
    location = ".".join(str(part) for part in error.get("loc", ()))
    if location and not message.startswith(location):
        return f"{location}: {message}"
    return message


def _int_list(raw: str, line_no: int) -> List[int]:
    if raw.strip().lower() in ("none", ""):
        return []
    try:
        return [int(part) for part in raw.split(",")]
    except ValueError:
        raise ConfigParseError(f"expected comma-separated integers, got '{raw}'", line_no) from None


def parse_config(text: str) -> ModelConfig:
    """
    Разбирает текст key=value в проверенную ModelConfig.

    Значения по умолчанию берутся из пресета (preset=..., по умолчанию base),
    остальные ключи переопределяют его независимо от порядка строк.

    :param text: Содержимое файла конфигурации
    :return: Валидная конфигурация
    :raises ConfigParseError: Синтаксис, неизвестный или повторный ключ (с номером строки)
    :raises ConfigurationError: Нарушение инварианта архитектуры
    """
    entries: Dict[str, Tuple[str, int]] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected key=value, got '{line}'", line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in ModelConfig.model_fields and key != "preset":
            raise ConfigParseError(f"unknown key '{key}'", line_no)
        if key in entries:
            raise ConfigParseError(f"duplicate key '{key}'", line_no)
        entries[key] = (value, line_no)

    preset_name, preset_line = entries.pop("preset", ("base", 0))
    if preset_name not in PRESETS:
        raise ConfigParseError(f"unknown preset '{preset_name}'", preset_line)
    fields: Dict[str, object] = dict(PRESETS[preset_name])

    for key, (value, line_no) in entries.items():
        if key in ("stage_depths", "stage_widths", "kernel_set"):
            fields[key] = _int_list(value, line_no)
        elif key in ("head_width", "num_classes"):
            numbers = _int_list(value, line_no)
            if len(numbers) != 1:
                raise ConfigParseError(f"{key} expects a single integer", line_no)
            fields[key] = numbers[0]
        elif key == "input_size":
            sizes = _int_list(value, line_no)
            if len(sizes) not in (1, 2):
                raise ConfigParseError("input_size expects H or H,W", line_no)
            fields[key] = (sizes[0], sizes[-1])
        else:
            fields[key] = value

    config = ModelConfig.create(**fields)
    logger.debug(f"Parsed model config: {config.model_dump()}")
    return config


# ========================================
# НАСТРОЙКИ ЗАПУСКА (YAML)
# ========================================

class TrainRecipe(BaseModel):
    """
    Рецепт оптимизации.

    :param optimizer: sgd или adamw
    :param dice_weight: Вес λ dice-компоненты гибридной потери
    :param augment_p: Вероятность каждой аугментации (0 - без аугментаций)
    :param poly_lr: Полиномиальное затухание шага (степень 0.9)
    :param val_fraction: Доля сцен для валидации, если отдельный набор не задан
    """

    optimizer: Literal["sgd", "adamw"]
    lr: float = Field(gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    batch_size: int = Field(ge=1)
    epochs: int = Field(ge=1)
    dice_weight: float = Field(default=0.6, ge=0, le=1)
    augment_p: float = Field(default=0.0, ge=0, le=1)
    poly_lr: bool = False
    val_fraction: float = Field(default=0.0, ge=0, lt=1)


class SystemSettings(BaseModel):
    log_level: str = "INFO"
    runs_dir: str = "runs"
    precision: Literal["float32", "float64"] = "float32"


class BenchSettings(BaseModel):
    sizes: List[int] = [256, 1024, 4096]
    reps: int = Field(default=9, ge=9)
    channels: int = 64
    head_width: int = 16


class RunConfig(BaseModel):
    system: SystemSettings = SystemSettings()
    recipes: Dict[str, TrainRecipe] = {}
    bench: BenchSettings = BenchSettings()

    def recipe(self, name: str) -> TrainRecipe:
        if name not in self.recipes:
            raise ConfigurationError(f"unknown recipe '{name}', expected one of {sorted(self.recipes)}")
        return self.recipes[name]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            return cls(**(data or {}))
        except ValidationError as e:
            raise ConfigurationError(str(e)) from e
