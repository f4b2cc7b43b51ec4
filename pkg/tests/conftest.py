"""
Общие фикстуры тестов: двойная точность, маленькие конфигурации и корпус.
"""

# Стандартные библиотеки
from pathlib import Path

# Сторонние библиотеки
import numpy as np
import pytest

# Модули текущего проекта
from src.core.tensor import precision
from src.data.synthetic import gen_synthetic
from src.domain.config import ModelConfig

ROOT = Path(__file__).resolve().parents[1]
RUN_CONFIG = ROOT / "config" / "run_config.yaml"
PRESETS_DIR = ROOT / "config" / "presets"


@pytest.fixture(autouse=True)
def float64():
    """Все тесты считают в float64."""
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Минимальная модель LLGG для входа 32×32 (стадия 4 - одна клетка)."""
    return ModelConfig.create(stage_depths=[1, 1, 1, 1], stage_widths=[16, 32, 64, 128], block_pattern="LLGG",
                              kernel_set=[3, 5, 7, 9], head_width=8, num_classes=4, input_size=(32, 32))


@pytest.fixture(scope="session")
def corpus32(tmp_path_factory) -> str:
    """10 синтетических сцен 32×32, K=4."""
    root = tmp_path_factory.mktemp("corpus32")
    return gen_synthetic(seed=3, count=10, height=32, width=32, num_classes=4, root=str(root))
