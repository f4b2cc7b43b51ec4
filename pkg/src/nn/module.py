"""
Реестр параметров: Module, контейнеры и детерминированная инициализация.

Параметры и буферы именуются иерархически через точку
(например, enc.stage3.block2.msla.wq.1.0), что используется
чекпоинтами, оптимизаторами и диагностикой NaN.
"""

# Стандартные библиотеки
import logging
from collections import OrderedDict
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.tensor import Tensor, get_dtype
from src.domain.errors import CheckpointMismatchError

logger = logging.getLogger(__name__)

# Стандартное отклонение усечённого нормального распределения для весов
INIT_STD = 0.02


class Parameter(Tensor):
    """Обучаемый тензор (лист графа с requires_grad=True)."""

    def __init__(self, data: np.ndarray):
        super().__init__(data, requires_grad=True)


class ParamInit:
    """
    Детерминированный источник начальных значений параметров.

    Веса проекций и свёрток - усечённое нормальное (std 0.02, обрезка ±2σ),
    смещения - нули, масштабы нормализаций - единицы.
    """

    def __init__(self, seed: int):
        self.rng = np.random.Generator(np.random.Philox(key=seed))

    def trunc_normal(self, shape: Sequence[int], std: float = INIT_STD) -> Parameter:
        values = self.rng.standard_normal(tuple(shape))
        outside = np.abs(values) > 2.0
        while outside.any():
            values[outside] = self.rng.standard_normal(int(outside.sum()))
            outside = np.abs(values) > 2.0
        return Parameter((values * std).astype(get_dtype()))

    @staticmethod
    def zeros(shape: Sequence[int]) -> Parameter:
        return Parameter(np.zeros(tuple(shape), dtype=get_dtype()))

    @staticmethod
    def ones(shape: Sequence[int]) -> Parameter:
        return Parameter(np.ones(tuple(shape), dtype=get_dtype()))

    @staticmethod
    def full(shape: Sequence[int], value: float) -> Parameter:
        return Parameter(np.full(tuple(shape), value, dtype=get_dtype()))


class Module:
    """
    Базовый класс слоёв.

    Атрибуты-параметры и атрибуты-подмодули регистрируются автоматически,
    порядок регистрации определяет порядок обхода.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError(f"{type(self).__name__}.forward is not implemented")

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    # --- Обход ---

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for module_name, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                yield (f"{module_name}.{name}" if module_name else name), param

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for module_name, module in self.named_modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{module_name}.{name}" if module_name else name), buf

    # --- Режимы ---

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    # --- Состояние ---

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Все параметры и буферы по иерархическим именам."""
        state: Dict[str, np.ndarray] = OrderedDict()
        for name, param in self.named_parameters():
            state[name] = param.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Загружает значения параметров и буферов (копированием на место).

        :param state: Отображение имя -> массив
        :raises CheckpointMismatchError: Первое несовпадение имени или формы
        """
        own = self.state_dict()
        for name in sorted(set(own) | set(state)):
            if name not in state:
                raise CheckpointMismatchError(f"tensor '{name}' is missing from checkpoint")
            if name not in own:
                raise CheckpointMismatchError(f"unexpected tensor '{name}' in checkpoint")
            if own[name].shape != state[name].shape:
                raise CheckpointMismatchError(
                    f"tensor '{name}' has shape {state[name].shape} in checkpoint, model expects {own[name].shape}")
        for name, target in own.items():
            target[...] = state[name]


class ModuleList(Module):
    """Последовательность подмодулей с именами 0, 1, 2, ..."""

    def __init__(self, modules: Optional[Sequence[Module]] = None):
        super().__init__()
        self._items: List[Module] = []
        for module in modules or []:
            self.append(module)

    def append(self, module: Module) -> None:
        self.add_module(str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)


class ParameterList(Module):
    """Последовательность параметров с именами 0, 1, 2, ..."""

    def __init__(self, params: Optional[Sequence[Parameter]] = None):
        super().__init__()
        self._items: List[Parameter] = []
        for param in params or []:
            setattr(self, str(len(self._items)), param)
            self._items.append(param)

    def __getitem__(self, index: int) -> Parameter:
        return self._items[index]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)
