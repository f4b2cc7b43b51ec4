"""
Плотные тензоры и обратный режим автоматического дифференцирования.

Модуль содержит:
- Tensor: узел вычислительного графа (значение, градиент, родители, тег операции)
- Function: базовый класс дифференцируемой операции (forward/backward на numpy)
- Глобальный режим точности (float64 для проверки градиентов, float32 для обучения)
- Контексты no_grad и учёт умножений-накоплений (MAC) для профилировщика
"""

# Стандартные библиотеки
import logging
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.domain.errors import ContractError, NonFiniteError

logger = logging.getLogger(__name__)

# Поддерживаемые режимы точности
PRECISIONS: Dict[str, Any] = {
    "float32": np.float32,
    "float64": np.float64,
}

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class _EngineState:
    """Глобальное состояние движка (точность, запись графа, проверка конечности)."""

    def __init__(self) -> None:
        self.dtype: Any = np.float32
        self.grad_enabled: bool = True
        self.check_finite: bool = True
        self.mac_listeners: List[Callable[[str, int], None]] = []


_STATE = _EngineState()


def set_precision(name: str) -> None:
    """
    Устанавливает точность по умолчанию для всех новых тензоров.

    :param name: "float32" или "float64"
    :raises ContractError: Если точность не поддерживается
    """
    if name not in PRECISIONS:
        raise ContractError(f"unsupported precision '{name}', expected one of {sorted(PRECISIONS)}")
    _STATE.dtype = PRECISIONS[name]


def get_dtype() -> Any:
    """Текущий dtype тензоров."""
    return _STATE.dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Временно переключает точность вычислений."""
    previous = _STATE.dtype
    set_precision(name)
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Отключает запись графа (оценка, инференс, профилирование)."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Включает или отключает проверку NaN/Inf после каждой операции."""
    previous = _STATE.check_finite
    _STATE.check_finite = enabled
    try:
        yield
    finally:
        _STATE.check_finite = previous


def is_grad_enabled() -> bool:
    return _STATE.grad_enabled


def report_macs(op: str, macs: int) -> None:
    """
    Сообщает подписчикам число умножений-накоплений, выполненных операцией.

    :param op: Тег операции (conv2d, matmul)
    :param macs: Количество умножений-накоплений
    """
    for listener in _STATE.mac_listeners:
        listener(op, int(macs))


@contextmanager
def mac_listener(callback: Callable[[str, int], None]) -> Iterator[None]:
    """Подписывает callback на отчёты report_macs на время контекста."""
    _STATE.mac_listeners.append(callback)
    try:
        yield
    finally:
        _STATE.mac_listeners.remove(callback)


class Function:
    """
    Базовый класс дифференцируемой операции.

    Наследники реализуют forward (массивы numpy -> массив numpy) и backward
    (градиент по выходу -> кортеж градиентов по входам, None для входов
    без градиента). Промежуточные значения для backward сохраняются в self.
    """

    tag = "op"

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.tag}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.tag}")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        """
        Выполняет операцию и, если нужно, записывает её в граф.

        :param inputs: Входные тензоры
        :param kwargs: Неградиентные параметры операции
        :return: Выходной тензор
        :raises NonFiniteError: Если результат содержит NaN/Inf
        """
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)

        if _STATE.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(cls.tag)

        requires_grad = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=requires_grad, _keep_dtype=True)
        if requires_grad:
            result.parents = inputs
            result.op = cls.tag
            result._fn = fn
        return result

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Суммирует градиент по осям, размноженным при broadcasting."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    Плотный n-мерный тензор и узел вычислительного графа (DiffNode).

    Хранит значение (numpy, row-major), накопленный градиент той же формы,
    ссылки на входы породившей операции и её тег.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 _keep_dtype: bool = False):
        """
        :param data: Значения тензора
        :param requires_grad: Нужен ли градиент по этому тензору
        :param name: Необязательное имя (для параметров модели)
        """
        array = np.asarray(data)
        if not _keep_dtype or array.dtype not in (np.float32, np.float64):
            array = array.astype(_STATE.dtype, copy=False)
        if array.ndim == 0:
            array = array.reshape(1)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.parents: Tuple["Tensor", ...] = ()
        self.op: str = "leaf"
        self._fn: Optional[Function] = None
        self._grad: Optional[np.ndarray] = None

    # --- Метаданные ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> Any:
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Накопленный градиент (нули, пока backward не вызывался)."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        self._grad = value

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _keep_dtype=True)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # --- Обратный проход ---

    def _accumulate(self, grad: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self._grad += grad

    def backward(self) -> None:
        """
        Запускает обратный проход от скалярного корня.

        Градиенты накапливаются аддитивно (учёт разветвлений графа),
        обход - в обратном топологическом порядке.

        :raises ContractError: Если корень не скаляр
        """
        if self.size != 1:
            raise ContractError(f"backward() requires a scalar root, got shape {self.shape}")

        order = _topological_order(self)
        self._accumulate(np.ones_like(self.data))

        for node in reversed(order):
            if node._fn is None or node._grad is None:
                continue
            input_grads = node._fn.backward(node._grad)
            for parent, g in zip(node.parents, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent._accumulate(g)
            # Промежуточные узлы больше не нужны: освобождаем ссылки на граф
            if node is not self and node.parents:
                node._grad = None
            node._fn = None
            node.parents = ()

    # --- Операторы (реализации в src.core.functional) ---

    def __add__(self, other: Any) -> "Tensor":
        from src.core import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from src.core import functional as F
        return F.add(self, F.neg(as_tensor(other)))

    def __rsub__(self, other: Any) -> "Tensor":
        from src.core import functional as F
        return F.add(as_tensor(other), F.neg(self))

    def __neg__(self) -> "Tensor":
        from src.core import functional as F
        return F.neg(self)

    def __mul__(self, other: Any) -> "Tensor":
        from src.core import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from src.core import functional as F
        return F.div(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from src.core import functional as F
        return F.matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        from src.core import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from src.core import functional as F
        return F.transpose(self, axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from src.core import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from src.core import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Any) -> Tensor:
    """Оборачивает число или массив в тензор-константу."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Итеративная топологическая сортировка (граф модели глубже лимита рекурсии)."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order
