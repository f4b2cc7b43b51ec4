"""
Оптимизаторы SGD (momentum, L2 в градиенте) и AdamW (отвязанное затухание весов),
а также полиномиальное расписание шага.
"""

# Стандартные библиотеки
import logging
from typing import Dict, List, Literal, Optional, Sequence

# Сторонние библиотеки
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

# Модули текущего проекта
from src.domain.config import TrainRecipe
from src.domain.errors import ContractError
from src.nn.module import Parameter

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
POLY_POWER = 0.9


class OptimState(BaseModel):
    """
    Состояние оптимизатора.

    :param slots: Слоты по индексу параметра: "v" для sgd, "m" и "v" для adamw
    :param step: Число выполненных шагов (монотонно растёт)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: Literal["sgd", "adamw"]
    lr: float = Field(gt=0)
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    slots: Dict[int, Dict[str, np.ndarray]] = {}

    @classmethod
    def from_recipe(cls, recipe: TrainRecipe) -> "OptimState":
        return cls(kind=recipe.optimizer, lr=recipe.lr, momentum=recipe.momentum,
                   weight_decay=recipe.weight_decay)


def _check_shapes(params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ContractError(f"gradient {i} has shape {g.shape}, parameter has {w.shape}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState,
             lr: Optional[float] = None) -> None:
    """
    v ← μ·v + g + wd·w;  w ← w - lr·v  (на месте).

    :raises ContractError: Если формы градиентов не совпадают с параметрами
    """
    _check_shapes(params, grads)
    lr = state.lr if lr is None else lr
    for i, (w, g) in enumerate(zip(params, grads)):
        slot = state.slots.setdefault(i, {"v": np.zeros_like(w)})
        velocity = slot["v"]
        velocity *= state.momentum
        velocity += g + state.weight_decay * w
        w -= lr * velocity
    state.step += 1


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState,
               lr: Optional[float] = None) -> None:
    """
    Моменты с поправкой смещения; w ← w - lr·(m̂/(√v̂ + ε) + wd·w)  (на месте).

    :raises ContractError: Если формы градиентов не совпадают с параметрами
    """
    _check_shapes(params, grads)
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for i, (w, g) in enumerate(zip(params, grads)):
        slot = state.slots.setdefault(i, {"m": np.zeros_like(w), "v": np.zeros_like(w)})
        m, v = slot["m"], slot["v"]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps) + state.weight_decay * w
        w -= lr * update


def poly_lr(base_lr: float, epoch: int, total_epochs: int, power: float = POLY_POWER) -> float:
    """Полиномиальное затухание: base·(1 - epoch/total)^power."""
    return base_lr * (1.0 - epoch / total_epochs) ** power


class Optimizer:
    """
    Обёртка над состоянием и параметрами модели.

    :param params: Параметры в порядке реестра
    :param state: Состояние выбранного алгоритма
    """

    def __init__(self, params: List[Parameter], state: OptimState):
        self.params = params
        self.state = state

    def step(self, lr: Optional[float] = None) -> None:
        weights = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        if self.state.kind == "sgd":
            sgd_step(weights, grads, self.state, lr)
        else:
            adamw_step(weights, grads, self.state, lr)

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()
