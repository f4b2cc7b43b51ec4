"""
Численные ядра движка: все дифференцируемые операции над Tensor.

Каждая операция - наследник Function с forward/backward на numpy.
Публичные функции модуля (add, matmul, conv2d, softmax, ...) - тонкие
обёртки над Function.apply, которыми пользуются слои и функции потерь.
"""

# Стандартные библиотеки
import math
from typing import List, Optional, Sequence, Tuple, Union

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.tensor import Function, Tensor, as_tensor, report_macs
from src.domain.errors import ContractError, DimensionError

Axis = Optional[Union[int, Tuple[int, ...]]]

# Константы нормализаций
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1
LAYERNORM_EPS = 1e-6

# Константа приближения GELU через tanh
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ========================================
# ПОЭЛЕМЕНТНЫЕ ОПЕРАЦИИ
# ========================================

class Add(Function):
    tag = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Mul(Function):
    tag = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    tag = "div"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


class Neg(Function):
    tag = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray):
        return (-grad,)


class Exp(Function):
    tag = "exp"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * self.out,)


class Log(Function):
    tag = "log"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray):
        return (grad / self.a,)


class Clip(Function):
    tag = "clip"

    def forward(self, a: np.ndarray, *, low: float, high: float) -> np.ndarray:
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad: np.ndarray):
        return (grad * self.mask,)


class ReLU(Function):
    tag = "relu"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad: np.ndarray):
        # Субградиент в нуле равен 0
        return (grad * self.mask,)


class GELU(Function):
    tag = "gelu"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        self.t = np.tanh(_GELU_C * (a + _GELU_A * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad: np.ndarray):
        a, t = self.a, self.t
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * a * a)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)


def add(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(a, low=low, high=high)


def square(a: Tensor) -> Tensor:
    return Mul.apply(a, a)


def activation(x: Tensor, kind: str) -> Tensor:
    """
    Поэлементная нелинейность.

    :param x: Входной тензор
    :param kind: "relu" или "gelu" (приближение через tanh)
    :return: Тензор той же формы
    """
    if kind == "relu":
        return ReLU.apply(x)
    if kind == "gelu":
        return GELU.apply(x)
    raise ContractError(f"unknown activation '{kind}'")


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


# ========================================
# РЕДУКЦИИ И ПЕРЕСТАНОВКИ
# ========================================

class Sum(Function):
    tag = "sum"

    def forward(self, a: np.ndarray, *, axis: Axis, keepdims: bool) -> np.ndarray:
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        out = np.asarray(a.sum(axis=axis, keepdims=keepdims))
        self.out_shape = out.shape
        return out

    def backward(self, grad: np.ndarray):
        # Скалярный результат хранится в Tensor как форма (1,)
        grad = grad.reshape(self.out_shape)
        if self.axis is None:
            return (np.broadcast_to(grad, self.shape).copy(),)
        if not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % len(self.shape) for ax in axes)
            for ax in sorted(axes):
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    tag = "reshape"

    def forward(self, a: np.ndarray, *, shape: Tuple[int, ...]) -> np.ndarray:
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    tag = "transpose"

    def forward(self, a: np.ndarray, *, axes: Tuple[int, ...]) -> np.ndarray:
        self.axes = axes
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, grad: np.ndarray):
        return (grad.transpose(np.argsort(self.axes)),)


class Concat(Function):
    tag = "concat"

    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Slice(Function):
    tag = "slice"

    def forward(self, a: np.ndarray, *, start: int, stop: int, axis: int) -> np.ndarray:
        self.shape = a.shape
        self.index = tuple(slice(start, stop) if ax == axis % a.ndim else slice(None) for ax in range(a.ndim))
        return np.ascontiguousarray(a[self.index])

    def backward(self, grad: np.ndarray):
        full = np.zeros(self.shape, dtype=grad.dtype)
        full[self.index] = grad
        return (full,)


def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(a: Tensor, parts: int, axis: int) -> List[Tensor]:
    """
    Делит тензор на равные части вдоль оси.

    :raises DimensionError: Если размер оси не делится на число частей
    """
    extent = a.shape[axis]
    if extent % parts:
        raise DimensionError(f"axis {axis} of extent {extent} is not divisible into {parts} parts")
    step = extent // parts
    return [Slice.apply(a, start=i * step, stop=(i + 1) * step, axis=axis) for i in range(parts)]


def tokens_to_map(x: Tensor, grid: Optional[Tuple[int, int]] = None) -> Tensor:
    """
    Токены B×N×C -> карта B×C×H×W.

    :param grid: Сетка (H, W); без неё N должно быть полным квадратом
    :raises DimensionError: Если H·W != N или N не полный квадрат
    """
    batch, tokens, channels = x.shape
    if grid is None:
        side = math.isqrt(tokens)
        if side * side != tokens:
            raise DimensionError(f"token count {tokens} is not a perfect square")
        grid = (side, side)
    height, width = grid
    if height * width != tokens:
        raise DimensionError(f"grid {height}×{width} does not hold {tokens} tokens")
    return transpose(x, (0, 2, 1)).reshape(batch, channels, height, width)


def map_to_tokens(x: Tensor) -> Tensor:
    """Карта B×C×H×W -> токены B×(H·W)×C."""
    batch, channels, height, width = x.shape
    return transpose(x.reshape(batch, channels, height * width), (0, 2, 1))


# ========================================
# МАТРИЧНОЕ УМНОЖЕНИЕ И SOFTMAX
# ========================================

class MatMul(Function):
    tag = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        out = np.matmul(a, b)
        report_macs(self.tag, out.size * a.shape[-1])
        return out

    def backward(self, grad: np.ndarray):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Матричное произведение (с пакетными осями слева).

    :param a: Тензор ...×M×K
    :param b: Тензор ...×K×P
    :return: Тензор ...×M×P
    :raises DimensionError: Если внутренние размерности не совпадают
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul expects at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


class Softmax(Function):
    tag = "softmax"

    def forward(self, a: np.ndarray, *, axis: int) -> np.ndarray:
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int) -> Tensor:
    """
    Softmax вдоль оси (с вычитанием максимума для устойчивости).

    :raises DimensionError: Если ось вне диапазона
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} is invalid for rank {x.ndim}")
    return Softmax.apply(x, axis=axis)


# ========================================
# СВЁРТКА И ИНТЕРПОЛЯЦИЯ
# ========================================

class Conv2d(Function):
    tag = "conv2d"

    def forward(self, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, *,
                stride: int, pad: int, groups: int) -> np.ndarray:
        batch, c_in, height, width = x.shape
        c_out, c_group, kh, kw = w.shape
        out_h = (height + 2 * pad - kh) // stride + 1
        out_w = (width + 2 * pad - kw) // stride + 1
        self.geometry = (batch, c_in, height, width, c_out, c_group, kh, kw, out_h, out_w, stride, pad, groups)
        self.has_bias = b is not None
        self.w = w

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        self.xp = xp
        self.depthwise = c_group == 1 and c_out == groups

        out = np.zeros((batch, c_out, out_h, out_w), dtype=x.dtype)
        if self.depthwise:
            for i in range(kh):
                for j in range(kw):
                    out += self._window(xp, i, j) * w[:, 0, i, j][None, :, None, None]
        else:
            w_g = w.reshape(groups, c_out // groups, c_group, kh, kw)
            acc = out.reshape(batch, groups, c_out // groups, out_h * out_w)
            for i in range(kh):
                for j in range(kw):
                    xs = self._window(xp, i, j).reshape(batch, groups, c_group, out_h * out_w)
                    acc += np.matmul(w_g[None, :, :, :, i, j], xs)
            out = acc.reshape(batch, c_out, out_h, out_w)

        if b is not None:
            out += b[None, :, None, None]
        report_macs(self.tag, batch * c_out * out_h * out_w * c_group * kh * kw)
        return out

    def _window(self, xp: np.ndarray, i: int, j: int) -> np.ndarray:
        *_, out_h, out_w, stride, _, _ = self.geometry
        return xp[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]

    def backward(self, grad: np.ndarray):
        batch, c_in, height, width, c_out, c_group, kh, kw, out_h, out_w, stride, pad, groups = self.geometry
        xp, w = self.xp, self.w
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)

        if self.depthwise:
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (grad * self._window(xp, i, j)).sum(axis=(0, 2, 3))
                    gxp[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                        grad * w[:, 0, i, j][None, :, None, None]
        else:
            og = c_out // groups
            w_g = w.reshape(groups, og, c_group, kh, kw)
            g_g = grad.reshape(batch, groups, og, out_h * out_w)
            gw_g = gw.reshape(groups, og, c_group, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    xs = self._window(xp, i, j).reshape(batch, groups, c_group, out_h * out_w)
                    gw_g[:, :, :, i, j] = np.matmul(g_g, np.swapaxes(xs, -1, -2)).sum(axis=0)
                    gxs = np.matmul(np.swapaxes(w_g[None, :, :, :, i, j], -1, -2), g_g)
                    gxp[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                        gxs.reshape(batch, c_in, out_h, out_w)

        gx = gxp[:, :, pad:pad + height, pad:pad + width] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """
    Двумерная взаимная корреляция (без переворота ядра) с нулевым дополнением.

    :param x: Вход B×Cin×H×W
    :param w: Веса Cout×(Cin/groups)×k×k
    :param bias: Смещение длины Cout (необязательно)
    :param stride: Шаг
    :param pad: Нулевое дополнение с каждой стороны
    :param groups: Число групп (groups == Cin - depth-wise)
    :return: Выход B×Cout×H'×W'
    :raises DimensionError: При несовместимых формах или нецелом размере выхода
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    _, c_in, height, width = x.shape
    c_out, c_group, kh, kw = w.shape
    if c_in % groups or c_out % groups:
        raise DimensionError(f"channels {c_in}->{c_out} are not divisible by groups={groups}")
    if c_group != c_in // groups:
        raise DimensionError(f"weight expects {c_group} input channels per group, input provides {c_in // groups}")
    for extent, k in ((height, kh), (width, kw)):
        span = extent + 2 * pad - k
        if span < 0 or span % stride:
            raise DimensionError(
                f"non-integral output extent: ({extent} + 2*{pad} - {k}) / {stride} + 1")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
    inputs = (x, w) if bias is None else (x, w, bias)
    return Conv2d.apply(*inputs, stride=stride, pad=pad, groups=groups)


def _upsample_matrix(extent: int, dtype) -> np.ndarray:
    """Матрица 2n×n билинейной интерполяции с центрами пикселей в +0.5."""
    matrix = np.zeros((2 * extent, extent), dtype=dtype)
    for o in range(2 * extent):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), extent - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, extent - 1)
        frac = src - lo
        matrix[o, lo] += 1.0 - frac
        matrix[o, hi] += frac
    return matrix


class BilinearUpsample2x(Function):
    tag = "upsample2x"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.rows = _upsample_matrix(x.shape[2], x.dtype)
        self.cols = _upsample_matrix(x.shape[3], x.dtype)
        return np.matmul(np.matmul(self.rows, x), self.cols.T)

    def backward(self, grad: np.ndarray):
        return (np.matmul(np.matmul(self.rows.T, grad), self.cols),)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """
    Билинейное увеличение в 2 раза (половинные центры пикселей, зажим по краям).

    :param x: Вход B×C×H×W
    :return: Выход B×C×2H×2W
    """
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample2x expects a 4-D input, got {x.shape}")
    return BilinearUpsample2x.apply(x)


# ========================================
# НОРМАЛИЗАЦИИ
# ========================================

class BatchNorm2d(Function):
    tag = "batchnorm2d"

    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, *,
                running_mean: np.ndarray, running_var: np.ndarray, training: bool,
                momentum: float, eps: float) -> np.ndarray:
        self.gamma = gamma
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            unbiased = var * count / max(count - 1, 1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        else:
            mu, var = running_mean, running_var
        self.training = training
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - mu.astype(x.dtype)[None, :, None, None]) * self.inv_std[None, :, None, None]
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad: np.ndarray):
        ggamma = (grad * self.xhat).sum(axis=(0, 2, 3))
        gbeta = grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if not self.training:
            return gxhat * inv_std, ggamma, gbeta
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * self.xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = inv_std / count * (count * gxhat - s1 - self.xhat * s2)
        return gx, ggamma, gbeta


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = BATCHNORM_MOMENTUM, eps: float = BATCHNORM_EPS) -> Tensor:
    """
    Пакетная нормализация по B×H×W для каждого канала.

    В режиме обучения использует статистики пакета и обновляет скользящие
    средние (на месте), в режиме оценки - накопленные статистики.

    :raises DimensionError: Если число каналов не совпадает с длиной параметров
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d channels mismatch: input {x.shape}, gamma {gamma.shape}")
    return BatchNorm2d.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                             training=training, momentum=momentum, eps=eps)


class LayerNorm(Function):
    tag = "layernorm"

    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, *, eps: float) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad: np.ndarray):
        lead = tuple(range(grad.ndim - 1))
        ggamma = (grad * self.xhat).sum(axis=lead)
        gbeta = grad.sum(axis=lead)
        gxhat = grad * self.gamma
        width = grad.shape[-1]
        s1 = gxhat.sum(axis=-1, keepdims=True)
        s2 = (gxhat * self.xhat).sum(axis=-1, keepdims=True)
        gx = self.inv_std / width * (width * gxhat - s1 - self.xhat * s2)
        return gx, ggamma, gbeta


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """
    Нормализация по последней оси для каждой позиции.

    :raises DimensionError: Если последняя размерность не равна длине параметров
    """
    if gamma.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm width mismatch: input {x.shape}, gamma {gamma.shape}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)
