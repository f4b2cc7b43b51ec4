"""
Проверка градиентов центральными конечными разностями.

Выход операции сворачивается в скаляр случайной проекцией Σ out ⊙ R,
аналитический градиент сравнивается с численным на случайном подмножестве
элементов каждого входа. Все проверки выполняются в float64.

Набор именованных проверок GRADCHECK_SUITE используется тестами
и подкомандой CLI gradcheck.
"""

# Стандартные библиотеки
import logging
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core import functional as F
from src.core.tensor import Tensor, no_grad, precision
from src.domain.errors import ContractError
from src.domain.state import EncoderOutputs, GradCheckResult
from src.nn.attention import MultiScaleLinearAttention, efficient_attention
from src.nn.blocks import GFEBlock, LFEBlock, PatchEmbed
from src.nn.module import Module, ParamInit
from src.nn.network import Decoder
from src.training.losses import ce_loss, dice_loss, hybrid_loss

logger = logging.getLogger(__name__)

# Параметры проверки
STEP = 1e-4
TOLERANCE = 1e-4
MAX_ENTRIES = 24

# Построитель проверки: seed -> (замыкание прямого прохода, проверяемые тензоры)
CheckBuilder = Callable[[np.random.Generator, ParamInit], Tuple[Callable[[], Tensor], Dict[str, Tensor]]]


def check_gradients(forward: Callable[[], Tensor], tensors: Dict[str, Tensor], rng: np.random.Generator,
                    check: str = "custom", seed: int = 0, step: float = STEP, tol: float = TOLERANCE,
                    max_entries: int = MAX_ENTRIES) -> List[GradCheckResult]:
    """
    Сравнивает аналитические градиенты с центральными разностями.

    :param forward: Замыкание, строящее выход по текущим значениям tensors
    :param tensors: Имя -> тензор, по которому проверяется градиент
    :param rng: Источник случайной проекции и выбора элементов
    :return: Результат по каждому тензору
    """
    for tensor in tensors.values():
        tensor.requires_grad = True
        tensor.zero_grad()

    out = forward()
    projection = rng.standard_normal(out.shape)
    (out * Tensor(projection)).sum().backward()
    analytic = {name: t.grad.copy() for name, t in tensors.items()}

    def scalar() -> float:
        with no_grad():
            return float(np.sum(forward().data * projection))

    results: List[GradCheckResult] = []
    for name, tensor in tensors.items():
        flat = tensor.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, max_entries), replace=False)
        numeric = np.empty(len(picks))
        for n, idx in enumerate(picks):
            original = flat[idx]
            flat[idx] = original + step
            upper = scalar()
            flat[idx] = original - step
            lower = scalar()
            flat[idx] = original
            numeric[n] = (upper - lower) / (2.0 * step)
        expected = analytic[name].reshape(-1)[picks]
        scale = max(np.linalg.norm(expected), np.linalg.norm(numeric), 1e-8)
        rel_error = float(np.linalg.norm(expected - numeric) / scale)
        results.append(GradCheckResult(check=check, seed=seed, tensor=name, rel_error=rel_error,
                                       passed=rel_error <= tol))
    return results


def _randn(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _with_parameters(module: Module, inputs: Dict[str, Tensor]) -> Dict[str, Tensor]:
    tensors = dict(inputs)
    tensors.update(module.named_parameters())
    return tensors


# ========================================
# НАБОР ПРОВЕРОК
# ========================================

def _elementwise(rng: np.random.Generator, init: ParamInit):
    a, b = _randn(rng, 3, 4), _randn(rng, 3, 4)
    return lambda: F.gelu(a * b + a) - F.exp(b * 0.5), {"a": a, "b": b}


def _division_log(rng: np.random.Generator, init: ParamInit):
    a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True)
    return lambda: F.log(a / b), {"a": a, "b": b}


def _reductions(rng: np.random.Generator, init: ParamInit):
    a = _randn(rng, 2, 3, 4)
    return lambda: F.mean(F.square(a), axis=(0, 2), keepdims=True) + F.sum(a, axis=1).sum(), {"a": a}


def _relu(rng: np.random.Generator, init: ParamInit):
    # Значения держатся вдали от излома
    values = rng.uniform(0.1, 1.0, (4, 5)) * rng.choice([-1.0, 1.0], (4, 5))
    a = Tensor(values, requires_grad=True)
    return lambda: F.relu(a), {"a": a}


def _matmul(rng: np.random.Generator, init: ParamInit):
    a, b = _randn(rng, 2, 3, 4), _randn(rng, 4, 5)
    return lambda: F.matmul(a, b), {"a": a, "b": b}


def _softmax(rng: np.random.Generator, init: ParamInit):
    a = _randn(rng, 3, 5)
    return lambda: F.softmax(a, axis=0) + F.softmax(a, axis=-1), {"a": a}


def _layout(rng: np.random.Generator, init: ParamInit):
    a = _randn(rng, 1, 16, 8)
    def forward() -> Tensor:
        parts = F.split(F.tokens_to_map(a), 2, axis=1)
        return F.map_to_tokens(F.concat([parts[1] * 2.0, parts[0]], axis=1))
    return forward, {"a": a}


def _conv2d(rng: np.random.Generator, init: ParamInit):
    x, w, b = _randn(rng, 2, 4, 5, 5), _randn(rng, 6, 4, 3, 3), _randn(rng, 6)
    return lambda: F.conv2d(x, w, b, stride=1, pad=1), {"x": x, "w": w, "b": b}


def _conv2d_strided_grouped(rng: np.random.Generator, init: ParamInit):
    x, w = _randn(rng, 1, 4, 6, 6), _randn(rng, 6, 2, 2, 2)
    return lambda: F.conv2d(x, w, stride=2, pad=0, groups=2), {"x": x, "w": w}


def _conv2d_depthwise(rng: np.random.Generator, init: ParamInit):
    x, w, b = _randn(rng, 2, 3, 6, 6), _randn(rng, 3, 1, 5, 5), _randn(rng, 3)
    return lambda: F.conv2d(x, w, b, pad=2, groups=3), {"x": x, "w": w, "b": b}


def _upsample(rng: np.random.Generator, init: ParamInit):
    x = _randn(rng, 1, 2, 3, 4)
    return lambda: F.bilinear_upsample2x(x), {"x": x}


def _batchnorm(rng: np.random.Generator, init: ParamInit):
    x, gamma, beta = _randn(rng, 3, 4, 3, 3), _randn(rng, 4), _randn(rng, 4)
    running_mean, running_var = np.zeros(4), np.ones(4)
    forward = lambda: F.batchnorm2d(x, gamma, beta, running_mean, running_var, training=True)  # noqa: E731
    return forward, {"x": x, "gamma": gamma, "beta": beta}


def _batchnorm_eval(rng: np.random.Generator, init: ParamInit):
    x, gamma, beta = _randn(rng, 2, 3, 3, 3), _randn(rng, 3), _randn(rng, 3)
    running_mean, running_var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    forward = lambda: F.batchnorm2d(x, gamma, beta, running_mean, running_var, training=False)  # noqa: E731
    return forward, {"x": x, "gamma": gamma, "beta": beta}


def _layernorm(rng: np.random.Generator, init: ParamInit):
    x, gamma, beta = _randn(rng, 2, 5, 6), _randn(rng, 6), _randn(rng, 6)
    return lambda: F.layernorm(x, gamma, beta), {"x": x, "gamma": gamma, "beta": beta}


def _efficient_attention(rng: np.random.Generator, init: ParamInit):
    q, k, v = _randn(rng, 2, 8, 4), _randn(rng, 2, 8, 4), _randn(rng, 2, 8, 4)
    return lambda: efficient_attention(q, k, v), {"q": q, "k": k, "v": v}


def _msla(rng: np.random.Generator, init: ParamInit):
    module = MultiScaleLinearAttention(16, 4, [3, 5, 7, 9], init)
    _scale_parameters(module, rng)
    x = _randn(rng, 1, 16, 16)
    return lambda: module(x), _with_parameters(module, {"x": x})


def _patch_embed(rng: np.random.Generator, init: ParamInit):
    module = PatchEmbed(3, 8, 4, init)
    _scale_parameters(module, rng)
    x = _randn(rng, 1, 3, 8, 8)
    return lambda: module(x), _with_parameters(module, {"x": x})


def _lfe(rng: np.random.Generator, init: ParamInit):
    module = LFEBlock(8, init)
    _scale_parameters(module, rng)
    x = _randn(rng, 1, 8, 6, 6)
    return lambda: module(x), _with_parameters(module, {"x": x})


def _gfe(rng: np.random.Generator, init: ParamInit):
    module = GFEBlock(16, 4, [3, 5, 7, 9], init)
    _scale_parameters(module, rng)
    x = _randn(rng, 1, 16, 16)
    return lambda: module(x), _with_parameters(module, {"x": x})


def _decoder(rng: np.random.Generator, init: ParamInit):
    widths = [4, 8, 16, 32]
    module = Decoder(widths, 2, init)
    _scale_parameters(module, rng)
    features = {f"s{i + 1}": _randn(rng, 1, widths[i], 8 >> i, 8 >> i) for i in range(4)}
    forward = lambda: module(EncoderOutputs(**features))  # noqa: E731
    return forward, _with_parameters(module, features)


def _losses(rng: np.random.Generator, init: ParamInit):
    logits = _randn(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, (2, 4, 4))
    def forward() -> Tensor:
        probs = F.softmax(logits, axis=1)
        return dice_loss(probs, labels) + ce_loss(probs, labels) + hybrid_loss(probs, labels, 0.6)
    return forward, {"logits": logits}


def _scale_parameters(module: Module, rng: np.random.Generator) -> None:
    """Заменяет малые стартовые веса на значения порядка 1, чтобы разности были информативны."""
    for _, param in module.named_parameters():
        param.data[...] = rng.standard_normal(param.shape) * 0.5


GRADCHECK_SUITE: Dict[str, CheckBuilder] = {
    "elementwise": _elementwise,
    "division_log": _division_log,
    "reductions": _reductions,
    "relu": _relu,
    "matmul": _matmul,
    "softmax": _softmax,
    "layout": _layout,
    "conv2d": _conv2d,
    "conv2d_strided_grouped": _conv2d_strided_grouped,
    "conv2d_depthwise": _conv2d_depthwise,
    "upsample": _upsample,
    "batchnorm": _batchnorm,
    "batchnorm_eval": _batchnorm_eval,
    "layernorm": _layernorm,
    "efficient_attention": _efficient_attention,
    "msla": _msla,
    "patch_embed": _patch_embed,
    "lfe": _lfe,
    "gfe": _gfe,
    "decoder": _decoder,
    "losses": _losses,
}


def run_check(name: str, seed: int) -> List[GradCheckResult]:
    """
    Выполняет одну именованную проверку в float64.

    :raises ContractError: Неизвестное имя проверки
    """
    if name not in GRADCHECK_SUITE:
        raise ContractError(f"unknown gradcheck '{name}', expected 'all' or one of {sorted(GRADCHECK_SUITE)}")
    with precision("float64"):
        rng = np.random.Generator(np.random.Philox(key=seed))
        forward, tensors = GRADCHECK_SUITE[name](rng, ParamInit(seed))
        return check_gradients(forward, tensors, rng, check=name, seed=seed)


def run_suite(names: Sequence[str], seeds: Iterable[int]) -> List[GradCheckResult]:
    """Выполняет проверки по всем именам и зёрнам; 'all' раскрывается в полный набор."""
    selected = list(GRADCHECK_SUITE) if "all" in names else list(names)
    seeds = list(seeds)
    results: List[GradCheckResult] = []
    for name in selected:
        for seed in seeds:
            batch = run_check(name, seed)
            results.extend(batch)
            worst = max(r["rel_error"] for r in batch)
            logger.debug(f"gradcheck {name} seed={seed}: worst rel_error={worst:.2e}")
    return results
