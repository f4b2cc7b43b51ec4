"""
Главная точка входа MSLAU-Net.

Командная строка для генерации синтетических данных, обучения, оценки,
инференса, бенчмарка внимания, проверки градиентов, извлечения карт
внимания и подсчёта параметров/FLOPs.

Коды возврата: 0 - успех, 1 - ошибка контракта/конфигурации/аргументов,
2 - ошибка ввода-вывода или формата файла.
"""

# Стандартные библиотеки
import argparse
import os
import sys
import traceback
from typing import List, Optional, Sequence

_THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _pin_threads(argv: Sequence[str]) -> None:
    """Бенчмарк по умолчанию однопоточный; переменные BLAS действуют только до импорта numpy."""
    if not argv or argv[0] != "bench":
        return
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for name in _THREAD_VARIABLES:
        os.environ[name] = threads


if __name__ == "__main__":
    _pin_threads(sys.argv[1:])

# Сторонние библиотеки
import numpy as np  # noqa: E402
from colorama import Fore, Style  # noqa: E402

# Модули текущего проекта
from src.core.gradcheck import GRADCHECK_SUITE, run_suite  # noqa: E402
from src.core.serialization import mten_read, mten_write  # noqa: E402
from src.core.tensor import Tensor, no_grad, set_precision  # noqa: E402
from src.data.loader import SegmentationDataset  # noqa: E402
from src.data.synthetic import gen_synthetic  # noqa: E402
from src.domain.config import ModelConfig, RunConfig  # noqa: E402
from src.domain.errors import ContractError, FormatError, MslauError  # noqa: E402
from src.nn.attention import attention_heatmap, msla_attention_map  # noqa: E402
from src.nn.blocks import GFEBlock  # noqa: E402
from src.nn.network import build_model  # noqa: E402
from src.training.bench import MECHANISMS, bench_attention, save_bench_csv  # noqa: E402
from src.training.profiler import FLOP_CONVENTIONS, count_flops, count_params, inference_timing  # noqa: E402
from src.training.trainer import CONFIG_SIDECAR, evaluate, infer, load_model, train_loop  # noqa: E402
from src.utils import (  # noqa: E402
    DEFAULT_RUN_CONFIG, load_config, load_model_config, save_metric_report, setup_logging)


class UsageError(Exception):
    """Неверные аргументы командной строки."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _size(text: str) -> List[int]:
    sizes = _int_list(text.lower().replace("x", ","))
    if len(sizes) not in (1, 2):
        raise argparse.ArgumentTypeError(f"expected H or HxW, got '{text}'")
    return [sizes[0], sizes[-1]]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="main.py",
        description="MSLAU-Net: multi-scale linear attention segmentation on a NumPy engine",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Примеры использования:
  python main.py gen-data --out data/desk --count 240 --size 64 --classes 4 --seed 7
  python main.py train --config config/presets/desk.cfg --data data/desk --out runs/desk --seed 0
  python main.py eval --checkpoint runs/desk/best.mckp --data data/desk_val --hd 95
  python main.py count --config config/presets/base.cfg --timing
        """
    )
    parser.add_argument("--run-config", default=DEFAULT_RUN_CONFIG,
                        help=f"YAML с настройками запуска (по умолчанию: {DEFAULT_RUN_CONFIG})")
    parser.add_argument("--log-level", default=None, help="Переопределяет system.log_level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="Сгенерировать синтетический корпус")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_size, default=[64, 64], help="H или HxW, кратные 32")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="Обучить модель")
    p.add_argument("--config", required=True, help="Файл архитектуры key=value")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recipe", default="desk", help="Рецепт из run_config.yaml")
    p.add_argument("--val-data", default=None, help="Отдельный валидационный корпус")
    p.add_argument("--epochs", type=int, default=None, help="Переопределяет число эпох рецепта")

    p = sub.add_parser("eval", help="Оценить чекпоинт")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--hd", choices=["max", "95"], default="max")
    p.add_argument("--config", default=None, help="По умолчанию model.cfg рядом с чекпоинтом")
    p.add_argument("--out", default=None, help="Каталог отчёта (по умолчанию каталог чекпоинта)")

    p = sub.add_parser("infer", help="Сегментировать изображение MTEN")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("bench", help="Бенчмарк сложности внимания")
    p.add_argument("--sizes", type=_int_list, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--out", required=True, help="Путь CSV")
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--mechanisms", default=",".join(MECHANISMS))
    p.add_argument("--threads", type=int, default=1, help="Потоки BLAS (по умолчанию 1)")
    p.add_argument("--convention", choices=sorted(FLOP_CONVENTIONS), default="mac")

    p = sub.add_parser("gradcheck", help="Проверка градиентов конечными разностями")
    p.add_argument("--module", default="all", help=f"all или одно из: {', '.join(GRADCHECK_SUITE)}")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("inspect-attn", help="Карта внимания MSLA для запроса")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--stage", type=int, default=3)
    p.add_argument("--query", required=True, help="r,c на сетке стадии")
    p.add_argument("--output", required=True)
    p.add_argument("--branch", type=int, default=None)
    p.add_argument("--head", type=int, default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("count", help="Число параметров и FLOPs")
    p.add_argument("--config", required=True)
    p.add_argument("--convention", choices=sorted(FLOP_CONVENTIONS), default="mac")
    p.add_argument("--timing", action="store_true", help="Также замерить время инференса")
    return parser


def _banner(title: str) -> None:
    print(f"\n{Fore.CYAN}{'='*70}{Style.RESET_ALL}")
    print(f"{Fore.CYAN}🚀 {title}{Style.RESET_ALL}")
    print(f"{Fore.CYAN}{'='*70}{Style.RESET_ALL}\n")


def _checkpoint_config(checkpoint: str, override: Optional[str]) -> ModelConfig:
    path = override or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), CONFIG_SIDECAR)
    return load_model_config(path)


def _read_images(path: str) -> np.ndarray:
    images = mten_read(path)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractError(f"{path}: expected a 3×H×W or B×3×H×W image tensor, got {images.shape}")
    return images


# ========================================
# ПОДКОМАНДЫ
# ========================================

def cmd_gen_data(args: argparse.Namespace) -> int:
    height, width = args.size
    gen_synthetic(args.seed, args.count, height, width, args.classes, args.out)
    print(f"{Fore.GREEN}✅ {args.count} сцен записано в {args.out}{Style.RESET_ALL}")
    return 0


def cmd_train(args: argparse.Namespace, run_config) -> int:
    config = load_model_config(args.config)
    recipe = run_config.recipe(args.recipe)
    if args.epochs is not None:
        recipe = recipe.model_copy(update={"epochs": args.epochs})
    dataset = SegmentationDataset(args.data)
    val_set = SegmentationDataset(args.val_data) if args.val_data else None
    _banner(f"Обучение MSLAU-Net ({args.recipe})")
    print(f"{Fore.GREEN}📋 Данные:{Style.RESET_ALL} {args.data} ({len(dataset)} сцен)")
    print(f"{Fore.GREEN}⚙️  Архитектура:{Style.RESET_ALL} {args.config}\n")
    summary = train_loop(config, dataset, recipe, args.out, seed=args.seed, val_set=val_set)
    print(f"\n{Fore.GREEN}✅ Лучший DSC {summary['best_dsc']:.4f} (эпоха {summary['best_epoch']}){Style.RESET_ALL}")
    print(f"{Fore.CYAN}💾 Чекпоинты:{Style.RESET_ALL} {summary['best_path']}, {summary['final_path']}\n")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _checkpoint_config(args.checkpoint, args.config)
    report = evaluate(args.checkpoint, SegmentationDataset(args.data), config, args.hd)
    save_metric_report(report, args.out or os.path.dirname(os.path.abspath(args.checkpoint)))
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    config = _checkpoint_config(args.checkpoint, args.config)
    images = mten_read(args.input)
    labels = infer(args.checkpoint, images, config)
    mten_write(labels.astype(np.float32), args.output)
    print(f"{Fore.GREEN}✅ Метки {labels.shape} записаны в {args.output}{Style.RESET_ALL}")
    return 0


def cmd_bench(args: argparse.Namespace, run_config) -> int:
    settings = run_config.bench
    mechanisms = [m.strip() for m in args.mechanisms.split(",") if m.strip()]
    report = bench_attention(mechanisms, args.sizes or settings.sizes, channels=args.channels or settings.channels,
                             reps=args.reps or settings.reps, head_width=settings.head_width,
                             convention=args.convention)
    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    save_bench_csv(report, args.out)
    print(f"{Fore.GREEN}✅ {len(report['rows'])} строк записано в {args.out}{Style.RESET_ALL}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = [args.module]
    results = run_suite(names, range(args.seeds))
    failures = [r for r in results if not r["passed"]]
    worst = max(results, key=lambda r: r["rel_error"])
    print(f"{Fore.CYAN}🔎 Проверено тензоров: {len(results)}, худшая ошибка {worst['rel_error']:.2e} "
          f"({worst['check']}/{worst['tensor']}, seed={worst['seed']}){Style.RESET_ALL}")
    for r in failures:
        print(f"{Fore.RED}❌ {r['check']} seed={r['seed']} {r['tensor']}: rel_error={r['rel_error']:.2e}{Style.RESET_ALL}")
    if failures:
        return 1
    print(f"{Fore.GREEN}✅ Все проверки градиентов пройдены{Style.RESET_ALL}")
    return 0


def cmd_inspect_attn(args: argparse.Namespace) -> int:
    config = _checkpoint_config(args.checkpoint, args.config)
    if not 1 <= args.stage <= 4:
        raise ContractError(f"stage must be 1..4, got {args.stage}")
    if config.block_pattern[args.stage - 1] != "G":
        raise ContractError(f"stage {args.stage} has no attention blocks (pattern {config.block_pattern})")
    model = load_model(config, args.checkpoint)
    stage = model.enc.stages()[args.stage - 1]
    block: GFEBlock = stage.blocks()[-1]

    images = _read_images(args.input)[:1]
    block.msla.capture = True
    model.eval()
    with no_grad():
        model.enc(Tensor(images))
    block.msla.capture = False

    height, width = block.msla.captured_grid
    try:
        row, col = (int(v) for v in args.query.split(","))
    except ValueError:
        raise ContractError(f"--query expects r,c, got '{args.query}'") from None
    if not (0 <= row < height and 0 <= col < width):
        raise ContractError(f"query ({row},{col}) is outside the {height}×{width} grid of stage {args.stage}")
    amap = msla_attention_map(block.msla, row * width + col, branch=args.branch, head=args.head)
    heatmap = attention_heatmap(amap).astype(np.float64)
    mten_write(heatmap, args.output)
    print(f"{Fore.GREEN}✅ Карта внимания {heatmap.shape} (сумма {heatmap.sum():.6f}) записана в "
          f"{args.output}{Style.RESET_ALL}")
    return 0


def cmd_count(args: argparse.Namespace) -> int:
    config = load_model_config(args.config)
    model = build_model(config, seed=0)
    height, width = config.input_size
    params = count_params(model)
    flops = count_flops(model, height, width, args.convention)
    print(f"params={params}")
    print(f"params_m={params / 1e6:.2f}")
    print(f"flops={flops}")
    print(f"gflops={flops / 1e9:.2f}")
    if args.timing:
        latency, fps = inference_timing(model, height, width)
        print(f"latency_ms={latency:.1f}")
        print(f"fps={fps:.2f}")
    return 0


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Разбирает аргументы и выполняет подкоманду.

    :param argv: Аргументы без имени программы
    :return: Код возврата (0, 1 или 2)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as e:
        print(f"{Fore.RED}❌ {e}{Style.RESET_ALL}", file=sys.stderr)
        return 1

    try:
        run_config = load_config(args.run_config)
    except FileNotFoundError:
        run_config = RunConfig()
    except MslauError as e:
        print(f"{Fore.RED}❌ Ошибка конфигурации: {e}{Style.RESET_ALL}")
        return 1
    setup_logging(args.log_level or run_config.system.log_level)
    # Проверка градиентов всегда в float64 (внутри run_check)
    set_precision(run_config.system.precision)

    handlers = {
        "gen-data": lambda: cmd_gen_data(args),
        "train": lambda: cmd_train(args, run_config),
        "eval": lambda: cmd_eval(args),
        "infer": lambda: cmd_infer(args),
        "bench": lambda: cmd_bench(args, run_config),
        "gradcheck": lambda: cmd_gradcheck(args),
        "inspect-attn": lambda: cmd_inspect_attn(args),
        "count": lambda: cmd_count(args),
    }
    try:
        return handlers[args.command]()
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}⚠️  Остановлено пользователем{Style.RESET_ALL}")
        return 1
    except FormatError as e:
        print(f"{Fore.RED}❌ Ошибка формата: {e}{Style.RESET_ALL}")
        return 2
    except MslauError as e:
        print(f"{Fore.RED}❌ {type(e).__name__}: {e}{Style.RESET_ALL}")
        return 1
    except OSError as e:
        print(f"{Fore.RED}❌ Ошибка ввода-вывода: {e}{Style.RESET_ALL}")
        return 2
    except Exception as e:
        print(f"\n{Fore.RED}❌ Критическая ошибка: {e}{Style.RESET_ALL}")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(cli_dispatch())
