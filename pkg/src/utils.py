"""
Утилиты для проекта: логирование, загрузка конфигов, сохранение отчётов.

Этот модуль содержит вспомогательные функции для настройки окружения,
чтения YAML настроек запуска и файлов архитектуры key=value, а также
сохранения метрик в виде key=value текста и CSV.
"""

# Стандартные библиотеки
import logging
import math
import os
from typing import Dict, List

# Сторонние библиотеки
import pandas as pd
import yaml
from colorama import Fore, Style, init

# Модули текущего проекта
from src.domain.config import ModelConfig, RunConfig, parse_config
from src.domain.state import MetricReport

# Инициализация цветного вывода для консоли
init(autoreset=True)

DEFAULT_RUN_CONFIG = "config/run_config.yaml"


def setup_logging(level: str = "INFO") -> None:
    """
    Настраивает систему логирования для всего проекта.

    Устанавливает единый формат логов для всех модулей и подавляет
    избыточный вывод от сторонних библиотек.

    :param level: Уровень логирования (DEBUG, INFO, WARNING, ERROR)
    """
    logging.basicConfig(
        level=level,
        format='%(asctime)s | %(levelname)s | %(name)s | %(message)s',
        datefmt='%H:%M:%S',
        force=True,
    )
    logging.getLogger("asyncio").setLevel(logging.WARNING)


def load_config(path: str = DEFAULT_RUN_CONFIG) -> RunConfig:
    """
    Загружает настройки запуска из YAML файла.

    :param path: Путь к конфигурационному файлу
    :return: Проверенная RunConfig
    :raises FileNotFoundError: Если файл конфигурации не найден
    :raises ConfigurationError: Если содержимое не проходит валидацию
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        return RunConfig.from_dict(yaml.safe_load(f))


def load_model_config(path: str) -> ModelConfig:
    """
    Читает файл архитектуры key=value.

    :raises FileNotFoundError: Если файл не найден
    :raises ConfigParseError: Синтаксическая ошибка с номером строки
    """
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.6f}"


def report_lines(report: MetricReport) -> List[str]:
    """Детерминированные строки key=value отчёта (сначала средние, затем по классам)."""
    lines = [
        f"samples={report['samples']}",
        f"mean_dsc={_fmt(report['mean_dsc'])}",
        f"mean_hd={_fmt(report['mean_hd'])}",
        f"hd_variant={report['hd_variant']}",
        f"hd_penalties={report['hd_penalties']}",
        f"miou={_fmt(report['miou'])}",
        f"accuracy={_fmt(report['accuracy'])}",
        f"precision={_fmt(report['precision'])}",
        f"recall={_fmt(report['recall'])}",
    ]
    for k in sorted(report["per_class_dsc"]):
        lines.append(f"class={k} dsc={_fmt(report['per_class_dsc'][k])} hd={_fmt(report['per_class_hd'][k])}")
    return lines


def report_frame(report: MetricReport) -> pd.DataFrame:
    """Таблица по классам переднего плана и строка mean."""
    rows: List[Dict[str, object]] = [
        {"class": str(k), "dsc": report["per_class_dsc"][k], "hd": report["per_class_hd"][k]}
        for k in sorted(report["per_class_dsc"])
    ]
    rows.append({"class": "mean", "dsc": report["mean_dsc"], "hd": report["mean_hd"]})
    return pd.DataFrame(rows, columns=["class", "dsc", "hd"])


def save_metric_report(report: MetricReport, out_dir: str) -> str:
    """
    Сохраняет отчёт оценки в metrics.txt (key=value) и metrics.csv.

    :return: Путь к каталогу отчёта
    """
    os.makedirs(out_dir, exist_ok=True)
    text_path = os.path.join(out_dir, "metrics.txt")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write("\n".join(report_lines(report)) + "\n")
    report_frame(report).to_csv(os.path.join(out_dir, "metrics.csv"), index=False)

    # Красивый вывод в консоль
    print(f"\n{Fore.GREEN}{'='*70}{Style.RESET_ALL}")
    print(f"{Fore.GREEN}✅ Оценка завершена: {report['samples']} изображений{Style.RESET_ALL}")
    print(f"{Fore.GREEN}{'='*70}{Style.RESET_ALL}\n")
    print(f"{Fore.CYAN}📊 mean DSC:{Style.RESET_ALL} {_fmt(report['mean_dsc'])}")
    print(f"{Fore.CYAN}📏 mean HD ({report['hd_variant']}):{Style.RESET_ALL} {_fmt(report['mean_hd'])}")
    print(f"{Fore.CYAN}🧩 mIoU:{Style.RESET_ALL} {_fmt(report['miou'])}")
    print(f"{Fore.CYAN}📁 Отчёт:{Style.RESET_ALL} {text_path}\n")
    return out_dir
