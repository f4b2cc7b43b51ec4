"""
Иерархия исключений MSLAU-Net.

Все ошибки проекта наследуются от MslauError, чтобы CLI мог однозначно
сопоставить их с кодами возврата (1 - контракт/конфигурация, 2 - ввод/вывод).
"""

# Стандартные библиотеки
from typing import Optional


class MslauError(Exception):
    """Базовый класс всех ошибок проекта."""


class DimensionError(MslauError, ValueError):
    """Несовпадение размерностей тензоров."""


class ConfigurationError(MslauError, ValueError):
    """Нарушение инварианта конфигурации модели или рецепта обучения."""


class ConfigParseError(ConfigurationError):
    """
    Синтаксическая ошибка в файле конфигурации key=value.

    :param message: Описание проблемы
    :param line_no: Номер строки (с единицы)
    """

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ContractError(MslauError, ValueError):
    """Нарушение предусловия операции."""


class FormatError(MslauError):
    """
    Повреждённый или неподдерживаемый файл MTEN/MCKP.

    :param message: Описание проблемы
    :param offset: Смещение в байтах, на котором обнаружена ошибка
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        text = message if offset is None else f"{message} (offset {offset})"
        super().__init__(text)
        self.offset = offset


class CheckpointMismatchError(MslauError):
    """Чекпоинт не соответствует архитектуре модели."""


class NonFiniteError(MslauError, ArithmeticError):
    """
    Операция выдала NaN или Inf.

    :param op: Тег операции, породившей нечисловое значение
    """

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by '{op}'")
        self.op = op


class TrainingDivergedError(MslauError):
    """Обучение остановлено: в параметре обнаружен NaN/Inf."""
