"""
Бинарные форматы MTEN (один тензор) и MCKP (чекпоинт модели).

MTEN: "MTEN" | version u8 = 1 | dtype u8 (0=f32, 1=f64) | rank u8 | reserved u8 = 0
      | dims: rank × u32 LE | payload: значения row-major LE.
MCKP: "MCKP" | version u8 | count u32 LE | записи (len u16 LE, имя UTF-8, запись MTEN),
      имена отсортированы лексикографически.
"""

# Стандартные библиотеки
import logging
import os
import struct
from typing import Dict, Tuple, Union

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.tensor import Tensor
from src.domain.errors import FormatError

logger = logging.getLogger(__name__)

MTEN_MAGIC = b"MTEN"
MCKP_MAGIC = b"MCKP"
MTEN_VERSION = 1
MCKP_VERSION = 1
MAX_RANK = 8

# Код dtype -> little-endian dtype numpy
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {4: 0, 8: 1}

_MTEN_HEADER = struct.Struct("<4sBBBB")
_MCKP_HEADER = struct.Struct("<4sBI")

ArrayOrTensor = Union[np.ndarray, Tensor]


def _as_array(value: ArrayOrTensor) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def mten_encode(value: ArrayOrTensor) -> bytes:
    """
    Кодирует тензор в запись MTEN.

    :raises FormatError: Неподдерживаемый dtype или ранг больше 8
    """
    array = _as_array(value)
    code = _CODES.get(array.dtype.itemsize) if array.dtype.kind == "f" else None
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}, expected float32 or float64")
    if array.ndim > MAX_RANK:
        raise FormatError(f"rank {array.ndim} exceeds the maximum of {MAX_RANK}")
    header = _MTEN_HEADER.pack(MTEN_MAGIC, MTEN_VERSION, code, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def mten_decode(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    Декодирует запись MTEN, начиная с offset.

    :return: (массив, смещение сразу после записи)
    :raises FormatError: С указанием смещения проблемного байта
    """
    if len(buffer) - offset < _MTEN_HEADER.size:
        raise FormatError("truncated MTEN header", offset)
    magic, version, code, rank, reserved = _MTEN_HEADER.unpack_from(buffer, offset)
    if magic != MTEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MTEN_MAGIC!r}", offset)
    if version != MTEN_VERSION:
        raise FormatError(f"unsupported MTEN version {version}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unsupported dtype code {code}", offset + 5)
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds the maximum of {MAX_RANK}", offset + 6)
    if reserved != 0:
        raise FormatError(f"reserved byte must be 0, got {reserved}", offset + 7)
    cursor = offset + _MTEN_HEADER.size
    if len(buffer) - cursor < 4 * rank:
        raise FormatError("truncated MTEN dimensions", cursor)
    shape = struct.unpack_from(f"<{rank}I", buffer, cursor)
    cursor += 4 * rank

    dtype = _DTYPES[code]
    length = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buffer) - cursor < length:
        raise FormatError(f"truncated payload: expected {length} bytes, found {len(buffer) - cursor}", cursor)
    array = np.frombuffer(buffer, dtype=dtype, count=length // dtype.itemsize, offset=cursor)
    array = array.astype(dtype.newbyteorder("="), copy=True).reshape(shape)
    return array, cursor + length


def mten_write(value: ArrayOrTensor, path: str) -> None:
    """Записывает тензор в файл MTEN."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(mten_encode(value))


def mten_read(path: str) -> np.ndarray:
    """
    Читает файл MTEN целиком.

    :raises FormatError: Повреждённый заголовок, обрезанные данные или лишние байты
    """
    with open(path, "rb") as f:
        buffer = f.read()
    array, end = mten_decode(buffer)
    if end != len(buffer):
        raise FormatError(f"{len(buffer) - end} trailing bytes after MTEN record", end)
    return array


def checkpoint_encode(state: Dict[str, np.ndarray]) -> bytes:
    """Кодирует состояние модели в MCKP (имена по возрастанию)."""
    chunks = [_MCKP_HEADER.pack(MCKP_MAGIC, MCKP_VERSION, len(state))]
    for name in sorted(state):
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(mten_encode(state[name]))
    return b"".join(chunks)


def checkpoint_decode(buffer: bytes) -> Dict[str, np.ndarray]:
    """
    :raises FormatError: Повреждённый контейнер, повтор имени или нарушение сортировки
    """
    if len(buffer) < _MCKP_HEADER.size:
        raise FormatError("truncated MCKP header", 0)
    magic, version, count = _MCKP_HEADER.unpack_from(buffer, 0)
    if magic != MCKP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MCKP_MAGIC!r}", 0)
    if version != MCKP_VERSION:
        raise FormatError(f"unsupported MCKP version {version}", 4)

    state: Dict[str, np.ndarray] = {}
    cursor = _MCKP_HEADER.size
    previous = None
    for _ in range(count):
        if len(buffer) - cursor < 2:
            raise FormatError("truncated entry name length", cursor)
        (length,) = struct.unpack_from("<H", buffer, cursor)
        cursor += 2
        if len(buffer) - cursor < length:
            raise FormatError("truncated entry name", cursor)
        try:
            name = buffer[cursor:cursor + length].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", cursor) from None
        if previous is not None and name <= previous:
            raise FormatError(f"entry '{name}' breaks the sorted unique name order", cursor)
        cursor += length
        state[name], cursor = mten_decode(buffer, cursor)
        previous = name
    if cursor != len(buffer):
        raise FormatError(f"{len(buffer) - cursor} trailing bytes after the last entry", cursor)
    return state


def save_checkpoint(state: Dict[str, np.ndarray], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(checkpoint_encode(state))
    logger.debug(f"Checkpoint with {len(state)} tensors written to {path}")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return checkpoint_decode(f.read())
