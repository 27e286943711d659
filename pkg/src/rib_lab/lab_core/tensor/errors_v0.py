from __future__ import annotations

from typing import Optional, Sequence


class RibLabError(Exception):
    """Базовая ошибка библиотеки: всё, что бросает rib_lab намеренно."""


class DimensionError(RibLabError, ValueError):
    """Несовместимые формы тензоров."""

    @classmethod
    def mismatch(cls, op: str, a: Sequence[int], b: Sequence[int]) -> "DimensionError":
        return cls(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class NumericError(RibLabError, ArithmeticError):
    """NaN на входе, нефинитный loss и т.п.

    ``step`` заполняется, если ошибка пришла из итеративного цикла.
    """

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class TensorFormatError(RibLabError, ValueError):
    """Неверный magic / version / dtype_code в файле RIBT."""


class TensorLengthError(TensorFormatError):
    """Длина payload не совпадает с заголовком."""


class ImageFormatError(RibLabError, ValueError):
    """Битый или неподдерживаемый PPM."""


class ConfigError(RibLabError, ValueError):
    """Неверное значение или ключ конфигурации."""


class UnsupportedConfigurationError(ConfigError):
    """Комбинация опций, которую ядро сознательно не поддерживает."""


class ContractError(RibLabError, ValueError):
    """Нарушено предусловие API."""


class InternalError(RibLabError, RuntimeError):
    """Ошибка построения внутренних структур (баг, а не плохой ввод)."""


__all__ = [
    "RibLabError",
    "DimensionError",
    "NumericError",
    "TensorFormatError",
    "TensorLengthError",
    "ImageFormatError",
    "ConfigError",
    "UnsupportedConfigurationError",
    "ContractError",
    "InternalError",
]
