from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from typing import Optional

import numpy as np


# Набор стандартных полей лог-записи, чтобы отделять их от extra
_STANDARD_LOG_KEYS = {
    "name",
    "msg",
    "args",
    "levelname",
    "levelno",
    "pathname",
    "filename",
    "module",
    "exc_info",
    "exc_text",
    "stack_info",
    "lineno",
    "funcName",
    "created",
    "msecs",
    "relativeCreated",
    "thread",
    "threadName",
    "processName",
    "process",
    "taskName",
}

_BASE_LOGGER = "rib_lab"


def _to_jsonable(value: object) -> object:
    """Привести numpy-скаляры и массивы к типам, которые понимает json."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, set)):
        return list(value)
    return value


class JsonFormatter(logging.Formatter):
    """Форматер, который выводит записи логов как JSON-строки.

    Пример записи:
    {
        "time": "2026-10-19T16:00:12.345Z",
        "level": "info",
        "logger": "rib_lab.train",
        "msg": "train_step",
        "event": "train_step",
        "step": 120,
        "loss": 0.0412,
        ...
    }
    """

    def format(self, record: logging.LogRecord) -> str:
        # Базовая структура
        log_record = {
            "time": datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z"),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }

        # Дополнительные поля (extra), переданные через logger.*(..., extra={...})
        for key, value in record.__dict__.items():
            if key not in _STANDARD_LOG_KEYS:
                # Не перезаписываем базовые ключи, если вдруг совпали
                if key not in log_record:
                    log_record[key] = _to_jsonable(value)

        if record.exc_info:
            log_record["exc"] = self.formatException(record.exc_info)

        return json.dumps(log_record, ensure_ascii=False, default=str)


def setup_logging(level: str = "INFO") -> logging.Logger:
    """Настроить корневой логгер проекта rib_lab со структурированным JSON-логированием.

    Логи пишутся в stderr: stdout занят таблицами и машинными сводками CLI.

    Parameters
    ----------
    level : str
        Минимальный уровень логирования: "DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL".

    Returns
    -------
    logging.Logger
        Логгер верхнего уровня "rib_lab".
    """
    numeric_level = getattr(logging, level.upper(), logging.INFO)

    logger = logging.getLogger(_BASE_LOGGER)

    # Если уже настроен (хендлеры есть) — не дублируем
    if logger.handlers:
        logger.setLevel(numeric_level)
        for handler in logger.handlers:
            handler.setLevel(numeric_level)
        return logger

    logger.setLevel(numeric_level)
    logger.propagate = False  # чтобы не дублировать в root-логгер

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(numeric_level)
    handler.setFormatter(JsonFormatter())

    logger.addHandler(handler)
    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Получить дочерний логгер внутри пространства rib_lab.

    Пример:
    - get_logger() → "rib_lab"
    - get_logger("cli") → "rib_lab.cli"
    - get_logger("attention") → "rib_lab.attention"
    """
    if name:
        return logging.getLogger(f"{_BASE_LOGGER}.{name}")
    return logging.getLogger(_BASE_LOGGER)


__all__ = ["JsonFormatter", "setup_logging", "get_logger"]
