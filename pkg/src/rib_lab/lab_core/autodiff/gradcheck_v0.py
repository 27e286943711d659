from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from rib_lab.lab_core.autodiff.tape_v0 import Tape, Var, backward
from rib_lab.lab_core.tensor.errors_v0 import ContractError, NumericError


# f(tape, params) → скалярный Var. Должна быть детерминированной.
Objective = Callable[[Tape, Dict[str, Var]], Var]


@dataclass
class GradCheckReport:
    """Итог сравнения аналитического градиента с центральными разностями."""

    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    checked: int
    tol: float
    passed: bool

    @property
    def summary(self) -> str:
        return (
            f"passed={self.passed}, "
            f"max_rel_error={self.max_rel_error:.3e}, "
            f"tol={self.tol:.1e}, "
            f"checked={self.checked}, "
            f"worst={self.worst_param}{list(self.worst_index) if self.worst_index else ''}"
        )


def _evaluate(f: Objective, params: Dict[str, np.ndarray]) -> float:
    tape = Tape()
    out = f(tape, tape.params(params))
    value = float(np.asarray(out.value).reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError(f"grad_check: objective is not finite ({value})")
    return value


def grad_check(
    f: Objective,
    params: Dict[str, np.ndarray],
    eps: float = 1e-3,
    tol: float = 1e-3,
    coords_per_param: Optional[int] = None,
    seed: int = 0,
    floor: float = 1.0,
) -> GradCheckReport:
    """Сравнить backward с центральными конечными разностями.

    Parameters
    ----------
    f : Objective
        Функция, строящая скалярный loss на переданной ленте.
    params : dict[str, ndarray]
        Точка, в которой проверяется градиент. Не модифицируется.
    eps : float
        Шаг разностной схемы, из [1e-5, 1e-2].
    tol : float
        Порог на максимальную относительную ошибку.
    coords_per_param : int | None
        Сколько случайных координат проверять в каждом параметре
        (None: все).
    seed : int
        Seed выбора координат.
    floor : float
        Нижняя граница знаменателя: |a − n| / max(|a|, |n|, floor).

    Returns
    -------
    GradCheckReport
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ContractError(f"grad_check: eps must be in [1e-5, 1e-2], got {eps}")

    tape = Tape()
    out = f(tape, tape.params(params))
    if not np.all(np.isfinite(out.value)):
        raise NumericError("grad_check: objective is not finite")
    analytic = backward(tape, out)

    rng = np.random.default_rng(seed)
    worst = (0.0, None, None)
    checked = 0

    for name, value in params.items():
        flat_count = value.size
        if coords_per_param is None or coords_per_param >= flat_count:
            picks = np.arange(flat_count)
        else:
            picks = rng.choice(flat_count, size=coords_per_param, replace=False)

        for flat in picks:
            index = np.unravel_index(int(flat), value.shape)
            shifted = dict(params)

            plus = np.array(value, copy=True)
            plus[index] += eps
            shifted[name] = plus
            f_plus = _evaluate(f, shifted)

            minus = np.array(value, copy=True)
            minus[index] -= eps
            shifted[name] = minus
            f_minus = _evaluate(f, shifted)

            # фактический шаг в dtype параметра (для f32 он не равен eps точно)
            h = float(plus[index]) - float(minus[index])
            numeric = (f_plus - f_minus) / h
            a = float(analytic[name][index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if rel > worst[0] or worst[1] is None:
                worst = (rel, name, tuple(int(i) for i in index))

    return GradCheckReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        checked=checked,
        tol=tol,
        passed=worst[0] <= tol,
    )


__all__ = ["Objective", "GradCheckReport", "grad_check"]
