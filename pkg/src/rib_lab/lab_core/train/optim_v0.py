from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence

import numpy as np

from rib_lab.lab_core.tensor.errors_v0 import ContractError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


def lr_at(step: int, base_lr: float, milestones: Sequence[int], gamma: float = 0.5) -> float:
    """MultiStep: base · γ^{число вех ≤ step}."""
    return base_lr * gamma ** bisect_right(list(milestones), step)


@dataclass
class Adam:
    """Adam / AdamW (decoupled weight decay при weight_decay > 0).

    Состояние (m, v, t) хранится по имени параметра; шаг обновляет
    словарь параметров целиком и возвращает новый.
    """

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float) -> Dict[str, Tensor]:
        missing = set(params) - set(grads)
        if missing:
            raise ContractError(f"optimizer: no gradient for {sorted(missing)[:3]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        updated: Dict[str, Tensor] = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            new = p - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay > 0:
                new = new - lr * self.weight_decay * p
            updated[name] = new.astype(p.dtype, copy=False)
        return updated


__all__ = ["lr_at", "Adam"]
