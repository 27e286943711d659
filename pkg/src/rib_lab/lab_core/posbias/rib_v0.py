from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Tape, Var
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor, resolve_dtype


logger = get_logger("posbias")

ACTIVATIONS = ("relu", "sine")
SIREN_OMEGA = 30.0


def fourier_embed(x: Tensor, L: int) -> Tensor:
    """Фурье-признаки координат: [x, sin(2⁰x), cos(2⁰x), …, sin(2^{L−1}x), cos(2^{L−1}x)].

    Parameters
    ----------
    x : Tensor[N, 2]
        Нормированные координаты, |x| ≤ 1.
    L : int
        Число частотных полос, L ≥ 0.

    Returns
    -------
    Tensor[N, 2 + 4L]
    """
    if L < 0:
        raise ConfigError(f"Number of frequency bands must be >= 0, got {L}")
    if x.ndim != 2 or x.shape[-1] != 2:
        raise DimensionError(f"fourier_embed expects coords of shape [N, 2], got {x.shape}")
    if np.abs(x).max(initial=0.0) > 1.0:
        raise DimensionError("fourier_embed expects coordinates in [-1, 1]")
    parts = [x]
    for band in range(L):
        scaled = x * float(2**band)
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1).astype(x.dtype, copy=False)


def embed_width(L: int) -> int:
    return 2 + 4 * L


@dataclass(frozen=True, eq=False)
class RIBParams:
    """Параметры позиционного MLP: общий скрытый слой + проекции по головам.

    W_h [2+4L, d_h], b_h [d_h], W_pq / W_pk [heads, d_h, R].
    """

    L: int
    d_h: int
    R: int
    heads: int
    W_h: Tensor
    b_h: Tensor
    W_pq: Tensor
    W_pk: Tensor
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown RIB activation: {self.activation!r}")
        expected = {
            "W_h": (embed_width(self.L), self.d_h),
            "b_h": (self.d_h,),
            "W_pq": (self.heads, self.d_h, self.R),
            "W_pk": (self.heads, self.d_h, self.R),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"RIBParams.{name}: expected shape {shape}, got {actual}")

    @classmethod
    def init(
        cls,
        L: int,
        d_h: int,
        R: int,
        heads: int,
        rng: np.random.Generator,
        dtype: str | np.dtype = "f32",
        activation: str = "relu",
    ) -> "RIBParams":
        """Инициализация uniform(−a, a), a = 1/√fan_in; b_h = 0."""
        dt = resolve_dtype(dtype)
        fan_in = embed_width(L)
        a_h = 1.0 / math.sqrt(fan_in)
        a_p = 1.0 / math.sqrt(d_h)
        return cls(
            L=L,
            d_h=d_h,
            R=R,
            heads=heads,
            W_h=rng.uniform(-a_h, a_h, size=(fan_in, d_h)).astype(dt),
            b_h=np.zeros(d_h, dtype=dt),
            W_pq=rng.uniform(-a_p, a_p, size=(heads, d_h, R)).astype(dt),
            W_pk=rng.uniform(-a_p, a_p, size=(heads, d_h, R)).astype(dt),
            activation=activation,
        )

    @property
    def dtype(self) -> np.dtype:
        return self.W_h.dtype

    @property
    def param_count(self) -> int:
        return rib_param_count_for(self.L, self.d_h, self.R, self.heads)

    @cached_property
    def version(self) -> str:
        """Отпечаток содержимого параметров: ключ PosTokenCache."""
        digest = hashlib.blake2b(digest_size=16)
        digest.update(f"{self.L}:{self.d_h}:{self.R}:{self.heads}:{self.activation}".encode())
        for arr in (self.W_h, self.b_h, self.W_pq, self.W_pk):
            digest.update(str(arr.dtype).encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    def to_dict(self, prefix: str = "") -> Dict[str, Tensor]:
        return {
            f"{prefix}W_h": self.W_h,
            f"{prefix}b_h": self.b_h,
            f"{prefix}W_pq": self.W_pq,
            f"{prefix}W_pk": self.W_pk,
        }

    @classmethod
    def from_dict(
        cls, values: Mapping[str, Tensor], L: int, prefix: str = "", activation: str = "relu"
    ) -> "RIBParams":
        W_pq = np.asarray(values[f"{prefix}W_pq"])
        heads, d_h, R = W_pq.shape
        return cls(
            L=L,
            d_h=d_h,
            R=R,
            heads=heads,
            W_h=np.asarray(values[f"{prefix}W_h"]),
            b_h=np.asarray(values[f"{prefix}b_h"]),
            W_pq=W_pq,
            W_pk=np.asarray(values[f"{prefix}W_pk"]),
            activation=activation,
        )

    def replace(self, **arrays: Tensor) -> "RIBParams":
        fields = {
            "L": self.L, "d_h": self.d_h, "R": self.R, "heads": self.heads,
            "W_h": self.W_h, "b_h": self.b_h, "W_pq": self.W_pq, "W_pk": self.W_pk,
            "activation": self.activation,
        }
        fields.update(arrays)
        return RIBParams(**fields)


def rib_param_count_for(L: int, d_h: int, R: int, heads: int) -> int:
    """(2+4L)·d_h + d_h + 2·heads·d_h·R: не зависит от размера окна M."""
    return embed_width(L) * d_h + d_h + 2 * heads * d_h * R


def rib_param_count(p: RIBParams) -> int:
    return p.param_count


def rib_hidden_ad(embed: Var, W_h: Var, b_h: Var, activation: str = "relu") -> Var:
    """h = act(r_in W_h + b_h), общий для всех голов."""
    z = ops.matmul(embed, W_h) + b_h
    if activation == "sine":
        return ops.sin(ops.scale(z, SIREN_OMEGA))
    return ops.relu(z)


def rib_tokens_ad(
    embed: Var,
    W_h: Var,
    b_h: Var,
    W_pq: Var,
    W_pk: Var,
    activation: str = "relu",
) -> Tuple[Var, Var]:
    """Дифференцируемые Q_p = h W_pq, K_p = h W_pk, каждый [heads, N, R]."""
    h = rib_hidden_ad(embed, W_h, b_h, activation)
    return ops.matmul(h, W_pq), ops.matmul(h, W_pk)


def rib_tokens_on_tape(tape: Tape, geom: WindowGeometry, p: RIBParams, prefix: str = "rib.") -> Tuple[Var, Var]:
    """Зарегистрировать параметры p на ленте и построить Q_p, K_p."""
    if geom.coords.dtype != p.dtype:
        raise DimensionError(f"geometry dtype {geom.coords.dtype} != params dtype {p.dtype}")
    v = tape.params(p.to_dict(prefix))
    embed = tape.constant(fourier_embed(geom.coords, p.L))
    return rib_tokens_ad(embed, v[f"{prefix}W_h"], v[f"{prefix}b_h"], v[f"{prefix}W_pq"], v[f"{prefix}W_pk"], p.activation)


def rib_hidden(geom: WindowGeometry, p: RIBParams) -> Tensor:
    """Скрытое представление h [N, d_h] (без градиентов)."""
    tape = Tape()
    embed = tape.constant(fourier_embed(geom.coords.astype(p.dtype), p.L))
    return rib_hidden_ad(embed, tape.constant(p.W_h), tape.constant(p.b_h), p.activation).value


def rib_positional_tokens(geom: WindowGeometry, p: RIBParams) -> Tuple[Tensor, Tensor]:
    """Q_p, K_p [heads, N, R]: функция только геометрии и параметров, без пиксельного контента."""
    if geom.coords.dtype != p.dtype:
        raise DimensionError(f"geometry dtype {geom.coords.dtype} != params dtype {p.dtype}")
    tape = Tape()
    embed = tape.constant(fourier_embed(geom.coords, p.L))
    q_p, k_p = rib_tokens_ad(
        embed,
        tape.constant(p.W_h),
        tape.constant(p.b_h),
        tape.constant(p.W_pq),
        tape.constant(p.W_pk),
        p.activation,
    )
    return q_p.value, k_p.value


class PosTokenCache:
    """Кэш позиционных токенов по ключу (M, версия параметров).

    Поиск, вставка и счётчики hits/misses идут под одним замком; пара
    вычисляется вне замка и попадает в словарь только целиком.
    Переставленные (неканонические) геометрии не кэшируются.
    """

    def __init__(self) -> None:
        self._entries: Dict[Tuple[int, str], Tuple[Tensor, Tensor]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, geom: WindowGeometry, p: RIBParams) -> Tuple[Tensor, Tensor]:
        if not geom.canonical:
            return rib_positional_tokens(geom, p)

        key = (geom.M, p.version)
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self.hits += 1
                return entry

        q_p, k_p = rib_positional_tokens(geom, p)
        q_p.setflags(write=False)
        k_p.setflags(write=False)
        with self._lock:
            entry = self._entries.setdefault(key, (q_p, k_p))
            self.misses += 1
        logger.debug(
            "pos_token_cache_insert",
            extra={"event": "pos_token_cache_insert", "M": geom.M, "version": p.version, "size": len(self._entries)},
        )
        return entry

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()


__all__ = [
    "ACTIVATIONS",
    "fourier_embed",
    "embed_width",
    "RIBParams",
    "rib_param_count_for",
    "rib_param_count",
    "rib_hidden_ad",
    "rib_tokens_ad",
    "rib_tokens_on_tape",
    "rib_hidden",
    "rib_positional_tokens",
    "PosTokenCache",
]
