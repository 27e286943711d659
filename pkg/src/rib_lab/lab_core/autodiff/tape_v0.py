from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rib_lab.lab_core.tensor.errors_v0 import ContractError, InternalError


# vjp: градиент выхода → градиенты входов (None: вход не требует градиента)
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class Node:
    """Запись на ленте: операция, индексы входов и замыкание обратного прохода.

    Сохранённые активации живут внутри ``vjp`` (захвачены замыканием).
    У листьев (параметры, константы) ``vjp`` равен None.
    """

    op: str
    inputs: Tuple[int, ...]
    vjp: Optional[VJP] = None


class Var:
    """Значение на ленте: numpy-массив + ссылка на ленту и номер узла."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # ndarray * Var уходит в Var.__rmul__, а не в numpy

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        op = self.tape.nodes[self.index].op
        return f"Var(op={op!r}, shape={self.shape}, dtype={self.dtype})"

    # Операторы делегируют в ops_v0; импорт ленивый из-за цикла модулей.
    def __add__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        return ops.add(self, ops.lift(self.tape, other, self.dtype))

    def __radd__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        return ops.add(ops.lift(self.tape, other, self.dtype), self)

    def __sub__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        return ops.sub(self, ops.lift(self.tape, other, self.dtype))

    def __rsub__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        return ops.sub(ops.lift(self.tape, other, self.dtype), self)

    def __mul__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, ops.lift(self.tape, other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        if not isinstance(other, (int, float)):
            raise ContractError("Var division is only defined for python scalars")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from rib_lab.lab_core.autodiff import ops_v0 as ops
        return ops.matmul(self, ops.lift(self.tape, other, self.dtype))


class Tape:
    """Лента обратного режима: append-only список узлов + реестр параметров.

    Топологический порядок = порядок создания. Одна лента на один шаг обучения;
    между потоками ленты не разделяются.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.parameters: Dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node, value: np.ndarray) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        return Var(value, self, len(self.nodes) - 1)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Зарегистрировать именованный лист, по которому нужен градиент."""
        if name in self.parameters:
            raise ContractError(f"Parameter {name!r} is already registered on this tape")
        var = self._push(Node(op="param", inputs=()), np.asarray(value))
        self.parameters[name] = var
        return var

    def params(self, values: Dict[str, np.ndarray]) -> Dict[str, Var]:
        """Зарегистрировать сразу словарь параметров (порядок ключей сохраняется)."""
        return {name: self.param(name, value) for name, value in values.items()}

    def constant(self, value: np.ndarray) -> Var:
        """Лист без градиента (входные данные, маски, кэшированные токены)."""
        return self._push(Node(op="const", inputs=()), np.asarray(value))

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, vjp: VJP) -> Var:
        """Добавить узел операции; все входы обязаны принадлежать этой ленте."""
        for var in inputs:
            if var.tape is not self:
                raise ContractError(f"{op}: input node belongs to a different tape")
        return self._push(Node(op=op, inputs=tuple(v.index for v in inputs), vjp=vjp), value)


def _accumulate(grads: Dict[int, np.ndarray], index: int, g: np.ndarray) -> None:
    # Разветвление узла: градиенты складываются (цепное правило)
    if index in grads:
        grads[index] = grads[index] + g
    else:
        grads[index] = g


def gradients(tape: Tape, loss: Var, wrt: Sequence[Var]) -> List[np.ndarray]:
    """Градиенты скалярного loss по произвольным узлам ленты.

    Обход: строго в обратном порядке создания, каждый узел ровно один раз.
    Состояние ленты не меняется, поэтому повторный вызов даёт те же числа.

    Raises
    ------
    ContractError
        Если loss не скаляр или узел с другой ленты.
    """
    if loss.tape is not tape or any(v.tape is not tape for v in wrt):
        raise ContractError("backward: nodes must belong to the given tape")
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")

    keep = {v.index for v in wrt}
    grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}

    for index in range(loss.index, -1, -1):
        node = tape.nodes[index]
        g = grads.get(index)
        if g is None or node.vjp is None:
            continue
        input_grads = node.vjp(g)
        if len(input_grads) != len(node.inputs):
            raise InternalError(f"{node.op}: vjp returned {len(input_grads)} grads for {len(node.inputs)} inputs")
        for input_index, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            expected = tape.values[input_index].shape
            if ig.shape != expected:
                raise InternalError(f"{node.op}: gradient shape {ig.shape} != input shape {expected}")
            _accumulate(grads, input_index, ig)
        if index not in keep:
            del grads[index]

    return [grads.get(v.index, np.zeros_like(v.value)) for v in wrt]


def backward(tape: Tape, loss: Var) -> Dict[str, np.ndarray]:
    """dLoss/dParam для каждого зарегистрированного параметра ленты.

    Параметры, от которых loss не зависит, получают нулевой градиент
    той же формы.
    """
    names = list(tape.parameters)
    grads = gradients(tape, loss, [tape.parameters[name] for name in names])
    return dict(zip(names, grads))


__all__ = ["Node", "Var", "Tape", "gradients", "backward"]
