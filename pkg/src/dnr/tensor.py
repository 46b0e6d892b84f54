"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation on a tracked tensor records its parents and a vector-Jacobian
closure.  :func:`backward` walks the recorded graph once in reverse
topological order and returns the gradient of a scalar loss with respect to
the requested leaves.  The tape belongs to one forward pass and is released
by the backward sweep.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from dnr.errors import ContractViolation, NumericFault


_TAPE_ENABLED = True


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording operations, e.g. for inference passes."""
    global _TAPE_ENABLED
    previous = _TAPE_ENABLED
    _TAPE_ENABLED = False
    try:
        yield
    finally:
        _TAPE_ENABLED = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that can participate in the gradient tape.

    Parameters
    ----------
    data : array_like
        Values, copied into a C-contiguous float64 array.
    tracked : bool
        Whether gradients should flow to (and through) this tensor.
    name : str, optional
        Identity used in checkpoints, optimizer state and error messages.
    """

    __slots__ = ("data", "tracked", "name", "_parents", "_vjp", "_op")

    def __init__(self, data, tracked: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.tracked = tracked
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction helpers ---------------------------------------------

    @classmethod
    def _result(cls, data, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.name = None
        out._op = op
        if _TAPE_ENABLED and any(p.tracked for p in parents):
            out.tracked = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.tracked = False
            out._parents = ()
            out._vjp = None
        return out

    @staticmethod
    def lift(value) -> Tensor:
        return value if isinstance(value, Tensor) else Tensor(value)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data, tracked=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, tracked={self.tracked}{label})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other) -> Tensor:
        other = Tensor.lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = Tensor.lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other) -> Tensor:
        return Tensor.lift(other) - self

    def __mul__(self, other) -> Tensor:
        other = Tensor.lift(other)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = Tensor.lift(other)
        a, b = self.data, other.data
        if np.any(b == 0.0):
            raise NumericFault("div: division by zero")
        out = a / b
        return Tensor._result(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> Tensor:
        return Tensor.lift(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise ContractViolation("only constant exponents are supported")
        a = self.data
        return Tensor._result(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
            f"pow{exponent}",
        )

    # -- nonlinearities ----------------------------------------------------

    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        if not np.all(np.isfinite(out)):
            raise NumericFault("exp: overflow")
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        a = self.data
        if np.any(a <= 0.0):
            raise NumericFault("log: non-positive argument")
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> Tensor:
        a = self.data
        if np.any(a < 0.0):
            raise NumericFault("sqrt: negative argument")
        out = np.sqrt(a)

        def vjp(g):
            if np.any(out == 0.0):
                raise NumericFault("sqrt: gradient undefined at zero")
            return (g / (2.0 * out),)

        return Tensor._result(out, (self,), vjp, "sqrt")

    def abs(self) -> Tensor:
        # sign(0) == 0 gives the zero subgradient at the kink
        sign = np.sign(self.data)
        return Tensor._result(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    # -- shape manipulation -----------------------------------------------

    def __matmul__(self, other) -> Tensor:
        other = Tensor.lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return Tensor._result(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def transpose(self) -> Tensor:
        if self.ndim != 2:
            raise ContractViolation("transpose expects a matrix")
        return Tensor._result(self.data.T.copy(), (self,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._result(
            self.data.reshape(shape).copy(), (self,), lambda g: (g.reshape(original),), "reshape"
        )

    def __getitem__(self, index) -> Tensor:
        original = self.shape

        def vjp(g):
            full = np.zeros(original)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.array(self.data[index]), (self,), vjp, "slice")

    # -- reductions --------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        original = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, original).copy(),)

        return Tensor._result(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), vjp, "sum"
        )

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._result(out, (self,), vjp, "softmax")

    def log_softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        probs = np.exp(out)

        def vjp(g):
            return (g - probs * g.sum(axis=axis, keepdims=True),)

        return Tensor._result(out, (self,), vjp, "log_softmax")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradients are split back by width."""
    tensors = [Tensor.lift(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat"
    )


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.tracked and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to tracked leaves.

    Parameters
    ----------
    loss : Tensor
        Tracked tensor holding one element.
    params : iterable of Tensor, optional
        Leaves to report.  Leaves that the loss does not depend on get a
        zero gradient.  Defaults to every tracked leaf reached by the tape.

    Returns
    -------
    dict
        Maps each leaf tensor to a float64 array of its shape.

    Raises
    ------
    ContractViolation
        If the loss is not a tracked scalar.
    NumericFault
        If a NaN or infinity enters any gradient; the message names the
        operation that produced it.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractViolation("backward needs a scalar loss tensor")
    if not loss.tracked:
        raise ContractViolation("loss is not on the gradient tape")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.get(id(node))
        if node._vjp is None:
            leaves[id(node)] = node
            continue
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.tracked or pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericFault(f"non-finite gradient produced by '{node._op}' node")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # the tape is single-use
        node._parents = ()
        node._vjp = None
        del grads[id(node)]

    if params is None:
        return {leaf: grads.get(key, np.zeros_like(leaf.data)) for key, leaf in leaves.items()}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


def finite_diff_grad(
    f: Callable[[], Tensor | float], params: Sequence[Tensor], eps: float = 1e-5
) -> dict[Tensor, np.ndarray]:
    """Central-difference gradient estimate of ``f`` at the current params.

    ``f`` takes no arguments and reads the parameters, which are perturbed
    in place one coordinate at a time and restored afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractViolation(f"eps must lie in [1e-7, 1e-3], got {eps}")

    def evaluate() -> float:
        with no_tape():
            value = f()
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise NumericFault("finite_diff_grad: objective returned a non-finite value")
        return value

    out = {}
    for p in params:
        grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = evaluate()
            flat[i] = saved - eps
            down = evaluate()
            flat[i] = saved
            gflat[i] = (up - down) / (2.0 * eps)
        out[p] = grad
    return out


def primitive(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Record a fused operation whose vector-Jacobian product is supplied
    by the caller.  ``vjp(g)`` returns one gradient (or None) per parent."""
    return Tensor._result(np.asarray(data, dtype=np.float64), tuple(parents), vjp, op)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, tracked=True, name=name)
