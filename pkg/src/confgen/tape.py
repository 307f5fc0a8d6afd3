"""A small eager reverse-mode differentiation tape over numpy arrays.

Values are computed when a primitive is recorded; ``backward`` walks the
recorded nodes once in reverse and returns vector-Jacobian products for every
leaf.  Only first derivatives are supported.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

EPS_NORM = 1e-10


class ShapeError(ValueError):
    """Inputs to a primitive do not conform."""


class TapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    # vjp(g, out, inputs, data) -> tuple of cotangents, one per input
    vjp: Callable[..., tuple]
    check: Callable[..., None] | None = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, data):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _check_matmul(a, b, data):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m, k) @ (k, n), got {a.shape} @ {b.shape}")


def _check_slice(a, data):
    index = data["index"]
    if len(index) > a.ndim:
        raise ShapeError(f"too many indices for shape {a.shape}")
    for (start, stop), size in zip(index, a.shape):
        if not (0 <= start <= stop <= size):
            raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis of size {size}")


def _check_rows(a, data):
    idx = data["index"]
    if a.ndim < 1:
        raise ShapeError("row indexing needs at least one axis")
    n = a.shape[0] if "n" not in data else data["n"]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"row index out of range for {n} rows")
    if "n" in data and a.shape[0] != idx.size:
        raise ShapeError(f"scatter needs one index per row, got {idx.size} for {a.shape[0]}")


def _check_concat(*arrs, data):
    axis = data["axis"]
    ref = arrs[0].shape
    for a in arrs[1:]:
        if a.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(a.shape, ref))
                                     if i != axis % len(ref)):
            raise ShapeError(f"concat shapes {ref} and {a.shape} differ off axis {axis}")


def _slices(index):
    return tuple(slice(a, b) for a, b in index)


def _sum_vjp(g, out, inputs, data):
    (a,) = inputs
    axis = data.get("axis")
    if axis is not None and not data.get("keepdims"):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_vjp(g, out, inputs, data):
    (a,) = inputs
    axis = data.get("axis")
    count = a.size if axis is None else a.shape[axis]
    (ga,) = _sum_vjp(g, out, inputs, data)
    return (ga / max(count, 1),)


def _concat_vjp(g, out, inputs, data):
    axis = data["axis"]
    splits = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _scatter_forward(a, data):
    out = np.zeros((data["n"],) + a.shape[1:])
    np.add.at(out, data["index"], a)
    return out


def _smoothnorm_forward(a, data):
    return np.sqrt(np.sum(a * a, axis=-1) + EPS_NORM)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(lambda a, b, data: a + b,
                     lambda g, out, ins, data: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
                     _check_broadcast),
    "sub": Primitive(lambda a, b, data: a - b,
                     lambda g, out, ins, data: (_unbroadcast(g, ins[0].shape), -_unbroadcast(g, ins[1].shape)),
                     _check_broadcast),
    "mul": Primitive(lambda a, b, data: a * b,
                     lambda g, out, ins, data: (_unbroadcast(g * ins[1], ins[0].shape),
                                                _unbroadcast(g * ins[0], ins[1].shape)),
                     _check_broadcast),
    "div": Primitive(lambda a, b, data: a / b,
                     lambda g, out, ins, data: (_unbroadcast(g / ins[1], ins[0].shape),
                                                _unbroadcast(-g * out / ins[1], ins[1].shape)),
                     _check_broadcast),
    "neg": Primitive(lambda a, data: -a, lambda g, out, ins, data: (-g,)),
    "matmul": Primitive(lambda a, b, data: a @ b,
                        lambda g, out, ins, data: (g @ ins[1].T, ins[0].T @ g),
                        _check_matmul),
    "sum": Primitive(lambda a, data: np.sum(a, axis=data.get("axis"), keepdims=data.get("keepdims", False)),
                     _sum_vjp),
    "mean": Primitive(lambda a, data: np.mean(a, axis=data.get("axis"), keepdims=data.get("keepdims", False)),
                      _mean_vjp),
    "broadcast": Primitive(lambda a, data: np.broadcast_to(a, data["shape"]).copy(),
                           lambda g, out, ins, data: (_unbroadcast(g, ins[0].shape),),
                           lambda a, data: _check_broadcast(a, np.empty(data["shape"]), data)),
    "reshape": Primitive(lambda a, data: np.reshape(a, data["shape"]),
                         lambda g, out, ins, data: (np.reshape(g, ins[0].shape),)),
    "transpose": Primitive(lambda a, data: a.T, lambda g, out, ins, data: (g.T,)),
    "tanh": Primitive(lambda a, data: np.tanh(a), lambda g, out, ins, data: (g * (1.0 - out * out),)),
    "exp": Primitive(lambda a, data: np.exp(a), lambda g, out, ins, data: (g * out,)),
    "log": Primitive(lambda a, data: np.log(a), lambda g, out, ins, data: (g / ins[0],)),
    "sqrt": Primitive(lambda a, data: np.sqrt(a), lambda g, out, ins, data: (g * 0.5 / out,)),
    "square": Primitive(lambda a, data: a * a, lambda g, out, ins, data: (2.0 * g * ins[0],)),
    "clip": Primitive(lambda a, data: np.clip(a, data["lo"], data["hi"]),
                      lambda g, out, ins, data: (g * ((ins[0] >= data["lo"]) & (ins[0] <= data["hi"])),)),
    "concat": Primitive(lambda *arrs, data: np.concatenate(arrs, axis=data["axis"]), _concat_vjp,
                        lambda *arrs, data: _check_concat(*arrs, data=data)),
    "slice": Primitive(lambda a, data: a[_slices(data["index"])].copy(),
                       lambda g, out, ins, data: (_embed_slice(g, ins[0].shape, data["index"]),),
                       _check_slice),
    "gather": Primitive(lambda a, data: a[data["index"]],
                        lambda g, out, ins, data: (_scatter_forward(g, {"n": ins[0].shape[0],
                                                                        "index": data["index"]}),),
                        _check_rows),
    "scatter": Primitive(_scatter_forward,
                         lambda g, out, ins, data: (g[data["index"]],),
                         _check_rows),
    # row-wise sqrt(|x|^2 + eps) over the last axis
    "smoothnorm": Primitive(_smoothnorm_forward,
                            lambda g, out, ins, data: (g[..., None] * ins[0] / out[..., None],)),
}


def _embed_slice(g, shape, index):
    out = np.zeros(shape)
    out[_slices(index)] = g
    return out


_tape_ids = itertools.count()


@dataclass(frozen=True)
class Variable:
    tape: "Tape"
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __hash__(self):
        return hash((self.tape.uid, self.id))

    def __eq__(self, other):
        return isinstance(other, Variable) and other.tape is self.tape and other.id == self.id

    def _lift(self, other):
        return other if isinstance(other, Variable) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self.tape.record("add", (self._lift(other), self))

    def __sub__(self, other):
        return self.tape.record("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self.tape.record("sub", (self._lift(other), self))

    def __mul__(self, other):
        return self.tape.record("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self.tape.record("mul", (self._lift(other), self))

    def __truediv__(self, other):
        return self.tape.record("div", (self, self._lift(other)))

    def __rtruediv__(self, other):
        return self.tape.record("div", (self._lift(other), self))

    def __neg__(self):
        return self.tape.record("neg", (self,))

    def __matmul__(self, other):
        return self.tape.record("matmul", (self, self._lift(other)))

    def __rmatmul__(self, other):
        return self.tape.record("matmul", (self._lift(other), self))


class Tape:
    def __init__(self):
        self.uid = next(_tape_ids)
        self.nodes: list[tuple[str | None, tuple[int, ...], dict]] = []
        self.values: list[np.ndarray] = []
        self.leaves: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, data, value) -> Variable:
        self.nodes.append((op, inputs, data))
        self.values.append(value)
        return Variable(self, len(self.values) - 1)

    def leaf(self, value) -> Variable:
        var = self._push(None, (), {}, np.array(value, dtype=float))
        self.leaves.append(var.id)
        return var

    def constant(self, value) -> Variable:
        return self._push(None, (), {"constant": True}, np.array(value, dtype=float))

    def record(self, op: str, inputs: Sequence[Variable], **data: Any) -> Variable:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise TapeError(f"unknown primitive {op!r}")
        for x in inputs:
            if not isinstance(x, Variable) or x.tape is not self:
                raise TapeError(f"{op}: all inputs must be variables on this tape")
        vals = [self.values[x.id] for x in inputs]
        if "index" in data and op in ("gather", "scatter"):
            data["index"] = np.asarray(data["index"], dtype=np.intp)
        if prim.check is not None:
            prim.check(*vals, data=data)
        out = np.asarray(prim.forward(*vals, data=data), dtype=float)
        return self._push(op, tuple(x.id for x in inputs), data, out)


record_primitive = Tape.record


def backward(tape: Tape, output: Variable, seed=None, wrt: Sequence[Variable] | None = None
             ) -> dict[Variable, np.ndarray]:
    """Reverse sweep from ``output`` seeded with ``seed``.

    Returns d(seed . output)/d(leaf) for every leaf (or only ``wrt``).
    """
    if not isinstance(output, Variable) or output.tape is not tape or output.id >= len(tape.values):
        raise TapeError("output is not a variable on this tape")
    out_val = tape.values[output.id]
    seed = np.ones_like(out_val) if seed is None else np.asarray(seed, dtype=float)
    if seed.shape != out_val.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {out_val.shape}")
    grads: list[np.ndarray | None] = [None] * (output.id + 1)
    grads[output.id] = seed
    for i in range(output.id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        op, inputs, data = tape.nodes[i]
        if op is None:
            continue
        prim = PRIMITIVES[op]
        cots = prim.vjp(g, tape.values[i], [tape.values[j] for j in inputs], data)
        for j, c in zip(inputs, cots):
            grads[j] = c if grads[j] is None else grads[j] + c
    targets = [tape_var for tape_var in (wrt if wrt is not None else
                                          (Variable(tape, j) for j in tape.leaves))]
    result = {}
    for var in targets:
        g = grads[var.id] if var.id < len(grads) else None
        result[var] = np.zeros_like(tape.values[var.id]) if g is None else g
    return result


# convenience wrappers --------------------------------------------------------

def _unary(op):
    def f(x: Variable, **data) -> Variable:
        return x.tape.record(op, (x,), **data)
    f.__name__ = op
    return f


tanh = _unary("tanh")
exp = _unary("exp")
log = _unary("log")
sqrt = _unary("sqrt")
square = _unary("square")
transpose = _unary("transpose")
smoothnorm = _unary("smoothnorm")


def sum(x: Variable, axis=None, keepdims=False) -> Variable:  # noqa: A001
    return x.tape.record("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x: Variable, axis=None, keepdims=False) -> Variable:
    return x.tape.record("mean", (x,), axis=axis, keepdims=keepdims)


def broadcast(x: Variable, shape) -> Variable:
    return x.tape.record("broadcast", (x,), shape=tuple(shape))


def reshape(x: Variable, shape) -> Variable:
    return x.tape.record("reshape", (x,), shape=tuple(shape))


def clip(x: Variable, lo: float, hi: float) -> Variable:
    return x.tape.record("clip", (x,), lo=lo, hi=hi)


def concat(xs: Sequence[Variable], axis: int = -1) -> Variable:
    return xs[0].tape.record("concat", tuple(xs), axis=axis)


def slice_(x: Variable, *index: tuple[int, int]) -> Variable:
    return x.tape.record("slice", (x,), index=tuple(index))


def gather(x: Variable, index) -> Variable:
    return x.tape.record("gather", (x,), index=index)


def scatter(x: Variable, index, n: int) -> Variable:
    """Sum rows of ``x`` into an ``n``-row array at ``index``."""
    return x.tape.record("scatter", (x,), index=index, n=n)
