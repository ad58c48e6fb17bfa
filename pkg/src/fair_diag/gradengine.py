"""Small reverse-mode differentiation engine over a closed set of 2-D primitives.

Every value is a float64 matrix of shape (rows, cols). A :class:`Tape` records
each primitive application in execution order; :meth:`Tape.backward` walks the
record in reverse and accumulates gradients into the :class:`Parameter`
objects that were read on the tape.

Checkpoint format (``save_parameters`` / ``load_parameters``): a numpy ``.npz``
archive with one row-major float64 array per parameter id, plus an optional
``__meta__`` entry holding a UTF-8 JSON string.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Parameter",
    "Node",
    "Tape",
    "grad_check",
    "save_parameters",
    "load_parameters",
]

CHECK_FINITE = True
_PROB_EPS = 1e-12


class ShapeError(ValueError):
    pass


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in tensor")
    return arr


class Parameter:
    """Trainable matrix with an accumulated gradient of the same shape."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = _as_matrix(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Node:
    __slots__ = ("value", "grad", "op", "parents", "vjp", "param")

    def __init__(self, value, op, parents=(), vjp=None, param=None):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.param = param

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.shape})"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple[int, int]:
    shape = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(shape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}
        self._done = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value, op, parents=(), vjp=None, param=None) -> Node:
        node = Node(value, op, tuple(parents), vjp, param)
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------

    def param(self, p: Parameter) -> Node:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._push(p.value, "param", param=p)
            self._param_nodes[id(p)] = node
        return node

    def const(self, value) -> Node:
        return self._push(_as_matrix(value), "const")

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.const(x)

    # -- primitives -----------------------------------------------------

    def lookup(self, table, idx) -> Node:
        """Embedding-row lookup: rows ``idx`` of ``table``."""
        return self.take_rows(table, idx)

    def take_rows(self, x, idx) -> Node:
        x = self._lift(x)
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        n = x.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"lookup: index out of range for {n} rows")

        def vjp(g):
            gx = np.zeros_like(x.value)
            np.add.at(gx, idx, g)
            return (gx,)

        return self._push(x.value[idx], "lookup", (x,), vjp)

    def affine(self, x, W, b) -> Node:
        x, W, b = self._lift(x), self._lift(W), self._lift(b)
        if x.shape[1] != W.shape[0]:
            raise ShapeError(f"affine: incompatible shapes {x.shape} and {W.shape}")
        if b.shape != (1, W.shape[1]):
            raise ShapeError(f"affine: bias shape {b.shape} does not match {W.shape}")
        xv, Wv = x.value, W.value

        def vjp(g):
            return g @ Wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

        return self._push(xv @ Wv + b.value, "affine", (x, W, b), vjp)

    def sigmoid(self, x) -> Node:
        x = self._lift(x)
        s = _sigmoid(x.value)
        return self._push(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, x) -> Node:
        x = self._lift(x)
        t = np.tanh(x.value)
        return self._push(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))

    def softplus(self, x) -> Node:
        x = self._lift(x)
        xv = x.value
        out = np.logaddexp(0.0, xv)
        return self._push(out, "softplus", (x,), lambda g: (g * _sigmoid(xv),))

    def concat(self, *xs) -> Node:
        xs = [self._lift(x) for x in xs]
        rows = {x.shape[0] for x in xs}
        if len(rows) != 1:
            raise ShapeError(
                "concat: incompatible shapes " + " and ".join(str(x.shape) for x in xs)
            )
        bounds = np.cumsum([0] + [x.shape[1] for x in xs])

        def vjp(g):
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

        return self._push(np.concatenate([x.value for x in xs], axis=1), "concat", xs, vjp)

    def row_mean(self, x) -> Node:
        x = self._lift(x)
        c = x.shape[1]
        return self._push(
            x.value.mean(axis=1, keepdims=True),
            "row_mean",
            (x,),
            lambda g: (np.broadcast_to(g / c, x.shape).copy(),),
        )

    def col_mean(self, x) -> Node:
        x = self._lift(x)
        r = x.shape[0]
        if r == 0:
            raise ShapeError("col_mean: empty batch")
        return self._push(
            x.value.mean(axis=0, keepdims=True),
            "col_mean",
            (x,),
            lambda g: (np.broadcast_to(g / r, x.shape).copy(),),
        )

    def pop_std(self, x) -> Node:
        """Population standard deviation of all entries of ``x``, as a 1x1 value."""
        x = self._lift(x)
        v = x.value
        n = v.size
        dev = v - v.mean()
        sd = np.sqrt(np.mean(dev * dev))

        def vjp(g):
            if sd == 0.0:
                return (np.zeros_like(v),)
            return (g[0, 0] * dev / (n * sd),)

        return self._push(np.array([[sd]]), "pop_std", (x,), vjp)

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("add", a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._push(
            a.value + b.value,
            "add",
            (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("sub", a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._push(
            a.value - b.value,
            "sub",
            (a, b),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("mul", a.shape, b.shape)
        av, bv = a.value, b.value
        return self._push(
            av * bv,
            "mul",
            (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, x, c: float) -> Node:
        x = self._lift(x)
        c = float(c)
        return self._push(x.value * c, "scale", (x,), lambda g: (g * c,))

    def sum(self, x) -> Node:
        x = self._lift(x)
        return self._push(
            np.array([[x.value.sum()]]),
            "sum",
            (x,),
            lambda g: (np.full(x.shape, g[0, 0]),),
        )

    def bce(self, p, y) -> Node:
        """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets."""
        p = self._lift(p)
        y = np.asarray(y, dtype=np.float64).reshape(p.shape)
        pv = np.clip(p.value, _PROB_EPS, 1.0 - _PROB_EPS)
        n = pv.size
        loss = -np.mean(y * np.log(pv) + (1.0 - y) * np.log1p(-pv))

        def vjp(g):
            return (g[0, 0] * (pv - y) / (pv * (1.0 - pv)) / n,)

        return self._push(np.array([[loss]]), "bce", (p,), vjp)

    def bce_logits(self, z, y) -> Node:
        z = self._lift(z)
        y = np.asarray(y, dtype=np.float64).reshape(z.shape)
        zv = z.value
        n = zv.size
        loss = np.mean(np.logaddexp(0.0, zv) - y * zv)
        return self._push(
            np.array([[loss]]),
            "bce_logits",
            (z,),
            lambda g: (g[0, 0] * (_sigmoid(zv) - y) / n,),
        )

    def mse(self, x, target) -> Node:
        x = self._lift(x)
        t = np.asarray(target, dtype=np.float64)
        t = np.broadcast_to(t.reshape(t.shape if t.ndim == 2 else (-1, 1)), x.shape)
        diff = x.value - t
        n = diff.size
        return self._push(
            np.array([[np.mean(diff * diff)]]),
            "mse",
            (x,),
            lambda g: (g[0, 0] * 2.0 * diff / n,),
        )

    def softmax_ce(self, logits, target) -> Node:
        """Mean softmax cross-entropy.

        ``target`` is either an integer label vector (entries < 0 are skipped)
        or a row-stochastic matrix of soft targets with the logits' shape.
        """
        z = self._lift(logits)
        zv = z.value
        shifted = zv - zv.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        t = np.asarray(target)
        if t.ndim == 2 and t.shape == zv.shape and t.dtype.kind == "f":
            q = t.astype(np.float64)
        else:
            labels = t.astype(np.int64).reshape(-1)
            if labels.size != zv.shape[0]:
                raise ShapeError(f"softmax_ce: incompatible shapes {zv.shape} and {t.shape}")
            if labels.max(initial=-1) >= zv.shape[1]:
                raise IndexError("softmax_ce: label out of range")
            q = np.zeros_like(zv)
            valid = labels >= 0
            q[np.flatnonzero(valid), labels[valid]] = 1.0
        rows = q.sum(axis=1) > 0
        n = int(rows.sum())
        if n == 0:
            return self._push(np.zeros((1, 1)), "softmax_ce", (z,), lambda g: (np.zeros_like(zv),))
        loss = -np.sum(q * logp) / n
        prob = np.exp(logp)

        def vjp(g):
            return (g[0, 0] * (prob * q.sum(axis=1, keepdims=True) - q) / n,)

        return self._push(np.array([[loss]]), "softmax_ce", (z,), vjp)

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: Node) -> None:
        if not self.nodes:
            raise RuntimeError("backward called before any forward evaluation")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
        if not any(n is loss for n in reversed(self.nodes)):
            raise RuntimeError("backward: loss was not produced on this tape")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node.param is not None:
                node.param.grad += node.grad
                continue
            if node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if parent.vjp is None and parent.param is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g


def grad_check(
    loss_fn: Callable[[Tape], Node],
    parameters: Iterable[Parameter],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` builds the graph on the tape it is handed and returns the
    scalar loss node.
    """
    params = list(parameters)
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        return float(loss_fn(Tape()).value[0, 0])

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value()
            flat[i] = orig - epsilon
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


def save_parameters(path, params: Sequence[Parameter], meta: dict | None = None) -> None:
    arrays = {p.name: np.ascontiguousarray(p.value) for p in params}
    if meta is not None:
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_parameters(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k].astype(np.float64) for k in data.files if k != "__meta__"}
        meta = json.loads(str(data["__meta__"])) if "__meta__" in data.files else None
    return arrays, meta
