"""Small tape-based reverse-mode differentiation on top of numpy.

Everything is float64. A :class:`Tape` is opened per forward pass; operations
executed while it is active and touching a :class:`Param` (or anything derived
from one) are recorded together with a vector-Jacobian closure.
:func:`backward` walks the record in reverse once and accumulates gradients
into the parameters.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a scalar operand. Row-wise bias addition goes through
:func:`linear` / :func:`add_rowvec` so every backward rule stays obvious.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DiffkitError(ValueError):
    pass


class ShapeError(DiffkitError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Trainable tensor with gradient and Adam moment buffers."""

    __slots__ = ("grad", "m", "v", "t", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; ops executed inside are recorded.

    >>> w = Param([1.0, 2.0])
    >>> with Tape() as tape:
    ...     loss = total(w)
    >>> backward(tape, loss)
    >>> w.grad.tolist()
    [1.0, 1.0]
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.tracked: set[int] = set()
        self.params: dict[int, Param] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def clear(self) -> None:
        self.nodes.clear()
        self.tracked.clear()
        self.params.clear()

    def _is_tracked(self, t: Tensor) -> bool:
        if isinstance(t, Param):
            self.params[id(t)] = t
            self.tracked.add(id(t))
            return True
        return id(t) in self.tracked


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    if _ACTIVE:
        tape = _ACTIVE[-1]
        flags = [tape._is_tracked(t) for t in inputs]
        if any(flags):
            tape.nodes.append((out, tuple(inputs), vjp))
            tape.tracked.add(id(out))
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _finish(A @ B, (a, b), vjp, "matmul")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``x`` (m, k), ``w`` (k, n), ``b`` (n,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} x {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
    X, W = x.data, w.data

    def vjp(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _finish(X @ W + b.data, (x, w, b), vjp, "linear")


def add_rowvec(x, v) -> Tensor:
    """Add vector ``v`` (n,) to every row of ``x`` (m, n)."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec mismatch: {x.shape} + {v.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _finish(x.data + v.data, (x, v), vjp, "add_rowvec")


def mul_rowvec(x, v) -> Tensor:
    """Scale every row of ``x`` (m, n) elementwise by ``v`` (n,)."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"mul_rowvec mismatch: {x.shape} * {v.shape}")
    X, V = x.data, v.data

    def vjp(g):
        return g * V, (g * X).sum(axis=0)

    return _finish(X * V, (x, v), vjp, "mul_rowvec")


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat mismatch: {[t.shape for t in ts]}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, ts, vjp, "concat")


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]``; gradient scatters back (repeats accumulate)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _finish(x.data[idx], (x,), vjp, "take_rows")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc

    def vjp(g):
        return (g.reshape(old),)

    return _finish(out, (x,), vjp, "reshape")


# ---------------------------------------------------------------- elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.data.ndim <= 1 or b.size == 1 and b.data.ndim <= 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _finish(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _finish(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    A, B = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _finish(A * B, (a, b), vjp, "mul")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    pick_a = a.data <= b.data

    def vjp(g):
        return g * pick_a, g * ~pick_a

    return _finish(np.where(pick_a, a.data, b.data), (a, b), vjp, "minimum")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _finish(y, (x,), vjp, "tanh")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _finish(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def vjp(g):
        return (g * y,)

    return _finish(y, (x,), vjp, "exp")


def square(x) -> Tensor:
    x = _as_tensor(x)
    X = x.data

    def vjp(g):
        return (2.0 * g * X,)

    return _finish(X * X, (x,), vjp, "square")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes where ``lo <= x <= hi``."""
    x = _as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _finish(np.clip(x.data, lo, hi), (x,), vjp, "clip")


def stop_gradient(x) -> Tensor:
    """Value copy with no recorded dependency."""
    x = _as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data.copy()
    return out


def straight_through(x, value) -> Tensor:
    """Forward value taken from ``value``; the gradient is copied onto ``x``."""
    x, value = _as_tensor(x), _as_tensor(value)
    if x.shape != value.shape:
        raise ShapeError(f"straight_through: {x.shape} vs {value.shape}")

    def vjp(g):
        return (g,)

    return _finish(value.data.copy(), (x,), vjp, "straight_through")


_ELEMENTWISE = {
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "square": square,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DiffkitError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------- reductions


def total(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _finish(np.array(x.data.sum()), (x,), vjp, "sum")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _finish(np.array(x.data.mean()), (x,), vjp, "mean")


def row_sum(x) -> Tensor:
    """Sum over the last axis of a 2-D tensor, giving shape (m,)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"row_sum expects 2-D input, got {x.shape}")
    n = x.shape[1]

    def vjp(g):
        return (np.repeat(g[:, None], n, axis=1),)

    return _finish(x.data.sum(axis=1), (x,), vjp, "row_sum")


def mse(pred, target) -> Tensor:
    """Mean of squared differences over all entries."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return _finish(np.array(np.mean(diff * diff)), (pred, target), vjp, "mse")


# ---------------------------------------------------------------- backward / optimisation


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` and clear the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            key = id(inp)
            if key not in tape.tracked:
                continue
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, param in tape.params.items():
        if key in grads:
            param.grad = param.grad + grads[key].reshape(param.shape)
    tape.clear()


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Iterable[Param],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; moments live on each Param."""
    for p in params:
        p.t += 1
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1**p.t)
        v_hat = p.v / (1.0 - beta2**p.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_norm(params: Iterable[Param]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return norm


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Param]) -> list[np.ndarray]:
    zero_grad(params)
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    return [p.grad.copy() for p in params]


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Param],
    step: float = 1e-6,
    floor: float = 1e-3,
    analytic: list[np.ndarray] | None = None,
) -> float:
    """Largest entrywise relative error between backward() and central differences.

    The error for one entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps vanishing derivatives from turning rounding noise into huge ratios.
    ``analytic`` may be supplied to check externally produced gradients.
    """
    if analytic is None:
        analytic = analytic_grads(fn, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = np.asarray(a).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(num), floor)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst


# ---------------------------------------------------------------- small helpers for networks


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0, name: str = ""):
    """Glorot-uniform weight and zero bias."""
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    w = Param(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name=f"{name}.w")
    b = Param(np.zeros(fan_out), name=f"{name}.b")
    return w, b


class MLP:
    """Dense tanh network; the last layer is linear."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_gain: float = 1.0, name: str = "mlp"):
        self.sizes = list(sizes)
        self.layers: list[tuple[Param, Param]] = []
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == len(sizes) - 2 else 1.0
            self.layers.append(init_dense(rng, fi, fo, gain, f"{name}.{i}"))

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x) -> Tensor:
        h = _as_tensor(x)
        for i, (w, b) in enumerate(self.layers):
            h = linear(h, w, b)
            if i < len(self.layers) - 1:
                h = tanh(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.data + b.data
            if i < len(self.layers) - 1:
                h = np.tanh(h)
        return h

    def state_dict(self) -> list[dict]:
        return [{"w": w.data.tolist(), "b": b.data.tolist()} for w, b in self.layers]

    def load_state_dict(self, layers: list[dict]) -> None:
        if len(layers) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} layers, got {len(layers)}")
        for (w, b), blob in zip(self.layers, layers):
            nw, nb = np.array(blob["w"], dtype=np.float64), np.array(blob["b"], dtype=np.float64)
            if nw.shape != w.shape or nb.shape != b.shape:
                raise ShapeError(f"layer shape mismatch: {nw.shape}/{nb.shape} vs {w.shape}/{b.shape}")
            w.data, b.data = nw, nb
