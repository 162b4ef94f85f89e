"""Reverse-mode automatic differentiation over dense float64 arrays.

Design notes
------------
The graph is define-by-run: every op records its parents and a vector-Jacobian
closure on the output tensor, and `backward()` replays the tape in reverse
topological order. Graphs are rebuilt on every forward pass, which keeps
variable-size inputs (documents have different lengths and entity counts)
trivially correct.

Everything is float64. The test suite leans on tight numerical oracles
(finite differences, closed forms, brute-force sums), and float32 noise would
force loose tolerances everywhere for no benefit at this scale.

Any op that produces a NaN or Inf raises immediately; silent contamination of
a training run is far harder to debug than an eager failure.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors are value-semantic containers; ops never mutate their inputs.
    `grad` accumulates across backward calls until `zero_grad` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item: tensor has {self.data.size} elements, expected 1")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; all routing goes through the module-level ops.

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _assert_finite(op: str, arr: np.ndarray) -> None:
    # One reduction instead of isfinite().all(): any NaN or +/-Inf poisons the
    # sum. The ndarray method avoids np.sum's dispatch wrapper on this hot path.
    if not math.isfinite(float(arr.sum())):
        raise FloatingPointError(f"{op}: non-finite values in output")


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are live.

    `vjp` maps the output gradient to a tuple of parent gradients aligned with
    `parents` (None for parents that do not require grad).
    """
    _assert_finite(op, data)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _node("add", data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _node("sub", data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _node(
        "mul",
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _node(
        "div",
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        root = np.sqrt(a.data)
    return _node("sqrt", root, (a,), lambda g: (0.5 * g / root,))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _node("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    """max(x, 0); doubles as the hinge used by the clustering objective."""
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _node("relu", data, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _node("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _node("log", data, (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through unclamped entries."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _node("clip", data, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Shape and indexing
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node("concat", data, tuple(tensors), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = [reshape(as_tensor(t), t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def take(a, idx) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    a = as_tensor(a)
    data = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node("take", np.asarray(data, dtype=np.float64), (a,), vjp)


def gather(a, index) -> Tensor:
    """Index axis 0 with an integer array; duplicate rows accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ValueError(f"gather: index out of range for axis 0 of shape {a.shape}")
    data = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node("gather", data, (a,), vjp)


# ---------------------------------------------------------------------------
# Contractions and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node("matmul", data, (a, b), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-stable softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _node("softmax", s, (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Shift-stable log-sum-exp along `axis`; gradient is the softmax."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    total = e.sum(axis=axis, keepdims=True)
    data = m + np.log(total)
    soft = e / total
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (soft * g,)

    return _node("logsumexp", data, (a,), vjp)


def cosine_similarity(a, b, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Cosine of the angle between `a` and `b` along `axis` (broadcasting).

    A zero-norm operand yields cosine 0 with zero gradient rather than a
    division error; callers that care can inspect the norms themselves.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = np.broadcast_arrays(a.data, b.data)
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    denom = na * nb
    ok = denom > 0.0
    safe = np.where(ok, denom, 1.0)
    cos = np.where(ok, dot / safe, 0.0)
    data = cos if keepdims else np.squeeze(cos, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        g = g * ok
        sa = np.where(na > 0.0, na, 1.0)
        sb = np.where(nb > 0.0, nb, 1.0)
        ga = g * (bd / safe - cos * ad / (sa * sa))
        gb = g * (ad / safe - cos * bd / (sb * sb))
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node("cosine_similarity", data, (a, b), vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the recorded graph (recursion-depth safe)."""
    order: list[Tensor] = []
    seen = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child = stack[-1]
        if child < len(node._parents):
            stack[-1] = (node, child + 1)
            parent = node._parents[child]
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires-grad leaf reachable from `loss`.

    Graph-internal results only relay gradients; `grad` is stored on tensors
    created without a recorded op (parameters and direct inputs). Repeated
    calls accumulate; a tensor feeding the graph k times receives k
    contributions within a single call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            have = flowing.get(id(parent))
            flowing[id(parent)] = pg if have is None else have + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |a - n| / max(1e-8, |a| + |n|); `f` must map a
    tensor to a scalar tensor.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad.copy()

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(probe).item()
            flat[i] = orig - h
            lo = f(probe).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
                      sample: int | None = None, rng=None,
                      select: str = "random") -> dict[str, float]:
    """Finite-difference check of `loss_fn()` against parameter coordinates.

    `loss_fn` closes over `params` and returns a scalar tensor; returns the
    max relative error per parameter name. By default every coordinate is
    probed; `sample` caps the probes per parameter so large models stay
    affordable, either at random (`select="random"`, using `rng`) or at the
    largest analytic gradients (`select="top"`), where finite differences
    have the most signal relative to their noise floor.
    """
    if select not in ("random", "top"):
        raise ValueError(f"unknown selection mode {select!r}")
    zero_grads(params.values())
    backward(loss_fn())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

    errors: dict[str, float] = {}
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            if sample is not None and flat.size > sample:
                if select == "top":
                    mags = np.abs(analytic[name].reshape(-1))
                    coords = np.sort(np.argsort(-mags)[:sample])
                else:
                    if rng is None:
                        rng = np.random.default_rng(0)
                    coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
            else:
                coords = np.arange(flat.size)
            numeric = np.zeros(coords.size)
            for slot, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_fn().item()
                flat[i] = orig - h
                lo = loss_fn().item()
                flat[i] = orig
                numeric[slot] = (hi - lo) / (2.0 * h)
            a = analytic[name].reshape(-1)[coords]
            denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
            errors[name] = float(np.max(np.abs(a - numeric) / denom)) if coords.size else 0.0
    zero_grads(params.values())
    return errors
