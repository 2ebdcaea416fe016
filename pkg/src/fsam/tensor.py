"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 working precision, float64 for the
verification path) together with an optional gradient buffer.  Operations
record their inputs and a backward closure on the output tensor; calling
``backward()`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates d(loss)/d(tensor) into every tensor that
requires grad.

Broadcasting follows the trailing-dimension rule (numpy semantics).  Graphs
are confined to the thread that built them; tensors whose backward pass has
completed may be shared read-only.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy import special as _special


class DimensionError(ValueError):
    """Shapes do not conform for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DomainError(ValueError):
    """Operation applied outside its mathematical domain."""


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision (not connected to the graph)."""
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ---- graph construction --------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if self.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        graph = Graph.trace(self)
        pending = {id(self): np.ones_like(self.data)}
        for t in reversed(graph.nodes):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return tmean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return tmax(self, axes, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Graph:
    """Topologically ordered record of the tensors reaching a root.

    ``nodes`` lists every grad-requiring tensor with inputs before outputs,
    so one reverse sweep visits each recorded operation exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes)


# ---- helpers ------------------------------------------------------------


def astensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    if a.dtype != b.dtype:
        raise ContractError(f"mixed dtypes {a.dtype} and {b.dtype}")
    return a, b


def _check_broadcast(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"shapes {sa} and {sb} are not broadcastable") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were expanded by broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _from_op(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---- binary elementwise ---------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ash, bsh = a.shape, b.shape
    return _from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)),
    )


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ash, bsh = a.shape, b.shape
    return _from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)),
    )


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _from_op(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def neg(a):
    return _from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs 2-d operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} x {bd.shape}")
    _check_broadcast(ad.shape[:-2], bd.shape[:-2])
    out = np.matmul(ad, bd)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _from_op(out, (a, b), backward)


# ---- unary elementwise ----------------------------------------------------


def relu(a):
    mask = a.data > 0
    return _from_op(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + _special.erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _from_op(
        (x * cdf).astype(x.dtype),
        (a,),
        lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),),
    )


def sigmoid(a):
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # keep the output strictly inside (0, 1) even where exp saturates
    one = x.dtype.type(1)
    y = np.clip(y, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0)))
    return _from_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def texp(a):
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def tlog(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    x = a.data
    return _from_op(np.log(x), (a,), lambda g: (g / x,))


def power(a, exponent: float):
    p = float(exponent)
    x = a.data
    if p != int(p) and np.any(x < 0):
        raise DomainError(f"fractional power {p} of negative value")
    out = x ** np.array(p, dtype=x.dtype)
    grad_coeff = p * x ** np.array(p - 1.0, dtype=x.dtype)
    return _from_op(out, (a,), lambda g: ((g * grad_coeff).astype(x.dtype),))


def sqrt(a):
    return power(a, 0.5)


def clip(a, lo: float, hi: float):
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return _from_op(np.clip(x, lo, hi), (a,), lambda g: (g * mask,))


# ---- reductions -----------------------------------------------------------


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"duplicate reduction axes {axes}")
    return tuple(sorted(out))


def _check_nonempty(shape, axes):
    for ax in axes:
        if shape[ax] == 0:
            raise DomainError(f"empty reduction over zero-extent axis {ax}")


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        shape = list(in_shape)
        for ax in axes:
            shape[ax] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def tsum(a, axes=None, keepdims=False):
    axes = _normalize_axes(axes, a.ndim)
    _check_nonempty(a.shape, axes)
    in_shape = a.shape
    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)
    return _from_op(
        np.asarray(out, dtype=a.dtype),
        (a,),
        lambda g: (_expand_reduced(g, in_shape, axes, keepdims).copy(),),
    )


def tmean(a, axes=None, keepdims=False):
    axes = _normalize_axes(axes, a.ndim)
    _check_nonempty(a.shape, axes)
    in_shape = a.shape
    count = 1
    for ax in axes:
        count *= in_shape[ax]
    inv = a.dtype.type(1.0 / count)
    out = a.data.mean(axis=axes if axes else None, keepdims=keepdims)
    return _from_op(
        np.asarray(out, dtype=a.dtype),
        (a,),
        lambda g: (_expand_reduced(g * inv, in_shape, axes, keepdims).copy(),),
    )


def tmax(a, axes=None, keepdims=False):
    """Max over axes; ties route the gradient to the lowest flat index."""
    axes = _normalize_axes(axes, a.ndim)
    _check_nonempty(a.shape, axes)
    in_shape = a.shape
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    reduced = 1
    for ax in axes:
        reduced *= in_shape[ax]
    blocks = a.data.transpose(perm).reshape(-1, reduced)
    argmax = np.argmax(blocks, axis=1)
    out = a.data.max(axis=axes if axes else None, keepdims=keepdims)

    def backward(g):
        gx = np.zeros_like(blocks)
        gx[np.arange(blocks.shape[0]), argmax] = g.reshape(-1)
        inv = np.argsort(perm)
        return (gx.reshape([in_shape[i] for i in perm]).transpose(inv),)

    return _from_op(np.asarray(out, dtype=a.dtype), (a,), backward)


# ---- shape ops ------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    in_shape = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {in_shape} to {shape}") from None
    return _from_op(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"bad transpose axes {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _from_op(
        a.data.transpose(axes),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def softmax(a, axis: int = -1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _from_op(s, (a,), backward)


# ---- spec-facing dispatchers ----------------------------------------------

_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"neg": neg, "relu": relu, "gelu": gelu, "sigmoid": sigmoid,
          "exp": texp, "log": tlog}


def elementwise(op_tag: str, a, b=None, **kwargs):
    """Pointwise op by tag: add/sub/mul/div take two operands, power takes
    ``b`` as the exponent, clip takes ``lo``/``hi`` keywords."""
    if op_tag in _BINARY:
        return _BINARY[op_tag](a, b)
    if op_tag in _UNARY:
        return _UNARY[op_tag](a)
    if op_tag == "power":
        return power(a, b if b is not None else kwargs["exponent"])
    if op_tag == "clip":
        return clip(a, kwargs["lo"], kwargs["hi"])
    raise ContractError(f"unknown elementwise op {op_tag!r}")


def reduce(op_tag: str, a, axes=None, keepdims=False):
    ops = {"sum": tsum, "mean": tmean, "max": tmax}
    if op_tag not in ops:
        raise ContractError(f"unknown reduce op {op_tag!r}")
    return ops[op_tag](a, axes, keepdims)
