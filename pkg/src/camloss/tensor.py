"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` (entered with ``with tape:``)
only when at least one input requires a gradient. Outside a tape every
operation is a plain numpy computation, which is how frozen networks (the
distillation teacher, evaluation passes) run.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_PRECISIONS = {"single": np.float32, "double": np.float64}
_dtype = np.float32
_state = threading.local()


def set_precision(name: str) -> None:
    """Switch the run-wide floating point precision ('single' or 'double')."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = {v: k for k, v in _PRECISIONS.items()}[_dtype]
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    Leaf tensors with ``requires_grad=True`` are parameters; their gradients
    accumulate in ``grad`` across backward passes until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def key(self):
        return self.name if self.name is not None else id(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so list order is a valid
    topological order.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, data: np.ndarray, parents, backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = True
        out.grad = None
        out.name = None
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(Node(op, tuple(parents), backward))
        return out

    def clear(self) -> None:
        self.nodes.clear()


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Run a block with recording disabled, even inside an active tape."""
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        return tape.record(op, data, parents, backward)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    out._index = -1
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit("add", a.data + _dtype(c), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        if b == 0:
            raise ZeroDivisionError("div: scalar divisor is zero")
        return scale(a, 1.0 / b)
    _same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor has zero elements")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, s: float) -> Tensor:
    s = _dtype(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _emit("relu", out, (x,), lambda g: (g * (out > 0),))


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, abs, scale."""
    if kind == "abs":
        return abs(a)
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


# ----------------------------------------------------------------- reductions


def _norm_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ValueError(f"axis {ax} out of range for rank {x.ndim}")
        out.append(ax % x.ndim)
    return tuple(sorted(set(out)))


def _extremum(x: Tensor, axes, keepdims: bool, largest: bool) -> Tensor:
    axes = _norm_axes(x, axes)
    kept = [ax for ax in range(x.ndim) if ax not in axes]
    # move reduced axes last, flatten them in row-major order; argmax/argmin
    # return the first attaining index
    moved = np.transpose(x.data, kept + list(axes))
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1) if largest else flat.argmin(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if ax in axes else n for ax, n in enumerate(x.shape))
    out = vals.reshape(out_shape) if keepdims else vals

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.reshape(g, lead)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(kept + list(axes))),)

    return _emit("max" if largest else "min", np.asarray(out), (x,), backward)


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` (all axes when None).

    min/max route the gradient to the first attaining element in row-major
    order over the reduced axes.
    """
    ax = _norm_axes(x, axes)
    if any(x.shape[a] == 0 for a in ax) or x.data.size == 0:
        raise ValueError("reduce: empty reduction")
    if kind in ("min", "max"):
        return _extremum(x, ax, keepdims, kind == "max")
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    count = int(np.prod([x.shape[a] for a in ax]))
    out = x.data.sum(axis=ax, keepdims=keepdims)
    factor = _dtype(1.0) if kind == "sum" else _dtype(1.0 / count)
    if kind == "mean":
        out = out * factor
    kept_shape = tuple(1 if a in ax else n for a, n in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept_shape) * factor, x.shape).copy(),)

    return _emit(kind, np.asarray(out, dtype=_dtype), (x,), backward)


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicitly repeat size-1 axes of ``x`` to ``shape``.

    This is the only broadcasting the engine performs, and it must be asked for.
    """
    shape = tuple(shape)
    if len(shape) != x.ndim or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ValueError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    out = np.broadcast_to(x.data, shape).copy()
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Axis permutation (materialised contiguously)."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


# ---------------------------------------------------------------- indexing


def take_rows(w: Tensor, index) -> Tensor:
    """Slices ``w[index]`` along the first axis; index is an integer array."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= w.shape[0]):
        raise IndexError(f"row index out of range for {w.shape[0]} rows")

    def backward(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, index, g)
        return (gw,)

    return _emit("take_rows", w.data[index], (w,), backward)


def pick(x: Tensor, index) -> Tensor:
    """``x[i, index[i]]`` for a 2-d tensor, giving shape [N]."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _emit("pick", x.data[rows, index], (x,), backward)


# ---------------------------------------------------------------- network ops


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax along the last axis, stabilised by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - logz
    probs = np.exp(out)
    return _emit(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - probs * g.sum(axis=-1, keepdims=True),),
    )


def global_average_pool(features: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,K,H,W] -> [N,K]."""
    n, k, h, w = features.shape
    if h < 1 or w < 1:
        raise ValueError("global_average_pool: empty spatial extent")
    inv = _dtype(1.0 / (h * w))
    out = features.data.mean(axis=(2, 3), dtype=_dtype)

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, k, h, w)).copy(),)

    return _emit("gap", out, (features,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` for x [N,K] and weight [n,K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _emit("linear", out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]}")
    out = out + bias.data
    return _emit(
        "linear", out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0))
    )


def weighted_channel_sum(features: Tensor, weights: Tensor) -> Tensor:
    """Per-sample weighted channel sum: [N,K,H,W] x [N,K] -> [N,H,W]."""
    n, k, h, w = features.shape
    if weights.shape != (n, k):
        raise ValueError(f"weighted_channel_sum: weights {weights.shape} vs features {features.shape}")
    fd, wd = features.data, weights.data
    out = np.einsum("nkhw,nk->nhw", fd, wd)
    return _emit(
        "weighted_channel_sum",
        out,
        (features, weights),
        lambda g: (wd[:, :, None, None] * g[:, None], np.einsum("nkhw,nhw->nk", fd, g)),
    )


# target size of one chunk of the conv2d column matrix
CONV_CHUNK_BYTES = 1 << 19


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        before, after = (int(p) for p in padding)
    else:
        before = after = int(padding)
    if before < 0 or after < 0:
        raise ValueError("conv2d: padding must be non-negative")
    return before, after


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0,
           layout: str = "NCHW") -> Tensor:
    """Cross-correlation of [N,C,H,W] with [K,C,kh,kw] kernels.

    ``padding`` is either one integer applied to every border or a
    ``(before, after)`` pair applied to top/left and bottom/right. The output
    extent ``(H + pad_total - kh) / stride + 1`` must divide exactly.

    With ``layout="CNHW"`` input and output are channel-major ([C,N,H,W] and
    [K,N,H',W']), which saves two transposes per layer in conv stacks.
    """
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"conv2d: unknown layout {layout!r}")
    channel_major = layout == "CNHW"
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[0 if channel_major else 1] != kernels.shape[1]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} ({layout}) vs {kernels.shape}")
    if stride < 1:
        raise ValueError("conv2d: stride must be positive")
    if channel_major:
        c, n, h, w = x.shape
    else:
        n, c, h, w = x.shape
    k, _, kh, kw = kernels.shape
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {k} kernels")
    p0, p1 = _pad_pair(padding)
    hp, wp = h + p0 + p1, w + p0 + p1
    if kh > hp or kw > wp:
        raise ValueError("conv2d: kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(
            f"conv2d: output size not exact for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {(p0, p1)}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # Channel-major im2col: rows (c, i, j), columns (n, y, x). The batch is
    # processed in chunks whose column matrix stays cache-sized.
    xt = x.data if channel_major else x.data.transpose(1, 0, 2, 3)
    if p0 or p1:
        xt = np.pad(xt, ((0, 0), (0, 0), (p0, p1), (p0, p1)))
    wmat = kernels.data.reshape(k, -1)
    step = max(1, CONV_CHUNK_BYTES // (c * kh * kw * ho * wo * x.data.itemsize))
    chunks = [(a, min(n, a + step)) for a in range(0, n, step)]
    out = np.empty((k, n, ho, wo), dtype=x.data.dtype)
    saved = []
    for a, b in chunks:
        cols = np.empty((c, kh, kw, b - a, ho, wo), dtype=x.data.dtype)
        xa = xt[:, a:b]
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xa[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(c * kh * kw, -1)
        np.matmul(wmat, cols, out=out[:, a:b].reshape(k, -1))
        saved.append(cols)
    if bias is not None:
        out += bias.data[:, None, None, None]
    if not channel_major:
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        gk = g if channel_major else np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gw = np.zeros_like(wmat)
        gxp = np.zeros((c, n, hp, wp), dtype=g.dtype) if x.requires_grad else None
        for (a, b), cols in zip(chunks, saved):
            ga = gk[:, a:b].reshape(k, -1)
            gw += ga @ cols.T
            if gxp is not None:
                dcols = (wmat.T @ ga).reshape(c, kh, kw, b - a, ho, wo)
                sub = gxp[:, a:b]
                for i in range(kh):
                    for j in range(kw):
                        sub[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p0 : p0 + h, p0 : p0 + w]
            if not channel_major:
                gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        gw = gw.reshape(kernels.shape)
        if bias is None:
            return gx, gw
        return gx, gw, gk.sum(axis=(1, 2, 3))

    return _emit("conv2d", out, parents, backward)


# ---------------------------------------------------------------- backward


def _mask_keys(mask) -> frozenset:
    if not mask:
        return frozenset()
    return frozenset(m.key if isinstance(m, Tensor) else m for m in mask)


def backward(tape: Tape, loss: Tensor, mask: Iterable = ()) -> dict:
    """Accumulate d(loss)/d(leaf) into every unmasked leaf reachable from ``loss``.

    Returns the accumulated gradient of every reached leaf keyed by name (or
    object id for unnamed leaves). Masked leaves appear with whatever they had
    accumulated before, zeros if nothing.
    """
    return backward_terms(tape, [(loss, mask)])


def backward_terms(tape: Tape, terms) -> dict:
    """Backward several (loss, mask) terms in one sweep.

    The result equals calling :func:`backward` once per term. Gradient streams
    are kept apart only on nodes that can reach a leaf masked by some terms but
    not others; everywhere else they are summed and propagated once.
    """
    terms = [(loss, _mask_keys(mask)) for loss, mask in terms]
    for loss, _ in terms:
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not tape:
            raise ValueError("backward: loss was not recorded on this tape")
    masks = [m for _, m in terms]
    always = frozenset.intersection(*masks)
    split = frozenset.union(*masks) - always

    nodes = tape.nodes
    last = max(loss._index for loss, _ in terms)
    sensitive = [False] * (last + 1)
    if split:
        for i in range(last + 1):
            sensitive[i] = any(
                (p._tape is tape and p._index >= 0 and sensitive[p._index])
                or (p._index < 0 and p.requires_grad and p.key in split)
                for p in nodes[i].parents
            )

    # grads[i] maps a stream key (a mask, or None once merged) to an array
    grads: list[dict | None] = [None] * (last + 1)
    for loss, m in terms:
        slot = grads[loss._index] = grads[loss._index] or {}
        seed = np.ones_like(loss.data)
        slot[m] = slot[m] + seed if m in slot else seed
    leaves: dict = {}

    for i in range(last, -1, -1):
        streams = grads[i]
        if not streams:
            continue
        grads[i] = None
        if not sensitive[i] and (len(streams) > 1 or None not in streams):
            total = None
            for g in streams.values():
                total = g if total is None else total + g
            streams = {None: total}
        node = nodes[i]
        for key, g in streams.items():
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is tape and parent._index >= 0:
                    slot = grads[parent._index]
                    if slot is None:
                        slot = grads[parent._index] = {}
                    slot[key] = slot[key] + pg if key in slot else pg
                else:
                    leaves[parent.key] = parent
                    blocked = parent.key in always if key is None else parent.key in key
                    if blocked:
                        continue
                    pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg

    return {
        k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for k, leaf in leaves.items()
    }
