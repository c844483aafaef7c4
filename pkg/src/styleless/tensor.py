"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive executed on an input that requires a gradient is appended to
the active :class:`Tape`. :func:`backward` replays that tape in reverse from a
scalar root. Gradient buffers are plain numpy arrays.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class GradError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default: Tape | None = None
        self.grad_enabled = True


_state = _State()


class Node:
    """One recorded primitive: inputs, output and the vector-Jacobian product.

    The output is held weakly so a graph never forms a reference cycle and its
    buffers are released as soon as the caller drops the result.
    """

    __slots__ = ("op", "inputs", "_output", "out_id", "vjp", "tape", "index", "__weakref__")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self._output = weakref.ref(output)
        self.out_id = id(output)
        self.vjp = vjp
        self.tape = None
        self.index = -1

    @property
    def output(self) -> "Tensor | None":
        return self._output()


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager to make it the active tape for the current thread::

        with Tape():
            loss = f(x)
            grads = backward(loss)

    Nodes are held weakly: a node lives exactly as long as its output tensor, so
    dropping the results of a computation frees its graph.
    """

    def __init__(self):
        self._refs: list[weakref.ref] = []

    def record(self, node: Node) -> None:
        node.tape = self
        node.index = len(self._refs)
        self._refs.append(weakref.ref(node))

    @property
    def nodes(self) -> list[Node]:
        """Live nodes in execution order."""
        return [n for n in (r() for r in self._refs) if n is not None]

    def clear(self) -> None:
        for n in self.nodes:
            n.tape = None
        self._refs = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, t: "Tensor") -> bool:
        n = t._node
        return n is not None and n.tape is self and self._refs[n.index]() is n

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


def active_tape() -> Tape:
    if _state.stack:
        return _state.stack[-1]
    if _state.default is None:
        _state.default = Tape()
    return _state.default


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return tensors that do not require grad."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if np.isscalar(o):
            return scale(self, o)
        return mul(self, o)

    def __rmul__(self, o):
        return self.__mul__(o)

    def __truediv__(self, o):
        if np.isscalar(o):
            return scale(self, 1.0 / o)
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _check_same_dtype(ts: Sequence[Tensor]) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise DTypeError(f"dtype mismatch: {sorted(str(d) for d in dts)}")


def _emit(op: str, data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        node = Node(op, inputs, out, vjp)
        active_tape().record(node)
        out._node = node
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _emit("div", out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)

    def vjp(g):
        return (g * s,)

    return _emit("scale", a.data * s, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"shape mismatch for matmul: {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"shape mismatch for matmul: {a.shape} vs {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", a.data * mask, (a,), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(n), a.shape).copy(),)

    return _emit("mean", np.asarray(out, dtype=a.dtype), (a,), vjp)


def tmax(a: Tensor, axis: int | None = None, keepdims=False) -> Tensor:
    """Maximum along one axis (or all). The gradient goes to the first argmax."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)

        def vjp(g):
            ga = np.zeros(a.size, dtype=a.dtype)
            ga[idx] = np.asarray(g).reshape(-1)[0]
            return (ga.reshape(a.shape),)

        return _emit("max", np.asarray(out, dtype=a.dtype), (a,), vjp)

    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)

    return _emit("max", out, (a,), vjp)


def sumsq(a: Tensor) -> Tensor:
    """Squared Frobenius norm over all entries."""
    out = np.asarray(np.sum(a.data * a.data), dtype=a.dtype)

    def vjp(g):
        return (2 * g * a.data,)

    return _emit("frobenius_sq", out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: cannot reshape {a.shape} to {shape}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", out, (a,), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"shape mismatch: axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", np.transpose(a.data, axes), (a,), vjp)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    _check_same_dtype(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"shape mismatch: {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, tensors, vjp)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: (N, C, Hp, Wp) -> (N, C*k*k, ho*wo)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _correlate(xp: np.ndarray, wmat: np.ndarray, k: int, stride: int, ho: int, wo: int):
    cols = _im2col(xp, k, stride, ho, wo)
    return np.matmul(wmat, cols), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Direct cross-correlation. x is (C,H,W) or (N,C,H,W); w is (O,C,k,k).

    Default padding k//2 keeps the spatial size at stride 1.
    """
    ins = (x, w) if b is None else (x, w, b)
    _check_same_dtype(ins)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"shape mismatch: kernel must be (O,C,k,k), got {w.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"shape mismatch: conv2d input must be 3-D or 4-D, got {x.shape}")
    xd = x.data[None] if single else x.data
    o, c, k, _ = w.shape
    if xd.shape[1] != c:
        raise ShapeError(f"shape mismatch: input {x.shape} vs kernel {w.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"shape mismatch: bias {b.shape} vs kernel {w.shape}")
    pad = k // 2 if padding is None else padding
    n, _, h, wd = xd.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    wmat = w.data.reshape(o, -1)
    out, cols = _correlate(xp, wmat, k, stride, ho, wo)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, ho, wo)
    if single:
        out = out[0]

    def vjp(g):
        g4 = g[None] if single else g
        gm = g4.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            # input gradient = full correlation of the (dilated) output gradient
            # with the spatially flipped, channel-transposed kernel
            if stride > 1:
                gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g4.dtype)
                gd[:, :, ::stride, ::stride] = g4
            else:
                gd = g4
            gdp = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1))) if k > 1 else gd
            hc, wc = gd.shape[2] + k - 1, gd.shape[3] + k - 1
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gcov, _ = _correlate(gdp, wflip, k, 1, hc, wc)
            gcov = gcov.reshape(n, c, hc, wc)
            hp, wp = h + 2 * pad, wd + 2 * pad
            if (hc, wc) != (hp, wp):
                gxp = np.zeros((n, c, hp, wp), dtype=g4.dtype)
                gxp[:, :, :hc, :wc] = gcov
            else:
                gxp = gcov
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            if single:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    return _emit("conv2d", out, ins, vjp)


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Mean pixelwise cross-entropy.

    logits: (C,H,W) or (N,C,H,W); labels: matching (H,W) or (N,H,W) integer ids.
    Pixels labelled ``ignore_index`` are skipped.
    """
    labels = np.asarray(labels)
    single = logits.ndim == 3
    z = logits.data[None] if single else logits.data
    lab = labels[None] if single else labels
    if z.ndim != 4 or lab.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(f"shape mismatch: logits {logits.shape} vs labels {labels.shape}")
    c = z.shape[1]
    lab = lab.astype(np.int64)
    valid = lab != ignore_index
    if np.any(lab[valid] >= c) or np.any(lab[valid] < 0):
        raise ValueError(f"label out of range for {c} classes")
    nvalid = int(valid.sum())
    if nvalid == 0:
        raise ValueError("no valid pixels")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(se)
    safe = np.where(valid, lab, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / nvalid

    def vjp(g):
        p = ez / se
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        gz = (p - onehot) * valid[:, None] * (np.asarray(g) / nvalid)
        gz = gz.astype(logits.dtype, copy=False)
        return (gz[0] if single else gz,)

    return _emit("softmax_xent", np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "mean": mean,
    "max": tmax,
    "frobenius_sq": sumsq,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda ts, axis=0: concat(ts, axis),
    "scale": scale,
    "softmax_xent": softmax_cross_entropy,
    "sum": tsum,
    "div": div,
}


def forward_primitive(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_primitive("add", [a, b])``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients produced by this call, keyed by leaf tensor.
    """
    if root.size != 1:
        raise GradError(f"backward needs a scalar root, got shape {root.shape}")
    node = root._node
    if node is None or node.tape is None or not (root in node.tape):
        raise GradError("root is detached: it was not recorded on a live tape")
    tape = node.tape
    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for ref in reversed(tape._refs[: node.index + 1]):
        n = ref()
        if n is None or n.output is None:  # dropped and unused downstream
            continue
        g = pending.pop(n.out_id, None)
        if g is None:
            continue
        grads = n.vjp(g)
        for inp, gi in zip(n.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                if key in leaves:
                    leaves[key] = (inp, leaves[key][1] + gi)
                else:
                    leaves[key] = (inp, gi)
            elif key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
    out: dict[Tensor, np.ndarray] = {}
    for leaf, g in leaves.values():
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    Error per coordinate is |a - n| / max(1, |a|, |n|). Runs in float64.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape():
        y = f(xt)
        if y._node is not None:
            backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with Tape():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            fp = f(Tensor(xp.reshape(base.shape))).item()
            xm = flat.copy()
            xm[i] -= eps
            fm = f(Tensor(xm.reshape(base.shape))).item()
            numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
