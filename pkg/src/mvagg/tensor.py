"""Minimal dense tensor with define-by-run reverse-mode differentiation.

Tensors are immutable numpy-backed values. Operations executed inside a
``recording()`` block append a node to the active :class:`DiffRecord`;
:func:`backward` walks that record in reverse to produce gradients.

Storage defaults to float32. Passing float64 data puts a computation in
"precision mode": every op preserves the input dtype, which is what the
finite-difference checks use.
"""
from __future__ import annotations

import contextlib
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension so callers can report it.
    """

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "name")

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arr, dtype=dtype, order="C")
        if arr is data:
            arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # op outputs are fresh arrays owned by nobody else; skip the copy
        t = cls.__new__(cls)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        arr = np.asarray(arr, order="C")
        arr.setflags(write=False)
        t.data = arr
        t.name = None
        return t

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{label})"

    # operator sugar for the common cases
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def zeros(shape: Sequence[int], dtype=np.float32, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), name=name)


def ones(shape: Sequence[int], dtype=np.float32, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype), name=name)


# --------------------------------------------------------------------------
# Recording


class Node:
    __slots__ = ("fn", "inputs", "output")

    def __init__(self, fn: "Function", inputs: Tuple[Tensor, ...], output: Tensor):
        self.fn = fn
        self.inputs = inputs
        self.output = output

    def replay(self) -> np.ndarray:
        return self.fn.forward(*(t.data for t in self.inputs))


class DiffRecord:
    """Ordered list of the nodes applied during one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def output(self) -> Optional[Tensor]:
        return self.nodes[-1].output if self.nodes else None

    def leaves(self) -> Dict[str, Tensor]:
        produced = {id(n.output) for n in self.nodes}
        found: Dict[str, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.name and id(t) not in produced:
                    found.setdefault(t.name, t)
        return found


_active: List[DiffRecord] = []


@contextlib.contextmanager
def recording():
    rec = DiffRecord()
    _active.append(rec)
    try:
        yield rec
    finally:
        _active.pop()


@contextlib.contextmanager
def no_recording():
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


class Function:
    """One differentiable operation.

    ``forward`` receives raw arrays and may stash whatever it needs on
    ``self``; ``backward`` returns one gradient array (or None) per input.
    """

    # set by backward(): which inputs actually need a gradient
    needs: Optional[Tuple[bool, ...]] = None

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, *arrays: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(**kwargs)
        out = Tensor._wrap(np.asarray(fn.forward(*(t.data for t in inputs))))
        if _active:
            _active[-1].nodes.append(Node(fn, inputs, out))
        return out

    def __init__(self, **kwargs):
        for key, value in kwargs.items():
            setattr(self, key, value)


def backward(
    record: DiffRecord,
    output_grad,
    output: Optional[Tensor] = None,
    wrt: Optional[Mapping[str, Tensor]] = None,
) -> Dict[str, Tensor]:
    """Gradients of ``output`` (default: last recorded output) w.r.t. named tensors.

    With ``wrt`` given, every entry gets a gradient; entries the output does
    not depend on receive zeros. Otherwise all named leaves of the record are
    returned.
    """
    if output is None:
        output = record.output
    if output is None:
        raise ValueError("backward: empty record")
    g = np.asarray(output_grad.data if isinstance(output_grad, Tensor) else output_grad)
    if g.shape != output.shape:
        if g.size == 1 and output.size == 1:
            g = g.reshape(output.shape)
        else:
            raise ShapeError("backward", "output_grad", list(output.shape), list(g.shape))
    grads: Dict[int, np.ndarray] = {id(output): g.astype(output.dtype, copy=False)}

    targets = dict(wrt) if wrt is not None else record.leaves()
    needed = {id(t) for t in targets.values()} | {id(n.output) for n in record.nodes}
    for node in reversed(record.nodes):
        gout = grads.get(id(node.output))
        if gout is None:
            continue
        node.fn.needs = tuple(id(t) in needed for t in node.inputs)
        in_grads = node.fn.backward(gout, *(t.data for t in node.inputs))
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result: Dict[str, Tensor] = {}
    for name, t in targets.items():
        gi = grads.get(id(t))
        if gi is None:
            result[name] = Tensor(np.zeros(t.shape, dtype=t.dtype))
        else:
            result[name] = Tensor(np.asarray(gi, dtype=t.dtype))
    return result


# --------------------------------------------------------------------------
# Convolution


def _check_rank(op: str, arr: np.ndarray, rank: int, label: str):
    if arr.ndim != rank:
        raise ShapeError(op, f"{label}.rank", rank, arr.ndim)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, ph: ph + h, pw: pw + w] = x
    return out


class Conv2d(Function):
    stride = 1
    padding = 0
    dilation = 1

    def _cols(self, x: np.ndarray, kh: int, kw: int):
        s, p, d = self.stride, self.padding, self.dilation
        c, h, w = x.shape
        xp = _pad_hw(x, p, p) if p else x
        ho = (h + 2 * p - d * (kh - 1) - 1) // s + 1
        wo = (w + 2 * p - d * (kw - 1) - 1) // s + 1
        cs, hs, ws = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp,
            shape=(c, kh, kw, ho, wo),
            strides=(cs, hs * d, ws * d, hs * s, ws * s),
            writeable=False,
        )
        return view.reshape(c * kh * kw, ho * wo), ho, wo

    def forward(self, x, w, b):
        _check_rank("conv2d", x, 3, "input")
        _check_rank("conv2d", w, 4, "kernel")
        cout, cin, kh, kw = w.shape
        if x.shape[0] != cin:
            raise ShapeError("conv2d", "C_in", cin, x.shape[0])
        if b.shape != (cout,):
            raise ShapeError("conv2d", "C_out", cout, b.shape[0] if b.ndim else b.shape)
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", "kernel.size", "odd", (kh, kw))
        if self.padding < 0:
            raise ShapeError("conv2d", "padding", ">= 0", self.padding)
        for label, n, k in (("H", x.shape[1], kh), ("W", x.shape[2], kw)):
            span = n + 2 * self.padding - self.dilation * (k - 1) - 1
            if span < 0:
                raise ShapeError("conv2d", label, f">= {n - span} after padding", n)
        if kh == kw == 1 and self.stride == 1 and self.padding == 0:
            cols, ho, wo = x.reshape(cin, -1), x.shape[1], x.shape[2]
        else:
            cols, ho, wo = self._cols(x, kh, kw)
        self.cols = cols
        self.out_hw = (ho, wo)
        out = w.reshape(cout, -1) @ cols
        out += b[:, None]
        return out.reshape(cout, ho, wo)

    def backward(self, g, x, w, b):
        cout, cin, kh, kw = w.shape
        ho, wo = self.out_hw
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ self.cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        if self.needs is not None and not self.needs[0]:
            return None, gw, gb
        s, p, d = self.stride, self.padding, self.dilation
        _, h, wd = x.shape
        if kh == kw == 1 and s == 1 and p == 0:
            return (w.reshape(cout, cin).T @ g2).reshape(x.shape), gw, gb
        if s == 1 and (kh - 1) * d >= p and (kw - 1) * d >= p:
            # input gradient as a correlation of the padded output gradient with the flipped kernel
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            back = Conv2d(stride=1, padding=0, dilation=d)
            ph, pw = (kh - 1) * d - p, (kw - 1) * d - p
            gpad = _pad_hw(g, ph, pw)
            gcol, _, _ = back._cols(gpad, kh, kw)
            gx = (flipped.reshape(cin, -1) @ gcol).reshape(cin, gpad.shape[1] - (kh - 1) * d, gpad.shape[2] - (kw - 1) * d)
            return gx[:, :h, :wd], gw, gb
        gcols = (w.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros((cin, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s] += gcols[:, i, j]
        gx = gxp[:, p: p + h, p: p + wd] if p else gxp
        return gx, gw, gb


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding, dilation=dilation)


class Linear(Function):
    def forward(self, x, w, b):
        if w.ndim != 2:
            raise ShapeError("linear", "weight.rank", 2, w.ndim)
        if x.shape[-1] != w.shape[1]:
            raise ShapeError("linear", "C_in", w.shape[1], x.shape[-1])
        if b.shape != (w.shape[0],):
            raise ShapeError("linear", "C_out", w.shape[0], b.shape)
        return x @ w.T + b

    def backward(self, g, x, w, b):
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ w, g2.T @ x2, g2.sum(axis=0)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


# --------------------------------------------------------------------------
# Reductions and normalisation


def _check_axis(op: str, arr: np.ndarray, axis: int) -> int:
    if not -arr.ndim <= axis < arr.ndim:
        raise ShapeError(op, "axis", f"in [-{arr.ndim}, {arr.ndim})", axis)
    return axis % arr.ndim


class Softmax(Function):
    axis = -1

    def forward(self, x):
        ax = _check_axis("softmax", x, self.axis)
        z = x - x.max(axis=ax, keepdims=True)
        e = np.exp(z)
        # 64-bit accumulation for the normaliser
        s = e.sum(axis=ax, keepdims=True, dtype=np.float64)
        self.out = (e / s).astype(x.dtype)
        return self.out

    def backward(self, g, x):
        ax = self.axis % x.ndim
        y = self.out
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class _Pool(Function):
    """Max or mean reduction over a fixed set of axes of a [C,H,W] tensor."""

    mode = "max"
    axes: Tuple[int, ...] = ()
    keepdims = False
    opname = "pool"

    def forward(self, x):
        _check_rank(self.opname, x, 3, "input")
        if x.shape[1] < 1 or x.shape[2] < 1 or x.shape[0] < 1:
            raise ShapeError(self.opname, "extent", ">= 1", x.shape)
        if self.mode == "max":
            return x.max(axis=self.axes, keepdims=self.keepdims)
        if self.mode == "avg":
            return x.mean(axis=self.axes, keepdims=self.keepdims, dtype=np.float64).astype(x.dtype)
        raise ValueError(f"{self.opname}: unknown mode {self.mode!r}")

    def backward(self, g, x):
        shape_k = [1 if i in self.axes else n for i, n in enumerate(x.shape)]
        gk = g.reshape(shape_k)
        if self.mode == "avg":
            count = int(np.prod([x.shape[i] for i in self.axes]))
            return (np.broadcast_to(gk / count, x.shape).astype(x.dtype),)
        # gradient goes to the first maximum in scan order
        moved = np.moveaxis(x, self.axes, tuple(range(x.ndim - len(self.axes), x.ndim)))
        keep_shape = moved.shape[: x.ndim - len(self.axes)]
        flat = moved.reshape(keep_shape + (-1,))
        idx = flat.argmax(axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        mask = np.moveaxis(mask.reshape(moved.shape), tuple(range(x.ndim - len(self.axes), x.ndim)), self.axes)
        return (mask * gk,)


class PoolSpatial(_Pool):
    axes = (1, 2)
    opname = "pool_spatial"


class PoolChannel(_Pool):
    axes = (0,)
    keepdims = True
    opname = "pool_channel"


def pool_spatial(x: Tensor, mode: str = "max") -> Tensor:
    """[C,H,W] -> [C]"""
    return PoolSpatial.apply(x, mode=mode)


def pool_channel(x: Tensor, mode: str = "max") -> Tensor:
    """[C,H,W] -> [1,H,W]"""
    return PoolChannel.apply(x, mode=mode)


class Sum(Function):
    def forward(self, x):
        return np.asarray(x.sum(dtype=np.float64), dtype=x.dtype)

    def backward(self, g, x):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)


def tsum(x: Tensor) -> Tensor:
    return Sum.apply(x)


# --------------------------------------------------------------------------
# Elementwise


def _broadcast_kind(op: str, a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 3 and b.ndim == 1 and b.shape[0] == a.shape[0]:
        return "chan_b"
    if a.ndim == 1 and b.ndim == 3 and a.shape[0] == b.shape[0]:
        return "chan_a"
    if a.ndim == 3 and b.ndim == 3 and b.shape[0] == 1 and a.shape[1:] == b.shape[1:]:
        return "map_b"
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] == 1 and a.shape[1:] == b.shape[1:]:
        return "map_a"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    raise ShapeError(op, "shape", list(a.shape), list(b.shape))


def _expand(arr: np.ndarray, kind: str, side: str, other: np.ndarray):
    if kind == f"chan_{side}":
        return arr[:, None, None]
    return arr


def _reduce_to(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == f"chan_{side}":
        return g.sum(axis=(1, 2))
    if kind == f"map_{side}":
        return g.sum(axis=0, keepdims=True)
    if kind == f"scalar_{side}":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g


class Add(Function):
    def forward(self, a, b):
        self.kind = _broadcast_kind("add", a, b)
        return _expand(a, self.kind, "a", b) + _expand(b, self.kind, "b", a)

    def backward(self, g, a, b):
        return _reduce_to(g, self.kind, "a", a.shape), _reduce_to(g, self.kind, "b", b.shape)


class Mul(Function):
    def forward(self, a, b):
        self.kind = _broadcast_kind("mul", a, b)
        return _expand(a, self.kind, "a", b) * _expand(b, self.kind, "b", a)

    def backward(self, g, a, b):
        ea = _expand(a, self.kind, "a", b)
        eb = _expand(b, self.kind, "b", a)
        return _reduce_to(g * eb, self.kind, "a", a.shape), _reduce_to(g * ea, self.kind, "b", b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "mul":
        return mul(a, b)
    if op == "add":
        return add(a, b)
    raise ValueError(f"elementwise: unknown op {op!r}")


class Scale(Function):
    factor = 1.0

    def forward(self, x):
        return x * x.dtype.type(self.factor)

    def backward(self, g, x):
        return (g * g.dtype.type(self.factor),)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


class Relu(Function):
    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, g, x):
        return (g * (x > 0),)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, g, x):
        return (g * self.out * (1 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# --------------------------------------------------------------------------
# Shape manipulation


class Concat(Function):
    axis = 0

    def forward(self, *xs):
        if not xs:
            raise ShapeError("concat", "inputs", ">= 1", 0)
        ax = _check_axis("concat", xs[0], self.axis)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref):
                raise ShapeError("concat", "rank", len(ref), x.ndim)
            for i, (n, m) in enumerate(zip(ref, x.shape)):
                if i != ax and n != m:
                    raise ShapeError("concat", f"dim{i}", n, m)
        self.ax = ax
        self.splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return np.concatenate(xs, axis=ax)

    def backward(self, g, *xs):
        return tuple(np.split(g, self.splits, axis=self.ax))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Reshape(Function):
    shape: Tuple[int, ...] = ()

    def forward(self, x):
        if int(np.prod(self.shape)) != x.size:
            raise ShapeError("reshape", "size", x.size, int(np.prod(self.shape)))
        return x.reshape(self.shape)

    def backward(self, g, x):
        return (g.reshape(x.shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class IndexSelect(Function):
    """Gather along axis 0 with a fixed integer index list."""

    index: np.ndarray = np.zeros(0, dtype=np.int64)

    def forward(self, x):
        idx = np.asarray(self.index, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeError("index_select", "index", f"in [0, {x.shape[0]})", idx.tolist())
        return x[idx]

    def backward(self, g, x):
        gx = np.zeros_like(x)
        np.add.at(gx, np.asarray(self.index, dtype=np.int64), g)
        return (gx,)


def index_select(x: Tensor, index: Iterable[int]) -> Tensor:
    return IndexSelect.apply(x, index=np.asarray(list(index), dtype=np.int64))


class SparseMap(Function):
    """Apply a fixed sparse matrix to the flattened trailing dims of [C, ...]."""

    matrix = None
    out_shape: Tuple[int, ...] = ()

    def forward(self, x):
        c = x.shape[0]
        m = self.matrix
        if m.shape[1] != x[0].size:
            raise ShapeError("sparse_map", "source", m.shape[1], x[0].size)
        out = (m @ x.reshape(c, -1).T).T
        return np.ascontiguousarray(out, dtype=x.dtype).reshape((c,) + tuple(self.out_shape))

    def backward(self, g, x):
        c = x.shape[0]
        gx = (self.matrix.T @ g.reshape(c, -1).T).T
        return (np.ascontiguousarray(gx, dtype=x.dtype).reshape(x.shape),)


def sparse_map(x: Tensor, matrix, out_shape: Sequence[int]) -> Tensor:
    return SparseMap.apply(x, matrix=matrix, out_shape=tuple(out_shape))
