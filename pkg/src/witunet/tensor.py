"""Dense float tensors with reverse-mode autodiff and the WTEN file format.

Values are row-major numpy arrays, float32 by default (float64 is allowed so
gradient checks can run in a high-precision mode). Each op is a pure function:
identical inputs give bit-identical outputs. When gradients are enabled, ops
record themselves onto the implicit tape (the op graph); ``Tensor.backward``
replays the records in reverse execution order and accumulates ``.grad`` on
every tensor that requires it.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ShapeError, StateError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables op recording (inference / timing paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float ndarray plus autodiff hooks.

    ``data`` is always C-contiguous. ``grad`` is filled by backward() for
    tensors with requires_grad=True (parameters, probed inputs) and for
    intermediates while the tape replays.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _needs_grad(self) -> bool:
        return self.requires_grad or self._backward is not None

    # -- backward engine ------------------------------------------------
    def backward(self, grad=None):
        """Replay the recorded tape from this tensor, accumulating gradients.

        ``grad`` seeds the output gradient (defaults to ones, so a scalar loss
        needs no argument). Raises StateError when no forward was recorded.
        """
        if self._backward is None:
            raise StateError("backward called on a tensor with no recorded forward")
        tape = GradTape(self)
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed grad shape {grad.shape} != value shape {self.data.shape}")
        tape.backward(grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class GradTape:
    """Execution-ordered record of the ops reachable from a root tensor.

    The tape is rebuilt from the graph by an iterative topological sort
    (recursion-free: deep nets overflow Python's stack otherwise). Replaying
    it in reverse visits every op exactly once and accumulates parent grads.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.ops = order  # topological: parents before children

    def backward(self, seed_grad: np.ndarray):
        root = self.ops[-1]
        root.grad = seed_grad if root.grad is None else root.grad + seed_grad
        for node in reversed(self.ops):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent._needs_grad():
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"backward produced grad shape {pg.shape} for value shape {parent.data.shape}"
                    )
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result; records the backward closure only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p._needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (kept out of the graph)."""
    a = _as_tensor(a)
    s = a.data.dtype.type(s)

    def backward(g):
        return (g * s,)

    return _make(a.data * s, (a,), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum()

    def backward(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(data), (a,), backward)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    inv = a.data.dtype.type(1.0 / a.data.size)
    data = a.data.mean()

    def backward(g):
        return (np.broadcast_to(g * inv, a.data.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(data), (a,), backward)


# ---------------------------------------------------------------------------
# movement ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(orig),)

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward)


def pad2d(a, pad_bottom: int, pad_right: int) -> Tensor:
    """Zero-pad the last two axes on the bottom/right edges."""
    a = _as_tensor(a)
    if pad_bottom == 0 and pad_right == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(0, pad_bottom), (0, pad_right)]
    data = np.pad(a.data, widths)
    h, w = a.data.shape[-2], a.data.shape[-1]

    def backward(g):
        return (np.ascontiguousarray(g[..., :h, :w]),)

    return _make(data, (a,), backward)


def crop2d(a, height: int, width: int) -> Tensor:
    """Keep the top-left height x width region of the last two axes."""
    a = _as_tensor(a)
    h, w = a.data.shape[-2], a.data.shape[-1]
    if height > h or width > w:
        raise ShapeError(f"crop to ({height},{width}) exceeds extent ({h},{w})")
    if height == h and width == w:
        return a
    data = np.ascontiguousarray(a.data[..., :height, :width])

    def backward(g):
        widths = [(0, 0)] * (g.ndim - 2) + [(0, h - height), (0, w - width)]
        return (np.pad(g, widths),)

    return _make(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix multiply; leading axes must match exactly (no broadcast)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != b.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch shapes differ: {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(data, (a, b), backward)


def index_select_last(table, flat_idx: np.ndarray) -> Tensor:
    """Gather along the last axis with integer indices; scatter-add on backward."""
    table = _as_tensor(table)
    idx = np.asarray(flat_idx, dtype=np.int64)
    data = np.ascontiguousarray(table.data[..., idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        lead = int(np.prod(table.data.shape[:-1])) if table.ndim > 1 else 1
        gt2 = gt.reshape(lead, table.data.shape[-1])
        g2 = g.reshape(lead, idx.size)
        np.add.at(gt2, (np.arange(lead)[:, None], idx[None, :]), g2)
        return (gt.reshape(table.data.shape),)

    return _make(data, (table,), backward)


# ---------------------------------------------------------------------------
# WTEN tensor files: magic "WTEN", u32 LE version=1, u32 ndim,
# ndim x u64 LE extents, then f32 LE values, row-major.
# ---------------------------------------------------------------------------

_WTEN_MAGIC = b"WTEN"
_WTEN_VERSION = 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file + rename so failures never leave partial output."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def wten_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    header = _WTEN_MAGIC + struct.pack("<II", _WTEN_VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + extents + arr.astype("<f4").tobytes()


def save_wten(path: str, arr: np.ndarray) -> None:
    atomic_write_bytes(path, wten_bytes(arr))


def load_wten(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _WTEN_MAGIC:
        raise ShapeError(f"{path}: not a WTEN file (bad magic {blob[:4]!r})")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != _WTEN_VERSION:
        raise ShapeError(f"{path}: unsupported WTEN version {version}")
    extents = struct.unpack_from(f"<{ndim}Q", blob, 12)
    offset = 12 + 8 * ndim
    count = int(np.prod(extents)) if ndim else 1
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(extents).astype(np.float32)
