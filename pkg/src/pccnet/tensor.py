"""Reverse-mode autodiff over flat row-major float buffers.

A Tensor wraps a C-contiguous numpy array (float32 by default, float64 for
gradient checking) plus an optional graph back-reference. Ops build a DAG of
closures; backward() walks it once in reverse topological order. Gradients
accumulate additively on leaves and must be cleared explicitly; interior
gradients live only for the duration of the pass so that repeated backward
calls accumulate exactly 2x on leaves.

Also home of the PTF1 tensor file format (magic, u32 rank, u32 extents,
little-endian float32 payload, row-major).
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError

F32 = np.float32
F64 = np.float64
_DTYPES = (np.dtype(F32), np.dtype(F64))

PTF1_MAGIC = b"PTF1"
_MAX_RANK = 32


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    return shape


class Tensor:
    """N-d float tensor with optional autodiff graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(F32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable | None = None
        self._op = _op
        if _parents:
            self.requires_grad = any(p.requires_grad for p in _parents)
        else:
            self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """New leaf with converted dtype. Used for the 64-bit checking mode."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        """Backpropagate from a scalar. Accumulates into leaf .grad buffers."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def acc(t: Tensor, g: np.ndarray, own: bool = False) -> None:
            # Ownership rule: a buffer may sit in at most one slot, so the
            # first insert copies unless the caller hands over a fresh array.
            if not t.requires_grad:
                return
            key = id(t)
            buf = grads.get(key)
            if buf is not None:
                buf += g
            else:
                if not own or g.base is not None or not g.flags.writeable:
                    g = g.copy()
                grads[key] = g

        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node._backward(g, acc)
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = g
                else:
                    node.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


# ---------- creation ----------


def zeros(shape, dtype=F32, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(_as_shape(shape), dtype=dtype), requires_grad=requires_grad)


def constant(shape, value: float, dtype=F32, requires_grad: bool = True) -> Tensor:
    return Tensor(np.full(_as_shape(shape), value, dtype=dtype), requires_grad=requires_grad)


def uniform(shape, seed: int, lo: float = 0.0, hi: float = 1.0,
            dtype=F32, requires_grad: bool = True) -> Tensor:
    if lo > hi:
        raise ContractError(f"uniform bounds reversed: lo={lo} > hi={hi}")
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.uniform(lo, hi, size=_as_shape(shape)).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def create(shape, init, dtype=F32, requires_grad: bool = True) -> Tensor:
    """Dispatcher: init is "zeros", ("constant", v) or ("uniform", seed, lo, hi)."""
    if init == "zeros":
        return zeros(shape, dtype, requires_grad)
    if isinstance(init, tuple) and init and init[0] == "constant":
        return constant(shape, init[1], dtype, requires_grad)
    if isinstance(init, tuple) and init and init[0] == "uniform":
        _, seed, lo, hi = init
        return uniform(shape, seed, lo, hi, dtype, requires_grad)
    raise ContractError(f"unknown init spec {init!r}")


# ---------- elementwise and linear ops ----------


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def bwd(g, acc):
        acc(a, g)
        acc(b, g, own=True)

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")

    def bwd(g, acc):
        acc(a, g)
        acc(b, -g, own=True)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def bwd(g, acc):
        acc(a, g * b.data, own=True)
        acc(b, g * a.data, own=True)

    out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), _parents=(a,), _op="relu")

    def bwd(g, acc):
        acc(a, np.where(out.data > 0, g, a.data.dtype.type(0)), own=True)

    out._backward = bwd
    return out


def ewise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Named elementwise dispatch: add | sub | mul | relu."""
    if op == "relu":
        if b is not None:
            raise ContractError("relu is unary")
        return relu(a)
    if b is None:
        raise ContractError(f"{op} needs two operands")
    table = {"add": add, "sub": sub, "mul": mul}
    if op not in table:
        raise ContractError(f"unknown ewise op {op!r}")
    return table[op](a, b)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (loss weights)."""
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c, _parents=(a,), _op="scale")

    def bwd(g, acc):
        acc(a, g * c, own=True)

    out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def bwd(g, acc):
        acc(a, g @ b.data.T, own=True)
        # a.T stays a view so BLAS sees the transpose flag, not a copy.
        acc(b, a.data.T @ g, own=True)

    out._backward = bwd
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = _as_shape(shape)
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")

    def bwd(g, acc):
        acc(a, g.reshape(a.shape))

    out._backward = bwd
    return out


def select(a: Tensor, index: int) -> Tensor:
    """Pick one slice along axis 0."""
    n = a.shape[0] if a.data.ndim else 0
    if not (0 <= index < n):
        raise ShapeError(f"select index {index} out of range for shape {a.shape}")
    out = Tensor(a.data[index].copy(), _parents=(a,), _op="select")

    def bwd(g, acc):
        full = np.zeros_like(a.data)
        full[index] = g
        acc(a, full, own=True)

    out._backward = bwd
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new axis 0."""
    if not tensors:
        raise ShapeError("stack of nothing")
    for t in tensors[1:]:
        _check_pair(tensors[0], t, "stack")
    out = Tensor(np.stack([t.data for t in tensors]), _parents=tuple(tensors), _op="stack")

    def bwd(g, acc):
        for i, t in enumerate(tensors):
            acc(t, g[i])

    out._backward = bwd
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along an existing axis (channel merge in the model)."""
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].data.ndim
    if not (0 <= axis < nd):
        raise ShapeError(f"concat axis {axis} out of range for rank {nd}")
    for t in tensors[1:]:
        if t.data.ndim != nd or t.data.dtype != tensors[0].data.dtype:
            raise ShapeError("concat: rank or dtype mismatch")
        for ax in range(nd):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shape mismatch {t.shape} vs {tensors[0].shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="concat")
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g, acc):
        start = 0
        for t, sz in zip(tensors, sizes):
            sl = [slice(None)] * nd
            sl[axis] = slice(start, start + sz)
            acc(t, g[tuple(sl)])
            start += sz

    out._backward = bwd
    return out


# ---------- gradient checking ----------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float | None = None,
               coords: int | Iterable[int] | None = None, seed: int = 0) -> float:
    """Max relative error between backward() and central differences at x.

    f must be a deterministic scalar-valued function of one tensor. The check
    runs in x's dtype; eps defaults to 5e-3 for float32 and 1e-4 for float64.
    coords limits the probe to a seeded sample of flat indices.
    """
    dt = x.data.dtype
    if eps is None:
        eps = 5e-3 if dt == np.dtype(F32) else 1e-4

    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)

    n = x.data.size
    if coords is None:
        idx = range(n)
    elif isinstance(coords, (int, np.integer)):
        k = min(int(coords), n)
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = rng.choice(n, size=k, replace=False)
    else:
        idx = list(coords)

    base = x.data.reshape(-1)
    worst = 0.0
    for i in idx:
        probe = base.copy()
        probe[i] = base[i] + dt.type(eps)
        xhi = float(probe[i])
        hi = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = base[i] - dt.type(eps)
        xlo = float(probe[i])
        lo = f(Tensor(probe.reshape(x.shape))).item()
        # Divide by the realized step, not 2*eps: the perturbation itself
        # rounds in float32 and that error would dominate the check.
        numeric = (hi - lo) / (xhi - xlo)
        a = float(analytic[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------- PTF1 serialization ----------


def tensor_to_bytes(t: Tensor) -> bytes:
    """PTF1 encoding. Payload is always little-endian float32."""
    shape = t.shape
    head = PTF1_MAGIC + struct.pack("<I", len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return head + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one PTF1 record starting at offset. Returns (tensor, next offset)."""
    if len(buf) < offset + 8:
        raise FormatError("truncated PTF1 header", offset=len(buf))
    magic = buf[offset:offset + 4]
    if magic != PTF1_MAGIC:
        raise FormatError(f"bad PTF1 magic {magic!r}", offset=offset)
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank > _MAX_RANK:
        raise FormatError(f"implausible PTF1 rank {rank}", offset=offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated PTF1 shape extents", offset=len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = 1
    for s in shape:
        count *= s
    if len(buf) < pos + 4 * count:
        raise FormatError("truncated PTF1 payload", offset=len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(F32)
    pos += 4 * count
    return Tensor(data.reshape(shape)), pos


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, pos = tensor_from_bytes(buf, 0)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after PTF1 payload", offset=pos)
    return t
