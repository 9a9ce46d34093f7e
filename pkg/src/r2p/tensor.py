"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the handful of operations the reconstruction network needs are
provided: per-point linear maps, ReLU, batch normalisation, point-wise
max pooling, global-feature concatenation, reshape and a few scalar
reductions.  There is no general broadcasting.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import DataError, DimensionError, EmptyInputError, NumericalError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by {op}", {"op": op})


class Tensor:
    """An immutable float64 array plus an optional gradient slot.

    ``data`` is read-only; optimisers replace it rather than write into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if any(d <= 0 for d in arr.shape):
            raise EmptyInputError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, _op)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = _op

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        # trusted constructor for op outputs: skips the defensive copy
        _check_finite(data, op)
        t = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64, order="C")  # keeps 0-d scalars 0-d
        data.flags.writeable = False
        t.data = data
        t.grad = None
        t.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        t.requires_grad = needs
        t._parents = tuple(parents) if needs else ()
        t._backward = backward if needs else None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def replace_data(self, data) -> None:
        """Swap in a new value (optimiser steps, checkpoint loads); the old buffer is untouched."""
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.shape != self.data.shape:
            raise DimensionError(f"replacement shape {arr.shape} differs from {self.data.shape}")
        _check_finite(arr, "replace_data")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it.

    Calling it twice without zeroing grads adds the gradients again.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# operations


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Apply ``x @ W + b`` independently to every point of a (B, N, Din) tensor."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 3 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"linear expects x[B,N,Din], W[Din,Dout], b[Dout]; got {x.shape}, {W.shape}, {b.shape}"
        )
    B, N, Din = x.shape
    if W.shape[0] != Din or b.shape[0] != W.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape} / b {b.shape}")
    Dout = W.shape[1]
    x2 = x.data.reshape(B * N, Din)
    out = (x2 @ W.data + b.data).reshape(B, N, Dout)

    def _bw(g):
        g2 = g.reshape(B * N, Dout)
        gx = (g2 @ W.data.T).reshape(B, N, Din) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return Tensor._result(out, (x, W, b), _bw, "linear")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return Tensor._result(out, (x,), lambda g: (g * mask,), "relu")


class BatchNormState:
    """Running statistics of one batch-norm layer; empty until the first train step."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    @property
    def populated(self) -> bool:
        return self.running_mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.running_mean is None:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
        else:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean
            self.running_var = m * self.running_var + (1.0 - m) * var


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, state: BatchNormState) -> Tensor:
    """Per-feature normalisation over the combined batch*point axis.

    In ``"train"`` mode batch statistics are used and ``state`` is updated;
    in ``"eval"`` mode the running statistics in ``state`` are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm expects x[B,N,D], got {x.shape}")
    B, N, D = x.shape
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"batchnorm: feature dim {D} vs gamma {gamma.shape}, beta {beta.shape}")
    eps = state.eps
    x2 = x.data.reshape(B * N, D)
    M = B * N
    if mode == "train":
        mean = x2.mean(axis=0)
        xc = x2 - mean
        var = (xc * xc).mean(axis=0)
        _check_finite(var, "batchnorm variance")  # inf here would silently zero the output
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd
        state.update(mean, var)
    elif mode == "eval":
        if not state.populated:
            raise UsageError("batchnorm eval mode requires populated running statistics")
        invstd = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x2 - state.running_mean) * invstd
    else:
        raise UsageError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    out = (gamma.data * xhat + beta.data).reshape(B, N, D)

    def _bw(g):
        g2 = g.reshape(M, D)
        ggamma = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g2 * gamma.data
            if mode == "train":
                gx = invstd / M * (M * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                gx = dxhat * invstd
            gx = gx.reshape(B, N, D)
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), _bw, "batchnorm")


def max_pool_points(x) -> tuple[Tensor, np.ndarray]:
    """Max over the point axis of a (B, N, D) tensor.

    Returns the pooled (B, D) tensor and the (B, D) integer argmax.  Ties go
    to the lowest point index, and only that element receives gradient.
    """
    if isinstance(x, np.ndarray) and x.ndim == 3 and x.shape[1] == 0:
        raise EmptyInputError("max_pool_points over zero points")
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"max_pool_points expects x[B,N,D], got {x.shape}")
    B, N, D = x.shape
    idx = np.argmax(x.data, axis=1)
    values = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]

    def _bw(g):
        gx = np.zeros((B, N, D))
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return Tensor._result(values, (x,), _bw, "max_pool_points"), idx


def concat_global(x: Tensor, g: Tensor) -> Tensor:
    """Append the per-sample global vector ``g[b]`` to every point feature ``x[b, n]``."""
    x, g = as_tensor(x), as_tensor(g)
    if x.data.ndim != 3 or g.data.ndim != 2:
        raise DimensionError(f"concat_global expects x[B,N,D1], g[B,D2]; got {x.shape}, {g.shape}")
    B, N, D1 = x.shape
    if g.shape[0] != B:
        raise DimensionError(f"concat_global batch mismatch: x {x.shape} vs g {g.shape}")
    D2 = g.shape[1]
    out = np.empty((B, N, D1 + D2))
    out[:, :, :D1] = x.data
    out[:, :, D1:] = g.data[:, None, :]

    def _bw(grad):
        return grad[:, :, :D1], grad[:, :, D1:].sum(axis=1)

    return Tensor._result(out, (x, g), _bw, "concat_global")


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.data.size} elements) to {new_shape}")
    old = x.shape
    return Tensor._result(x.data.reshape(new_shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute_points(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder points per sample: ``out[b, i] = x[b, perm[b, i]]``; ``perm[b]`` must be a permutation."""
    x = as_tensor(x)
    B, N = x.shape[:2]
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (B, N):
        raise DimensionError(f"permutation shape {perm.shape} does not match points {x.shape[:2]}")
    index = perm.reshape(B, N, *([1] * (x.data.ndim - 2)))
    out = np.take_along_axis(x.data, index, axis=1)

    def _bw(g):
        gx = np.empty_like(g)
        np.put_along_axis(gx, np.broadcast_to(index, g.shape), g, axis=1)
        return (gx,)

    return Tensor._result(out, (x,), _bw, "permute_points")


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return Tensor._result(a.data + b, (a,), lambda g: (g,), "add")
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def custom(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Build a graph node from an externally computed value and its vector-Jacobian product."""
    return Tensor._result(np.asarray(data, dtype=np.float64), parents, backward_fn, op)


# --------------------------------------------------------------------------
# binary serialisation: b"R2PT", u8 rank, rank x u64 dims, f64 payload, little-endian

TENSOR_MAGIC = b"R2PT"


def write_tensor(f: BinaryIO, t) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<B", data.ndim))
    f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_array(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise DataError("bad tensor magic (expected R2PT)")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(f, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def read_tensor(f: BinaryIO, requires_grad: bool = False) -> Tensor:
    return Tensor(read_tensor_array(f), requires_grad=requires_grad)
