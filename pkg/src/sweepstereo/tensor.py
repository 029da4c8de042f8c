"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 or float64). Every operation
records its inputs and a backward closure on a dynamically built tape;
calling :meth:`Tensor.backward` on a scalar walks the tape in reverse
topological order, accumulates gradients into ``requires_grad`` leaves and
then frees the graph. Forward values are checked for NaN/Inf unless the
check is disabled via :func:`set_finite_checks`.

Gradient recording is thread-local, so independent pipelines can run
concurrently (e.g. one under :class:`no_grad`) as long as they do not share
a parameter store.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "AutodiffError",
    "no_grad",
    "grad_enabled",
    "set_finite_checks",
    "finite_checks_enabled",
    "memory_meter",
    "concat",
    "stack",
]


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class AutodiffError(RuntimeError):
    """Internal autodiff failure (e.g. a cycle in the tape)."""


_state = threading.local()

_FINITE_CHECKS = True


def _grad_on() -> bool:
    return getattr(_state, "grad_enabled", True)


def grad_enabled() -> bool:
    """Whether operations on this thread currently record the tape."""
    return _grad_on()


class no_grad:
    """Context manager disabling tape recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_on()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    """Globally enable/disable the NaN/Inf check after every forward op."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


def _all_finite(arr: np.ndarray) -> bool:
    # min/max are NaN-propagating, so two reductions replace isfinite+all
    # without allocating a bool array.
    if arr.size == 0:
        return True
    return bool(np.isfinite(arr.min()) and np.isfinite(arr.max()))


class _MemoryMeter:
    """Tracks live and peak bytes held by Tensor data buffers.

    Used to verify the streaming-memory contract of the recurrent
    regularizer: peak activation memory must stay flat as the number of
    depth planes grows.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0

    def add(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def remove(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes


memory_meter = _MemoryMeter()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    # Leading axes that did not exist in the original shape.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Axes of extent 1 that were stretched.
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense real tensor with optional gradient tracking.

    Data is immutable once created (gradient buffers are the only mutable
    state). ``requires_grad=True`` marks a leaf whose gradient accumulates
    across backward passes until explicitly zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _check=True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        if _check and _FINITE_CHECKS and not _all_finite(arr):
            raise NonFiniteError("tensor initialized with non-finite values")
        memory_meter.add(arr.nbytes)

    def __del__(self):
        try:
            memory_meter.remove(self.data.nbytes)
        except Exception:
            pass

    # -- construction ----------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        """Wrap an op result, recording the tape when grad mode is on."""
        if _FINITE_CHECKS and not _all_finite(data):
            raise NonFiniteError("operation produced non-finite values")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        if _grad_on() and any(isinstance(p, Tensor) and p._live for p in parents):
            out._parents = tuple(p for p in parents if isinstance(p, Tensor))
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        memory_meter.add(data.nbytes)
        return out

    @property
    def _live(self) -> bool:
        # Participates in the graph if it is a tracked leaf or has parents.
        return self.requires_grad or self._backward is not None

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, _check=False)

    @staticmethod
    def ones(shape, dtype=np.float64) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), _check=False)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array (callers must not mutate it)."""
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        memory_meter.add(self.data.nbytes)
        return out

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == dtype:
            return self

        def bw(grad, self=self):
            self._accum(grad.astype(self.data.dtype))

        return Tensor._make(self.data.astype(dtype), (self,), bw)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient plumbing -------------------------------------------------

    def _accum(self, grad: np.ndarray) -> None:
        # Gradients are never mutated in place, so aliasing is safe here.
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None) -> None:
        """Reverse-mode pass from this tensor.

        Gradients accumulate additively into every reachable tensor with
        ``requires_grad``; the tape is freed afterwards, so each graph
        supports a single backward call.
        """
        if grad is None:
            if self.size != 1:
                raise AutodiffError("backward() without an explicit gradient requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = self._toposort()
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Free the graph and intermediate gradients.
        for node in order:
            node._parents = ()
            node._backward = None
            if not node.requires_grad:
                node.grad = None

    def _toposort(self) -> list["Tensor"]:
        """Iterative DFS topological order; raises on (impossible) cycles."""
        order: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 0 visiting, 1 done
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, phase = stack.pop()
            nid = id(node)
            if phase == 0:
                if state.get(nid) is not None:
                    continue
                state[nid] = 0
                stack.append((node, 1))
                for p in node._parents:
                    st = state.get(id(p))
                    if st == 0:
                        # a parent still being expanded means a back edge
                        raise AutodiffError("cycle detected in autodiff graph")
                    if st is None:
                        stack.append((p, 0))
            else:
                state[nid] = 1
                order.append(node)
        return order

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype), _check=False)

    def __add__(self, other):
        other = self._coerce(other)

        def bw(grad, a=self, b=other):
            a._accum(_unbroadcast(grad, a.shape))
            b._accum(_unbroadcast(grad, b.shape))

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)

        def bw(grad, a=self, b=other):
            a._accum(_unbroadcast(grad, a.shape))
            b._accum(_unbroadcast(-grad, b.shape))

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)

        def bw(grad, a=self, b=other):
            a._accum(_unbroadcast(grad * b.data, a.shape))
            b._accum(_unbroadcast(grad * a.data, b.shape))

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)

        def bw(grad, a=self, b=other):
            a._accum(_unbroadcast(grad / b.data, a.shape))
            b._accum(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

        return Tensor._make(self.data / other.data, (self, other), bw)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        def bw(grad, a=self):
            a._accum(-grad)

        return Tensor._make(-self.data, (self,), bw)

    def __pow__(self, p: float):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")

        def bw(grad, a=self, p=p):
            a._accum(grad * p * a.data ** (p - 1))

        return Tensor._make(self.data ** p, (self,), bw)

    def square(self):
        def bw(grad, a=self):
            a._accum(grad * 2.0 * a.data)

        return Tensor._make(self.data * self.data, (self,), bw)

    def sum(self, axis=None, keepdims=False):
        def bw(grad, a=self, axis=axis, keepdims=keepdims):
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bw(grad, a=self):
            a._accum(grad.reshape(a.shape))

        return Tensor._make(self.data.reshape(shape), (self,), bw)

    def __getitem__(self, idx):
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int)) for p in parts)

        def bw(grad, a=self, idx=idx, basic=basic):
            g = np.zeros(a.shape, dtype=a.data.dtype)
            if basic:
                g[idx] += grad  # basic indexing never repeats elements
            else:
                np.add.at(g, idx, grad)
            a._accum(g)

        return Tensor._make(np.ascontiguousarray(self.data[idx]), (self,), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (gradients split back to the inputs)."""
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(grad, tensors=tuple(tensors), offsets=offsets, axis=axis):
        sl = [slice(None)] * grad.ndim
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            sl[axis] = slice(a, b)
            t._accum(np.ascontiguousarray(grad[tuple(sl)]))

    return Tensor._make(data, tuple(tensors), bw)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Stack along a new axis (gradients split back to the inputs)."""
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(grad, tensors=tuple(tensors), axis=axis):
        for i, t in enumerate(tensors):
            t._accum(np.ascontiguousarray(np.take(grad, i, axis=axis)))

    return Tensor._make(data, tuple(tensors), bw)
