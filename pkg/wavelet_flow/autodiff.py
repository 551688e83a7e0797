"""
autodiff.py

Reverse-mode differentiable arrays for the wavelet_flow package.

Every tensor operation the flow layers, the wavelet transform and the MCMC gradients need lives here. Values are
64-bit numpy arrays wrapped in immutable Tensor objects. A Tape records the operations applied to tensors that take
part in differentiation; `backward` walks the tape once in reverse and returns the gradient of a scalar root with
respect to every recorded leaf.

A Tape belongs to one computation. Tensors are read-only and may be shared between workers, tapes may not.

Classes:
    ShapeError
    DomainError
    Tensor
    Tape

Functions:
    elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor
    conv2d(input: Tensor, kernel: Tensor, stride: int = 1, pad: str = 'valid') -> Tensor
    reduce(op_kind: str, a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor
    backward(tape: Tape, root: Tensor) -> Dict[int, Tensor]
    jacobian(fn: Callable, x: np.ndarray) -> np.ndarray
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class DomainError(ValueError):
    """Raised when an operation is applied outside of its mathematical domain."""


Number = Union[int, float, np.floating]


class Tensor:
    """
    Immutable dense array of 64-bit reals, optionally recorded on a Tape.

    :param data: Anything numpy can turn into a float64 array. The array is copied and frozen.
    :param tape: The Tape this tensor is recorded on, if any.
    :param tape_id: Node handle of this tensor on its tape.
    """
    __slots__ = ('data', 'tape', 'tape_id')

    def __init__(self, data, tape: Optional['Tape'] = None, tape_id: Optional[int] = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.tape: Optional[Tape] = tape
        self.tape_id: Optional[int] = tape_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def recorded(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        """
        Returns a writable copy of the values.

        :return: np.ndarray, the tensor values.
        """
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> 'Tensor':
        """Returns the same values as an unrecorded constant."""
        return Tensor(self.data)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return elementwise('add', self, other)

    def __radd__(self, other):
        return elementwise('add', _as_tensor(other), self)

    def __sub__(self, other):
        return elementwise('sub', self, other)

    def __rsub__(self, other):
        return elementwise('sub', _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise('mul', self, other)

    def __rmul__(self, other):
        return elementwise('mul', _as_tensor(other), self)

    def __neg__(self):
        return elementwise('neg', self)

    def __repr__(self):
        tag = f", tape_id={self.tape_id}" if self.recorded else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ('inputs', 'vjp', 'shape')

    def __init__(self, inputs: Tuple[Optional[int], ...], vjp: Optional[Callable], shape: Tuple[int, ...]):
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Tape:
    """
    Ordered record of the operations of one differentiable computation.

    Nodes are appended as operations run, so every node's inputs precede it. Leaves are nodes without inputs.
    """

    def __init__(self):
        self._nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """
        Records a new leaf on the tape.

        :param data: Array-like values or an existing Tensor whose values are copied.
        :return: Tensor, the recorded leaf.
        """
        if isinstance(data, Tensor):
            data = data.data
        values = np.array(data, dtype=np.float64)
        self._nodes.append(_Node((), None, values.shape))
        return Tensor(values, self, len(self._nodes) - 1)

    def _record(self, value: np.ndarray, inputs: Sequence['Tensor'], vjp: Callable) -> Tensor:
        handles = tuple(t.tape_id if t.tape is self else None for t in inputs)
        self._nodes.append(_Node(handles, vjp, value.shape))
        return Tensor(value, self, len(self._nodes) - 1)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ValueError("Operands are recorded on different tapes")
        tape = t.tape
    return tape


def _finish(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(value, inputs, vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only scalar operands are ever broadcast
    return np.asarray(grad.sum()).reshape(shape)


_UNARY = ('neg', 'exp', 'log', 'tanh', 'relu')
_BINARY = ('add', 'sub', 'mul')


def elementwise(op_kind: str, a: Tensor, b: Optional[Union[Tensor, Number]] = None) -> Tensor:
    """
    Applies an elementwise operation.

    Binary operations need equal shapes; the only broadcasting allowed is a 0-d (scalar) operand.

    :param op_kind: One of 'add', 'sub', 'mul', 'neg', 'exp', 'log', 'tanh', 'relu'.
    :param a: The first operand.
    :param b: The second operand for binary operations; python numbers are treated as scalar constants.
    :return: Tensor, the result, recorded when an operand is recorded.
    """
    a = _as_tensor(a)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"'{op_kind}' takes a single operand")
        x = a.data
        if op_kind == 'neg':
            return _finish(-x, (a,), lambda g: (-g,))
        if op_kind == 'exp':
            y = np.exp(x)
            return _finish(y, (a,), lambda g: (g * y,))
        if op_kind == 'log':
            if np.any(x <= 0):
                raise DomainError("log of a non-positive value")
            return _finish(np.log(x), (a,), lambda g: (g / x,))
        if op_kind == 'tanh':
            y = np.tanh(x)
            return _finish(y, (a,), lambda g: (g * (1.0 - y * y),))
        mask = (x > 0).astype(np.float64)
        return _finish(x * mask, (a,), lambda g: (g * mask,))

    if op_kind not in _BINARY:
        raise ValueError(f"Unknown elementwise op '{op_kind}'")
    if b is None:
        raise ValueError(f"'{op_kind}' needs two operands")
    b = _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"Shape mismatch in '{op_kind}': {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op_kind == 'add':
        return _finish(x + y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    if op_kind == 'sub':
        return _finish(x - y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    return _finish(x * y, (a, b), lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)))


def add(a, b) -> Tensor:
    return elementwise('add', a, b)


def sub(a, b) -> Tensor:
    return elementwise('sub', a, b)


def mul(a, b) -> Tensor:
    return elementwise('mul', a, b)


def neg(a) -> Tensor:
    return elementwise('neg', a)


def exp(a) -> Tensor:
    return elementwise('exp', a)


def log(a) -> Tensor:
    return elementwise('log', a)


def tanh(a) -> Tensor:
    return elementwise('tanh', a)


def relu(a) -> Tensor:
    return elementwise('relu', a)


def _normalize_axes(axes: Optional[Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"Axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"Repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op_kind: str, a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """
    Sums or averages over the given axes.

    :param op_kind: 'sum' or 'mean'.
    :param a: The tensor to reduce.
    :param axes: Axes to reduce; None reduces everything, an empty sequence is a no-op.
    :return: Tensor, the reduced tensor (reduced axes dropped).
    """
    if op_kind not in ('sum', 'mean'):
        raise ValueError(f"Unknown reduction '{op_kind}'")
    a = _as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    if not axes:
        return a
    count = int(np.prod([a.shape[ax] for ax in axes]))
    value = np.sum(a.data, axis=axes)
    if op_kind == 'mean':
        value = value / count
    in_shape = a.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def vjp(g):
        g = np.broadcast_to(np.reshape(g, kept_shape), in_shape)
        if op_kind == 'mean':
            g = g / count
        return (np.array(g),)

    return _finish(np.asarray(value), (a,), vjp)


def sum_(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return reduce('sum', a, axes)


def mean(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return reduce('mean', a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    try:
        value = np.reshape(a.data, tuple(shape))
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return _finish(np.array(value), (a,), lambda g: (np.reshape(g, in_shape),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """
    Explicitly repeats a tensor to a larger shape following numpy's rules.

    :param a: The tensor to repeat, e.g. a per-channel vector.
    :param shape: The target shape.
    :return: Tensor of the requested shape.
    """
    a = _as_tensor(a)
    shape = tuple(shape)
    in_shape = a.shape
    try:
        value = np.array(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(str(e)) from e
    lead = len(shape) - len(in_shape)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(in_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _finish(value, (a,), vjp)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """
    Joins tensors along an existing axis.

    :param tensors: Tensors agreeing on every other axis.
    :param axis: The axis to join on.
    :return: Tensor, the joined tensor.
    """
    tensors = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(value, tensors, vjp)


def take(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """
    Slices a contiguous range [start, stop) along one axis.

    :param a: The tensor to slice.
    :param start: First index kept.
    :param stop: One past the last index kept.
    :param axis: The axis to slice.
    :return: Tensor, the slice.
    """
    a = _as_tensor(a)
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"Slice [{start}, {stop}) out of range for axis of extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    in_shape = a.shape

    def vjp(g):
        out = np.zeros(in_shape)
        out[index] = g
        return (out,)

    return _finish(np.array(a.data[index]), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two 2-d tensors.

    :param a: Tensor of shape (m, k).
    :param b: Tensor of shape (k, n).
    :return: Tensor of shape (m, n).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m, k) @ (k, n), got {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _finish(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def _same_padding(extent: int, k: int, stride: int) -> Tuple[int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, pad: str = 'valid') -> Tensor:
    """
    2-d cross-correlation over channels-last images.

    :param input: Tensor of shape (H, W, Cin) or a batch (N, H, W, Cin).
    :param kernel: Tensor of shape (kh, kw, Cin, Cout).
    :param stride: Step between windows, at least 1.
    :param pad: 'valid' (no padding) or 'same' (zero padding so that the output extent is ceil(extent / stride)).
    :return: Tensor of shape (H', W', Cout), batched like the input.
    """
    input, kernel = _as_tensor(input), _as_tensor(kernel)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad not in ('valid', 'same'):
        raise ValueError(f"Unknown padding mode '{pad}'")
    if kernel.ndim != 4:
        raise ShapeError(f"Kernel must be (kh, kw, Cin, Cout), got {kernel.shape}")
    batched = input.ndim == 4
    if input.ndim not in (3, 4):
        raise ShapeError(f"Input must be (H, W, C) or (N, H, W, C), got {input.shape}")
    x = input.data if batched else input.data[None]
    k = kernel.data
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"Input has {x.shape[-1]} channels, kernel expects {cin}")

    if pad == 'same':
        pt, pb = _same_padding(x.shape[1], kh, stride)
        pl, pr = _same_padding(x.shape[2], kw, stride)
    else:
        pt = pb = pl = pr = 0
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    hp, wp = xp.shape[1], xp.shape[2]
    if kh > hp or kw > wp:
        raise ShapeError(f"Kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = windows.shape[1], windows.shape[2]
    # windows: (N, oh, ow, Cin, kh, kw)
    out = np.tensordot(windows, np.transpose(k, (2, 0, 1, 3)), axes=([3, 4, 5], [0, 1, 2]))

    def vjp(g):
        if not batched:
            g = g[None]
        grad_k = np.transpose(np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2])), (1, 2, 0, 3))
        grad_xp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += \
                    np.tensordot(g, k[i, j], axes=([3], [1]))
        grad_x = grad_xp[:, pt:hp - pb, pl:wp - pr, :]
        if not batched:
            grad_x = grad_x[0]
        return grad_x, grad_k

    return _finish(out if batched else out[0], (input, kernel), vjp)


def backward(tape: Tape, root: Tensor) -> Dict[int, Tensor]:
    """
    Reverse pass from a scalar root.

    Each node between the root and the leaves is visited once, newest first. Gradient accumulators live only for the
    duration of the call, so repeated passes over the same tape give identical results.

    :param tape: The tape the root was recorded on.
    :param root: A recorded single-element tensor.
    :return: dict mapping the tape_id of every leaf on the tape to its gradient (zeros when the root does not
        depend on it).
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape or root.tape_id is None:
        raise ValueError("Root is not recorded on this tape")

    nodes = tape._nodes
    accum: Dict[int, np.ndarray] = {root.tape_id: np.ones(root.shape)}
    for node_id in range(root.tape_id, -1, -1):
        node = nodes[node_id]
        if node.vjp is None or node_id not in accum:
            continue
        grads = node.vjp(accum.pop(node_id))
        for handle, grad in zip(node.inputs, grads):
            if handle is None:
                continue
            if handle in accum:
                accum[handle] = accum[handle] + grad
            else:
                accum[handle] = np.array(grad, dtype=np.float64)

    result = {}
    for node_id, node in enumerate(nodes):
        if node.vjp is None:
            result[node_id] = Tensor(accum.get(node_id, np.zeros(node.shape)))
    return result


def jacobian(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """
    Assembles the full Jacobian of fn at x, one reverse pass per output element.

    :param fn: Maps a Tensor to a Tensor using operations of this module.
    :param x: The point of evaluation.
    :return: np.ndarray of shape (output size, input size).
    """
    x = np.asarray(x, dtype=np.float64)
    value = fn(Tensor(x))
    rows = []
    for idx in range(value.size):
        tape = Tape()
        leaf = tape.leaf(x)
        out = fn(leaf)
        onehot = np.zeros(out.size)
        onehot[idx] = 1.0
        root = reduce('sum', elementwise('mul', out, Tensor(onehot.reshape(out.shape))))
        rows.append(backward(tape, root)[leaf.tape_id].data.ravel())
    return np.stack(rows)


def standard_normal_log_density(z: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """
    Sum of log N(z_j; 0, 1) over the given axes (all axes by default).

    :param z: Points in base space.
    :param axes: Axes to sum over.
    :return: Tensor, the summed log density.
    """
    z = _as_tensor(z)
    axes = _normalize_axes(axes, z.ndim)
    count = int(np.prod([z.shape[ax] for ax in axes])) if axes else 1
    quad = reduce('sum', elementwise('mul', z, z), axes)
    return elementwise('add', elementwise('mul', quad, -0.5), -0.5 * count * np.log(2 * np.pi))
