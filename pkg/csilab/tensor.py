"""Dense n-dimensional tensors with tape-based reverse-mode differentiation.

Every operation computes its result with numpy and, when one of its inputs
requires a gradient and a :class:`Tape` is active, appends a node holding the
vector-Jacobian product for that operation. :func:`backward` walks the tape in
reverse execution order and accumulates gradients additively.

Conventions:
    - channel axis is last (``B x T x H x W x C`` for volumes),
    - convolutions are cross-correlations with zero padding and stride 1,
    - no implicit broadcasting: per-channel terms go through :func:`bias_add`
      and scalars through :func:`scale`.
"""

from __future__ import annotations

import contextvars
import itertools
import logging
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    MutableMapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

TEMPORAL_PADDINGS = ("same", "causal")

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "csilab_active_tape", default=None
)


class Node:
    """One recorded operation: its inputs, its output and its backward rule."""

    __slots__ = ("tape", "index", "op", "inputs", "output", "backward_fn")

    def __init__(
        self,
        tape: "Tape",
        index: int,
        op: str,
        inputs: Tuple["Tensor", ...],
        output: "Tensor",
        backward_fn: BackwardFn,
    ):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.op})"


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of
    the computation graph. Entering the tape as a context manager makes it the
    active tape of the current context; distinct contexts (threads, asyncio
    tasks) keep distinct tapes.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op: str,
        inputs: Tuple["Tensor", ...],
        output: "Tensor",
        backward_fn: BackwardFn,
    ) -> Node:
        node = Node(self, len(self.nodes), op, inputs, output, backward_fn)
        self.nodes.append(node)
        return node

    def gradients(self, loss: "Tensor") -> Dict[int, np.ndarray]:
        """Return gradients of ``loss`` keyed by ``id`` of every reached leaf."""
        if loss.grad_node is None or loss.grad_node.tape is not self:
            return {}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.grad_node.index + 1]):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            for tensor, input_grad in zip(node.inputs, node.backward_fn(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad
        return grads


def active_tape() -> Optional[Tape]:
    """Return the tape recording in the current context, if any."""
    return _ACTIVE_TAPE.get()


class Tensor:
    """An n-dimensional real array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "grad_node", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ):
        array = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.grad_node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operator sugar over the module-level operations.

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float, int]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: Union[float, int]) -> "Tensor":
        return scale(self, float(other))

    def __truediv__(self, other: Union[float, int]) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def leaky_relu(self, slope: float) -> "Tensor":
        return leaky_relu(self, slope)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def as_tensor(value: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def parameter(data: ArrayLike, name: Optional[str] = None, dtype=None) -> Tensor:
    """Create a leaf tensor that requires a gradient, owning a copy of ``data``."""
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def _result(
    data: np.ndarray,
    inputs: Tuple[Tensor, ...],
    op: str,
    backward_fn: BackwardFn,
) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    tape = active_tape()
    if requires_grad and tape is not None:
        out.grad_node = tape.record(op, inputs, out, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data
    return _result(a_data * b_data, (a, b), "mul", lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for large |x| and gives sigmoid(0) = 0.5 exactly;
    # the clip keeps the output strictly inside (0, 1) at the working precision
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    eps = np.finfo(s.dtype).eps
    s = np.clip(s, eps, 1.0 - eps)
    return _result(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)
    return _result(out, (a,), "leaky_relu", lambda g: (np.where(positive, g, slope * g),))


def square(a: Tensor) -> Tensor:
    a_data = a.data
    return _result(a_data * a_data, (a,), "square", lambda g: (2.0 * a_data * g,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs: Tensor, factor: float = 1.0, slope: float = 0.3) -> Tensor:
    """Dispatch one of the elementwise operations by name.

    ``scale`` uses ``factor`` and ``leaky_relu`` uses ``slope``.
    """
    if op in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(f"{op} takes two tensors, got {len(inputs)}")
        return _BINARY[op](*inputs)
    if len(inputs) != 1:
        raise ShapeError(f"{op} takes one tensor, got {len(inputs)}")
    if op in _UNARY:
        return _UNARY[op](inputs[0])
    if op == "scale":
        return scale(inputs[0], factor)
    if op == "leaky_relu":
        return leaky_relu(inputs[0], slope)
    raise ConfigError(f"unknown elementwise operation {op!r}")


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    return _result(
        a_data @ b_data,
        (a, b),
        "matmul",
        lambda g: (g @ b_data.T, a_data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return _result(a.data.T, (a,), "transpose", lambda g: (g.T,))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector along the last axis."""
    if bias.ndim != 1 or x.ndim == 0 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match channels of {x.shape}")
    channels = bias.shape[0]
    return _result(
        x.data + bias.data,
        (x, bias),
        "bias_add",
        lambda g: (g, g.reshape(-1, channels).sum(axis=0)),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.size, 1))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = int(np.prod([s for s in shape if s != -1])) if shape else 1
    if shape.count(-1) > 1 or (
        -1 not in shape and known != a.size
    ) or (-1 in shape and (known == 0 or a.size % known)):
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} values) into {shape}")
    source = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(source),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim if ndim else 0
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[d] == tensors[0].shape[d] for d in range(ndim) if d != axis
        )
        if not same:
            raise ShapeError(
                f"concat on axis {axis}: shapes {tensors[0].shape} and {t.shape} disagree"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray):
        index = [slice(None)] * ndim
        parts = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(start, stop)
            parts.append(g[tuple(index)])
        return parts

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        "concat",
        backward,
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along a new axis."""
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    ndim = tensors[0].ndim + 1
    axis = axis % ndim
    expanded = []
    for t in tensors:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shapes {tensors[0].shape} and {t.shape} disagree")
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Return ``a`` restricted to ``start:stop`` along ``axis``."""
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    source_shape, dtype = a.shape, a.dtype

    def backward(g: np.ndarray):
        full = np.zeros(source_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index].copy(), (a,), "slice", backward)


def take(a: Tensor, axis: int, index: int) -> Tensor:
    """Select one position along ``axis`` and drop that axis."""
    axis = axis % a.ndim
    part = slice_axis(a, axis, index, index + 1)
    return reshape(part, a.shape[:axis] + a.shape[axis + 1 :])


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _conv_pads(kernel_extents: Sequence[int], temporal_padding: str) -> List[Tuple[int, int]]:
    for extent in kernel_extents:
        if extent < 1 or extent % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {tuple(kernel_extents)}")
    if temporal_padding not in TEMPORAL_PADDINGS:
        raise ConfigError(f"temporal padding must be one of {TEMPORAL_PADDINGS}")
    kt, kh, kw = kernel_extents
    if temporal_padding == "causal":
        time_pad = (kt - 1, 0)
    else:
        time_pad = ((kt - 1) // 2, (kt - 1) // 2)
    return [(0, 0), time_pad, ((kh - 1) // 2,) * 2, ((kw - 1) // 2,) * 2, (0, 0)]


def _batched(fn):
    """Let a rank-5 volume operation accept an unbatched rank-4 input."""

    def wrapper(x: Tensor, *args, **kwargs) -> Tensor:
        if x.ndim == 4:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 5:
            raise ShapeError(f"{fn.__name__} expects T x H x W x C or B x T x H x W x C, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv3d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    temporal_padding: str = "same",
) -> Tensor:
    """Zero-padded stride-1 3D cross-correlation.

    ``x`` is ``B x T x H x W x C_in`` (or unbatched), ``kernel`` is
    ``k_t x k_h x k_w x C_in x C_out`` with odd extents. Output extents equal
    the input's; ``causal`` padding puts all temporal zeros before step 1.
    """
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be rank 5, got {kernel.shape}")
    kt, kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv3d: input has {x.shape[-1]} channels, kernel {kernel.shape} expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match {c_out} output channels")
    pads = _conv_pads((kt, kh, kw), temporal_padding)
    batch, steps, height, width, _ = x.shape
    padded = np.pad(x.data, pads)
    weights = kernel.data
    dtype = np.result_type(x.data, weights)
    out = np.zeros((batch, steps, height, width, c_out), dtype=dtype)
    taps = list(itertools.product(range(kt), range(kh), range(kw)))
    for i, j, k in taps:
        out += padded[:, i : i + steps, j : j + height, k : k + width, :] @ weights[i, j, k]
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        grad_padded = np.zeros(padded.shape, dtype=dtype)
        grad_kernel = np.zeros(weights.shape, dtype=dtype)
        flat_g = g.reshape(-1, c_out)
        for i, j, k in taps:
            window = padded[:, i : i + steps, j : j + height, k : k + width, :]
            grad_kernel[i, j, k] = window.reshape(-1, c_in).T @ flat_g
            grad_padded[:, i : i + steps, j : j + height, k : k + width, :] += g @ weights[i, j, k].T
        t0, h0, w0 = pads[1][0], pads[2][0], pads[3][0]
        grad_x = grad_padded[:, t0 : t0 + steps, h0 : h0 + height, w0 : w0 + width, :]
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, "conv3d", backward)


@_batched
def depthwise_conv3d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    temporal_padding: str = "same",
) -> Tensor:
    """Per-channel 3D cross-correlation with a ``k_t x k_h x k_w x C`` kernel."""
    if kernel.ndim != 4:
        raise ShapeError(f"depthwise kernel must be rank 4, got {kernel.shape}")
    kt, kh, kw, channels = kernel.shape
    if x.shape[-1] != channels:
        raise ShapeError(f"depthwise_conv3d: input has {x.shape[-1]} channels, kernel {kernel.shape} expects {channels}")
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"depthwise_conv3d: bias {bias.shape} does not match {channels} channels")
    pads = _conv_pads((kt, kh, kw), temporal_padding)
    batch, steps, height, width, _ = x.shape
    padded = np.pad(x.data, pads)
    weights = kernel.data
    dtype = np.result_type(x.data, weights)
    out = np.zeros((batch, steps, height, width, channels), dtype=dtype)
    taps = list(itertools.product(range(kt), range(kh), range(kw)))
    for i, j, k in taps:
        out += padded[:, i : i + steps, j : j + height, k : k + width, :] * weights[i, j, k]
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        grad_padded = np.zeros(padded.shape, dtype=dtype)
        grad_kernel = np.zeros(weights.shape, dtype=dtype)
        for i, j, k in taps:
            window = padded[:, i : i + steps, j : j + height, k : k + width, :]
            grad_kernel[i, j, k] = (window * g).reshape(-1, channels).sum(axis=0)
            grad_padded[:, i : i + steps, j : j + height, k : k + width, :] += g * weights[i, j, k]
        t0, h0, w0 = pads[1][0], pads[2][0], pads[3][0]
        grad_x = grad_padded[:, t0 : t0 + steps, h0 : h0 + height, w0 : w0 + width, :]
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(g.reshape(-1, channels).sum(axis=0))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, "depthwise_conv3d", backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded 2D cross-correlation over ``B x H x W x C_in``.

    ``kernel`` is ``k_h x k_w x C_in x C_out``; evaluated as a conv3d with a
    single time step.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects B x H x W x C input and rank-4 kernel, got {x.shape}, {kernel.shape}")
    volume = reshape(x, (x.shape[0], 1) + x.shape[1:])
    kernel3d = reshape(kernel, (1,) + kernel.shape)
    out = conv3d(volume, kernel3d, bias)
    return reshape(out, (out.shape[0],) + out.shape[2:])


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: Optional[MutableMapping[str, np.ndarray]] = None,
    training: bool = True,
    momentum: float = 0.9,
    epsilon: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis but the last (channel) axis.

    In training mode the batch statistics normalize ``x`` and ``running``
    (keys ``mean`` and ``var``) is updated as an exponential moving average
    with weight ``momentum`` on the old value. In inference mode the running
    statistics are used.
    """
    if epsilon <= 0:
        raise ConfigError(f"batch_norm epsilon must be positive, got {epsilon}")
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs {channels} channels")
    axes = tuple(range(x.ndim - 1))
    data = x.data
    gamma_data = gamma.data

    if training:
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        if running is not None:
            running["mean"] = momentum * running["mean"] + (1.0 - momentum) * mean
            running["var"] = momentum * running["var"] + (1.0 - momentum) * var
    else:
        if running is None or "mean" not in running or "var" not in running:
            raise ConfigError("batch_norm in inference mode needs running statistics")
        mean = running["mean"]
        var = running["var"]

    inv_std = 1.0 / np.sqrt(var + epsilon)
    normalized = (data - mean) * inv_std
    out = normalized * gamma_data + beta.data
    count = data.size // channels

    def backward(g: np.ndarray):
        grad_gamma = (g * normalized).reshape(-1, channels).sum(axis=0)
        grad_beta = g.reshape(-1, channels).sum(axis=0)
        grad_norm = g * gamma_data
        if training:
            grad_x = (inv_std / count) * (
                count * grad_norm
                - grad_norm.sum(axis=axes)
                - normalized * (grad_norm * normalized).sum(axis=axes)
            )
        else:
            grad_x = grad_norm * inv_std
        return grad_x, grad_gamma, grad_beta

    return _result(out, (x, gamma, beta), "batch_norm", backward)


# ---------------------------------------------------------------------------
# Differentiation entry point
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> List[np.ndarray]:
    """Differentiate a scalar ``loss`` with respect to ``params``.

    Each parameter's ``grad`` is set to its gradient; parameters the loss does
    not reach receive zeros. Returns the gradients in ``params`` order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads = loss.grad_node.tape.gradients(loss) if loss.grad_node is not None else {}
    result = []
    for param in params:
        grad = grads.get(id(param))
        if grad is None:
            grad = np.zeros_like(param.data)
        param.grad = grad
        result.append(grad)
    return result
