"""Layer vocabulary of the CSI feedback networks.

Layers are pure functions of ``(spec, params, buffers, input)``. ``params`` is
a nested mapping of learnable :class:`~csilab.tensor.Tensor` leaves shaped by
:func:`param_shapes`; ``buffers`` holds batch-norm running statistics shaped by
:func:`buffer_shapes`. Recurrent layers take and return an explicit state.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Dict, Literal, Mapping, MutableMapping, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ShapeError
from .tensor import (
    Tensor,
    add,
    batch_norm,
    bias_add,
    conv2d,
    conv3d,
    depthwise_conv3d,
    leaky_relu,
    matmul,
    mul,
    parameter,
    reshape,
    sigmoid,
    slice_axis,
    stack,
    take,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

LayerKind = Literal[
    "dense",
    "lstm",
    "convlstm",
    "conv3d",
    "dsconv3d",
    "p3d_a",
    "p3d_b",
    "p3d_c",
    "refine_block",
    "batchnorm",
    "activation",
]

P3D_KINDS = {"A": "p3d_a", "B": "p3d_b", "C": "p3d_c"}

ParamTree = Dict[str, Any]
ShapeTree = Dict[str, Any]


class LayerSpec(BaseModel):
    """Static description of one layer.

    ``in_channels``/``out_channels`` double as ``in_dim``/``out_dim`` for dense
    and LSTM layers; ``hidden`` is the recurrent state width.
    """

    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    in_channels: int = 1
    out_channels: int = 1
    kernel: Tuple[int, int, int] = (3, 3, 3)
    temporal_depth: int = 3
    spatial_depth: int = 3
    hidden: int = 0
    slope: float = 0.3
    temporal_padding: Literal["same", "causal"] = "same"
    separable: bool = True
    refine_widths: Tuple[int, int] = (8, 16)
    momentum: float = 0.9
    epsilon: float = 1e-5

    @field_validator("in_channels", "out_channels")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"channel/dim fields must be positive, got {value}")
        return value

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError(f"kernel extents must be odd and positive, got {value}")
        return value

    @field_validator("temporal_depth", "spatial_depth")
    @classmethod
    def _odd_depth(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError(f"P3D depths must be odd and positive, got {value}")
        return value

    @model_validator(mode="after")
    def _kind_constraints(self) -> "LayerSpec":
        if self.kind in ("lstm", "convlstm") and self.hidden < 1:
            raise ValueError(f"{self.kind} needs a positive hidden size")
        if self.kind.startswith("p3d") and self.in_channels != self.out_channels:
            raise ValueError(
                f"{self.kind} must preserve channels for its skip path, "
                f"got {self.in_channels} -> {self.out_channels}"
            )
        if self.kind == "refine_block" and self.in_channels != self.out_channels:
            raise ValueError("refine_block must preserve channels for its skip path")
        return self

    @property
    def spatial_kernel(self) -> Tuple[int, int, int]:
        return (1, self.spatial_depth, self.spatial_depth)

    @property
    def temporal_kernel(self) -> Tuple[int, int, int]:
        return (self.temporal_depth, 1, 1)


class RecurrentState(NamedTuple):
    """Hidden and cell state of an LSTM or ConvLSTM layer."""

    h: Tensor
    c: Tensor


# ---------------------------------------------------------------------------
# Structure: children, shapes, initialization, counting
# ---------------------------------------------------------------------------


def _batchnorm_spec(spec: LayerSpec, channels: int) -> LayerSpec:
    return LayerSpec(
        kind="batchnorm",
        in_channels=channels,
        out_channels=channels,
        momentum=spec.momentum,
        epsilon=spec.epsilon,
    )


def children(spec: LayerSpec) -> Dict[str, LayerSpec]:
    """Sub-layers of a composite layer, in evaluation order."""
    if spec.kind.startswith("p3d"):
        c = spec.in_channels
        conv = dict(in_channels=c, out_channels=c, temporal_padding=spec.temporal_padding)
        return {
            "bn_spatial": _batchnorm_spec(spec, c),
            "spatial": LayerSpec(kind="conv3d", kernel=spec.spatial_kernel, **conv),
            "bn_temporal": _batchnorm_spec(spec, c),
            "temporal": LayerSpec(kind="conv3d", kernel=spec.temporal_kernel, **conv),
        }
    if spec.kind == "refine_block":
        widths = (spec.in_channels,) + tuple(spec.refine_widths) + (spec.out_channels,)
        kind = "dsconv3d" if spec.separable else "conv3d"
        layers: Dict[str, LayerSpec] = {}
        for n, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            layers[f"conv{n}"] = LayerSpec(
                kind=kind,
                in_channels=c_in,
                out_channels=c_out,
                kernel=spec.kernel,
                temporal_padding=spec.temporal_padding,
            )
            layers[f"bn{n}"] = _batchnorm_spec(spec, c_out)
        return layers
    return {}


def param_shapes(spec: LayerSpec) -> ShapeTree:
    """Nested map of learnable parameter names to shapes."""
    kt, kh, kw = spec.kernel
    c_in, c_out, hidden = spec.in_channels, spec.out_channels, spec.hidden
    if spec.kind == "dense":
        return {"kernel": (c_out, c_in), "bias": (c_out,)}
    if spec.kind == "lstm":
        return {
            "input_kernel": (c_in, 4 * hidden),
            "recurrent_kernel": (hidden, 4 * hidden),
            "bias": (4 * hidden,),
        }
    if spec.kind == "convlstm":
        return {
            "input_kernel": (kh, kw, c_in, 4 * hidden),
            "recurrent_kernel": (kh, kw, hidden, 4 * hidden),
            "bias": (4 * hidden,),
        }
    if spec.kind == "conv3d":
        return {"kernel": (kt, kh, kw, c_in, c_out), "bias": (c_out,)}
    if spec.kind == "dsconv3d":
        return {
            "depthwise_kernel": (kt, kh, kw, c_in),
            "depthwise_bias": (c_in,),
            "pointwise_kernel": (1, 1, 1, c_in, c_out),
            "pointwise_bias": (c_out,),
        }
    if spec.kind == "batchnorm":
        return {"gamma": (c_in,), "beta": (c_in,)}
    if spec.kind == "activation":
        return {}
    return {name: param_shapes(child) for name, child in children(spec).items()}


def buffer_shapes(spec: LayerSpec) -> ShapeTree:
    """Nested map of non-learnable state (batch-norm running statistics)."""
    if spec.kind == "batchnorm":
        return {"mean": (spec.in_channels,), "var": (spec.in_channels,)}
    tree = {}
    for name, child in children(spec).items():
        sub = buffer_shapes(child)
        if sub:
            tree[name] = sub
    return tree


def _fans(name: str, shape: Tuple[int, ...]) -> Tuple[int, int]:
    if name == "kernel" and len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    if name == "depthwise_kernel":
        receptive = int(np.prod(shape[:-1]))
        return receptive * shape[-1], receptive
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


def init_params(
    spec: LayerSpec, rng: np.random.Generator, dtype: Union[str, np.dtype] = np.float64
) -> ParamTree:
    """Initialize parameters: Glorot-uniform kernels, zero biases, forget bias 1, BN gamma 1."""
    if children(spec):
        return {name: init_params(child, rng, dtype) for name, child in children(spec).items()}
    tree: ParamTree = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("kernel"):
            fan_in, fan_out = _fans(name, shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-limit, limit, size=shape)
        elif name == "gamma":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
            if name == "bias" and spec.kind in ("lstm", "convlstm"):
                values[spec.hidden : 2 * spec.hidden] = 1.0
        tree[name] = parameter(values, name=name, dtype=dtype)
    return tree


def init_buffers(spec: LayerSpec, dtype: Union[str, np.dtype] = np.float64) -> ParamTree:
    def build(shapes: ShapeTree) -> ParamTree:
        tree = {}
        for name, value in shapes.items():
            if isinstance(value, dict):
                tree[name] = build(value)
            else:
                fill = 1.0 if name == "var" else 0.0
                tree[name] = np.full(value, fill, dtype=dtype)
        return tree

    return build(buffer_shapes(spec))


def _count(shapes: ShapeTree, biases: bool) -> int:
    total = 0
    for name, value in shapes.items():
        if isinstance(value, dict):
            total += _count(value, biases)
        elif biases or not (name.endswith("bias") or name in ("gamma", "beta")):
            total += int(np.prod(value))
    return total


def param_count(item: Union[LayerSpec, Mapping[str, Any]], biases: bool = True) -> int:
    """Number of learnable scalars of a layer spec or a parameter tree.

    With ``biases=False`` only kernel weights are counted (biases and BN
    affine terms are left out).
    """
    if isinstance(item, LayerSpec):
        return _count(param_shapes(item), biases)
    if hasattr(item, "params"):
        item = item.params
    total = 0
    for name, value in item.items():
        if isinstance(value, Mapping):
            total += param_count(value, biases)
        elif biases or not (name.endswith("bias") or name in ("gamma", "beta")):
            total += value.size
    return total


# ---------------------------------------------------------------------------
# Feed-forward layers
# ---------------------------------------------------------------------------


def dense(spec: LayerSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """``W x + b`` for every row of a ``batch x in_dim`` input."""
    if x.ndim != 2 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"dense expects batch x {spec.in_channels}, got {x.shape}")
    return bias_add(matmul(x, transpose(params["kernel"])), params["bias"])


def conv(spec: LayerSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    return conv3d(x, params["kernel"], params["bias"], spec.temporal_padding)


def ds_conv3d(spec: LayerSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Depthwise-separable 3D convolution: per-channel filters, then a 1x1x1 mix."""
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"ds_conv3d expects {spec.in_channels} channels, got {x.shape}")
    depthwise = depthwise_conv3d(
        x, params["depthwise_kernel"], params["depthwise_bias"], spec.temporal_padding
    )
    return conv3d(depthwise, params["pointwise_kernel"], params["pointwise_bias"])


def batchnorm(
    spec: LayerSpec,
    params: Mapping[str, Tensor],
    buffers: MutableMapping[str, np.ndarray],
    x: Tensor,
    training: bool = False,
) -> Tensor:
    return batch_norm(
        x,
        params["gamma"],
        params["beta"],
        buffers,
        training=training,
        momentum=spec.momentum,
        epsilon=spec.epsilon,
    )


def activation(spec: LayerSpec, x: Tensor) -> Tensor:
    return leaky_relu(x, spec.slope)


def apply_conv(spec: LayerSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Evaluate a standard or depthwise-separable convolution spec."""
    if spec.kind == "dsconv3d":
        return ds_conv3d(spec, params, x)
    return conv(spec, params, x)


# ---------------------------------------------------------------------------
# Recurrent layers
# ---------------------------------------------------------------------------


def _split_gates(z: Tensor, hidden: int):
    return [slice_axis(z, -1, k * hidden, (k + 1) * hidden) for k in range(4)]


def _lstm_update(z: Tensor, c_prev: Tensor, hidden: int) -> RecurrentState:
    # gate order along the last axis: input, forget, candidate, output
    i, f, g, o = _split_gates(z, hidden)
    c = add(mul(sigmoid(f), c_prev), mul(sigmoid(i), tanh(g)))
    h = mul(sigmoid(o), tanh(c))
    return RecurrentState(h, c)


def zero_state(spec: LayerSpec, batch: int, spatial: Tuple[int, ...] = (), dtype=np.float64) -> RecurrentState:
    shape = (batch,) + tuple(spatial) + (spec.hidden,)
    return RecurrentState(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def lstm_step(
    spec: LayerSpec, params: Mapping[str, Tensor], x: Tensor, state: RecurrentState
) -> Tuple[Tensor, RecurrentState]:
    """One LSTM step on a ``batch x in_dim`` input."""
    h_prev, c_prev = state
    if x.ndim != 2 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"lstm_step expects batch x {spec.in_channels}, got {x.shape}")
    expected = (x.shape[0], spec.hidden)
    if h_prev.shape != expected or c_prev.shape != expected:
        raise ShapeError(f"lstm_step state {h_prev.shape}/{c_prev.shape}, expected {expected}")
    z = bias_add(
        add(matmul(x, params["input_kernel"]), matmul(h_prev, params["recurrent_kernel"])),
        params["bias"],
    )
    new_state = _lstm_update(z, c_prev, spec.hidden)
    return new_state.h, new_state


def convlstm_step(
    spec: LayerSpec, params: Mapping[str, Tensor], x: Tensor, state: RecurrentState
) -> Tuple[Tensor, RecurrentState]:
    """One ConvLSTM step: every weight application is a same-padded 2D convolution.

    Accepts ``B x H x W x C_in`` or unbatched ``H x W x C_in`` inputs with a
    matching state.
    """
    if x.ndim == 3:
        batched = RecurrentState(
            reshape(state.h, (1,) + state.h.shape), reshape(state.c, (1,) + state.c.shape)
        )
        h, new_state = convlstm_step(spec, params, reshape(x, (1,) + x.shape), batched)
        squeeze = lambda t: reshape(t, t.shape[1:])  # noqa: E731
        return squeeze(h), RecurrentState(squeeze(new_state.h), squeeze(new_state.c))
    h_prev, c_prev = state
    if x.ndim != 4 or x.shape[-1] != spec.in_channels:
        raise ShapeError(f"convlstm_step expects B x H x W x {spec.in_channels}, got {x.shape}")
    expected = x.shape[:-1] + (spec.hidden,)
    if h_prev.shape != expected or c_prev.shape != expected:
        raise ShapeError(f"convlstm_step state {h_prev.shape}/{c_prev.shape}, expected {expected}")
    z = add(
        conv2d(x, params["input_kernel"], params["bias"]),
        conv2d(h_prev, params["recurrent_kernel"]),
    )
    new_state = _lstm_update(z, c_prev, spec.hidden)
    return new_state.h, new_state


def lstm_sequence(
    spec: LayerSpec,
    params: Mapping[str, Tensor],
    xs: Tensor,
    state: Optional[RecurrentState] = None,
) -> Tuple[Tensor, RecurrentState]:
    """Unroll :func:`lstm_step` over the time axis of ``B x T x in_dim``."""
    if state is None:
        state = zero_state(spec, xs.shape[0], dtype=xs.dtype)
    outputs = []
    for t in range(xs.shape[1]):
        h, state = lstm_step(spec, params, take(xs, 1, t), state)
        outputs.append(h)
    return stack(outputs, axis=1), state


def convlstm_sequence(
    spec: LayerSpec,
    params: Mapping[str, Tensor],
    xs: Tensor,
    state: Optional[RecurrentState] = None,
) -> Tuple[Tensor, RecurrentState]:
    """Unroll :func:`convlstm_step` over the time axis of ``B x T x H x W x C``."""
    if state is None:
        state = zero_state(spec, xs.shape[0], xs.shape[2:4], dtype=xs.dtype)
    outputs = []
    for t in range(xs.shape[1]):
        h, state = convlstm_step(spec, params, take(xs, 1, t), state)
        outputs.append(h)
    return stack(outputs, axis=1), state


# ---------------------------------------------------------------------------
# Residual blocks
# ---------------------------------------------------------------------------


def _pre_activated_conv(
    spec: LayerSpec,
    params: Mapping[str, Any],
    buffers: MutableMapping[str, Any],
    bn: str,
    conv_name: str,
    x: Tensor,
    training: bool,
) -> Tensor:
    sub = children(spec)
    y = batchnorm(sub[bn], params[bn], buffers[bn], x, training)
    return conv(sub[conv_name], params[conv_name], activation(spec, y))


def p3d_spatial(spec, params, buffers, x: Tensor, training: bool = False) -> Tensor:
    """BN, leaky ReLU, then the 1 x S_d x S_d spatial filter."""
    return _pre_activated_conv(spec, params, buffers, "bn_spatial", "spatial", x, training)


def p3d_temporal(spec, params, buffers, x: Tensor, training: bool = False) -> Tensor:
    """BN, leaky ReLU, then the T_d x 1 x 1 temporal filter."""
    return _pre_activated_conv(spec, params, buffers, "bn_temporal", "temporal", x, training)


def p3d_block(
    variant: str,
    spec: LayerSpec,
    params: Mapping[str, Any],
    buffers: MutableMapping[str, Any],
    x: Tensor,
    training: bool = False,
) -> Tensor:
    """Pseudo-3D residual block.

    A: ``x + T(S(x))``; B: ``x + S(x) + T(x)``; C: ``x + S(x) + T(S(x))``,
    where S and T are the pre-activated spatial and temporal filters.
    """
    variant = variant.upper()
    if variant not in P3D_KINDS:
        raise ShapeError(f"unknown P3D variant {variant!r}")
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"p3d_block expects {spec.in_channels} channels, got {x.shape}")
    if variant == "A":
        return add(x, p3d_temporal(spec, params, buffers, p3d_spatial(spec, params, buffers, x, training), training))
    if variant == "B":
        spatial = p3d_spatial(spec, params, buffers, x, training)
        temporal = p3d_temporal(spec, params, buffers, x, training)
        return add(add(x, spatial), temporal)
    spatial = p3d_spatial(spec, params, buffers, x, training)
    return add(add(x, spatial), p3d_temporal(spec, params, buffers, spatial, training))


def refine_block(
    spec: LayerSpec,
    params: Mapping[str, Any],
    buffers: MutableMapping[str, Any],
    x: Tensor,
    training: bool = False,
) -> Tensor:
    """RefineNet residual unit: conv chain 2 -> 8 -> 16 -> 2 plus identity skip.

    Each convolution is followed by BN; the first two also by leaky ReLU, the
    last stays linear before the skip addition.
    """
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"refine_block expects {spec.in_channels} channels, got {x.shape}")
    sub = children(spec)
    stages = len(sub) // 2
    y = x
    for n in range(1, stages + 1):
        y = apply_conv(sub[f"conv{n}"], params[f"conv{n}"], y)
        y = batchnorm(sub[f"bn{n}"], params[f"bn{n}"], buffers[f"bn{n}"], y, training)
        if n < stages:
            y = activation(spec, y)
    return add(x, y)
