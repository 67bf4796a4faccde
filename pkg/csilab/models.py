"""Encoder/decoder assembly for ConvlstmCsiNet, its P3D variants and the baselines.

Every network has four modules. The encoder (UE side) runs feature
extraction and feature compression; the decoder (BS side) runs feature
decompression and feature recovery::

    extract:    variant dependent, always emits 2 feature maps
    compress:   FC N->M  +  LSTM(hidden M)      (CsiNet: FC only)
    decompress: FC M->N  +  LSTM(hidden N)      (CsiNet: FC only)
    recover:    RefineNet x2 -> conv3d 2->2 -> sigmoid
"""

from __future__ import annotations

import copy
import logging
from fractions import Fraction
from typing import Any, Dict, Iterator, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ShapeError
from .layers import (
    LayerSpec,
    ParamTree,
    activation,
    batchnorm,
    conv,
    convlstm_sequence,
    dense,
    init_buffers,
    init_params,
    lstm_sequence,
    p3d_block,
    param_count,
    refine_block,
)
from .tensor import Tensor, add, as_tensor, reshape, sigmoid

logger = logging.getLogger(__name__)

Variant = Literal["csinet", "reccsinet", "convlstm", "convlstm_a", "convlstm_b", "convlstm_c"]
VARIANTS: Tuple[str, ...] = ("csinet", "reccsinet", "convlstm", "convlstm_a", "convlstm_b", "convlstm_c")
PAPER_GAMMAS: Tuple[str, ...] = ("1/4", "1/8", "1/16", "1/32")
DISPLAY_NAMES = {
    "csinet": "CsiNet",
    "reccsinet": "RecCsiNet",
    "convlstm": "ConvlstmCsiNet",
    "convlstm_a": "ConvlstmCsiNet-A",
    "convlstm_b": "ConvlstmCsiNet-B",
    "convlstm_c": "ConvlstmCsiNet-C",
}


def parse_gamma(value: Union[str, float, int, Fraction]) -> Fraction:
    """Parse a compression ratio written as ``1/4``, ``0.25`` or a Fraction."""
    try:
        if isinstance(value, str):
            return Fraction(value.strip())
        if isinstance(value, float):
            return Fraction(value).limit_denominator(1 << 16)
        return Fraction(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"invalid compression ratio {value!r}") from exc


class ModelConfig(BaseModel):
    """Architecture choice and sizes of one CSI feedback network."""

    model_config = ConfigDict(frozen=True)

    variant: Variant = "convlstm_a"
    n_t: int = 32
    n_c: int = 32
    steps: int = 4
    gamma: str = "1/4"
    hidden_channels: int = 8
    leaky_slope: float = 0.3
    temporal_depth: int = 3
    spatial_depth: int = 3
    temporal_padding: Literal["same", "causal"] = "causal"
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = 0

    @field_validator("gamma", mode="before")
    @classmethod
    def _canonical_gamma(cls, value: Any) -> str:
        ratio = parse_gamma(value)
        return f"{ratio.numerator}/{ratio.denominator}"

    @field_validator("n_t", "n_c", "steps", "hidden_channels")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"extents must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _codeword_fits(self) -> "ModelConfig":
        ratio = self.ratio
        length = ratio * self.n_features
        if ratio <= 0 or length.denominator != 1 or not 1 <= length < self.n_features:
            raise ValueError(
                f"gamma {self.gamma} gives codeword length {length} for N = {self.n_features}; "
                "it must be an integer with 1 <= M < N"
            )
        return self

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.gamma)

    @property
    def n_features(self) -> int:
        """N = 2 * N_t * N_c real values per time step."""
        return 2 * self.n_t * self.n_c

    @property
    def codeword_length(self) -> int:
        """M = gamma * N."""
        return int(self.ratio * self.n_features)

    @property
    def is_recurrent(self) -> bool:
        return self.variant != "csinet"

    @property
    def uses_convlstm(self) -> bool:
        return self.variant.startswith("convlstm")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


def flatten(tree: Mapping[str, Any], prefix: str = "") -> Iterator[Tuple[str, Any]]:
    for name, value in tree.items():
        path = f"{prefix}/{name}" if prefix else name
        if isinstance(value, Mapping):
            yield from flatten(value, path)
        else:
            yield path, value


def unflatten(items: Mapping[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for path, value in items.items():
        node = tree
        *parents, leaf = path.split("/")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return tree


class ParameterSet:
    """Learnable parameters Θ = (Θ_enc, Θ_dec) plus batch-norm running statistics.

    Both trees have the top-level keys ``encoder`` and ``decoder``, so every
    parameter belongs to exactly one side.
    """

    PARTS = ("encoder", "decoder")

    def __init__(self, params: ParamTree, buffers: ParamTree):
        self.params = params
        self.buffers = buffers

    @property
    def encoder(self) -> ParamTree:
        return self.params["encoder"]

    @property
    def decoder(self) -> ParamTree:
        return self.params["decoder"]

    def named(self, part: Optional[str] = None) -> List[Tuple[str, Tensor]]:
        tree = self.params if part is None else {part: self.params[part]}
        return list(flatten(tree))

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return list(flatten(self.buffers))

    def tensors(self, part: Optional[str] = None) -> List[Tensor]:
        return [t for _, t in self.named(part)]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors()[0].dtype

    def copy(self) -> "ParameterSet":
        return copy.deepcopy(self)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Flat ``name -> array`` view of parameters and buffers (buffers under ``buffers/``)."""
        arrays = {name: t.data for name, t in self.named()}
        arrays.update({f"buffers/{name}": a for name, a in self.named_buffers()})
        return arrays

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place from a :meth:`state_arrays` style mapping."""
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ShapeError(f"parameter values missing for {missing[:3]}")
        for name, tensor in self.named():
            tensor.data = np.array(arrays[name], dtype=tensor.dtype, copy=True)
        buffer_tree = unflatten({name: arrays[f"buffers/{name}"] for name, _ in self.named_buffers()})
        _assign_buffers(self.buffers, buffer_tree)

    def equals(self, other: "ParameterSet") -> bool:
        """Bitwise equality of every parameter and buffer."""
        mine, theirs = self.state_arrays(), other.state_arrays()
        return mine.keys() == theirs.keys() and all(
            mine[k].dtype == theirs[k].dtype and np.array_equal(mine[k], theirs[k]) for k in mine
        )


def _assign_buffers(target: Dict[str, Any], source: Mapping[str, Any]) -> None:
    for name, value in source.items():
        if isinstance(value, Mapping):
            _assign_buffers(target[name], value)
        else:
            target[name] = np.array(value, dtype=target[name].dtype, copy=True)


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


class CsiFeedbackModel:
    """Layer layout of one configured network; parameters live in a ParameterSet."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.specs: Dict[str, Dict[str, Dict[str, LayerSpec]]] = {
            "encoder": {"extract": self._extraction_specs(), "compress": self._compression_specs()},
            "decoder": {"decompress": self._decompression_specs(), "recover": self.recovery_specs()},
        }

    def __repr__(self) -> str:
        c = self.config
        return f"CsiFeedbackModel({c.variant}, {c.n_t}x{c.n_c}, T={c.steps}, gamma={c.gamma})"

    def _common(self) -> Dict[str, Any]:
        c = self.config
        return dict(
            slope=c.leaky_slope,
            temporal_padding=c.temporal_padding,
            momentum=c.bn_momentum,
            epsilon=c.bn_epsilon,
        )

    def _batchnorm(self, channels: int) -> LayerSpec:
        return LayerSpec(kind="batchnorm", in_channels=channels, out_channels=channels, **self._common())

    def _extraction_specs(self) -> Dict[str, LayerSpec]:
        c = self.config
        common = self._common()
        hidden = c.hidden_channels
        if not c.uses_convlstm:
            return {
                "conv": LayerSpec(kind="conv3d", in_channels=2, out_channels=2, kernel=(1, 3, 3), **common),
                "bn": self._batchnorm(2),
            }
        specs = {
            "convlstm": LayerSpec(
                kind="convlstm", in_channels=2, hidden=hidden, kernel=(1, 3, 3), **common
            )
        }
        if c.variant == "convlstm":
            specs["conv"] = LayerSpec(kind="conv3d", in_channels=hidden, out_channels=2, kernel=(3, 3, 3), **common)
        else:
            specs["p3d"] = LayerSpec(
                kind=f"p3d_{c.variant[-1]}",
                in_channels=hidden,
                out_channels=hidden,
                temporal_depth=c.temporal_depth,
                spatial_depth=c.spatial_depth,
                **common,
            )
            specs["project"] = LayerSpec(kind="conv3d", in_channels=hidden, out_channels=2, kernel=(1, 1, 1), **common)
        specs["bn"] = self._batchnorm(2)
        return specs

    def _compression_specs(self) -> Dict[str, LayerSpec]:
        c = self.config
        n, m = c.n_features, c.codeword_length
        specs = {"fc": LayerSpec(kind="dense", in_channels=n, out_channels=m)}
        if c.is_recurrent:
            specs["lstm"] = LayerSpec(kind="lstm", in_channels=n, hidden=m)
        return specs

    def _decompression_specs(self) -> Dict[str, LayerSpec]:
        c = self.config
        n, m = c.n_features, c.codeword_length
        specs = {"fc": LayerSpec(kind="dense", in_channels=m, out_channels=n)}
        if c.is_recurrent:
            specs["lstm"] = LayerSpec(kind="lstm", in_channels=m, hidden=n)
        return specs

    def recovery_specs(self, separable: Optional[bool] = None) -> Dict[str, LayerSpec]:
        """RefineNet x2 and the output convolution.

        ConvlstmCsiNet variants use depthwise-separable convolutions inside
        RefineNet; baselines use standard per-step (1x3x3) convolutions.
        """
        c = self.config
        if separable is None:
            separable = c.uses_convlstm
        kernel = (3, 3, 3) if c.uses_convlstm else (1, 3, 3)
        refine = LayerSpec(
            kind="refine_block", in_channels=2, out_channels=2, kernel=kernel, separable=separable, **self._common()
        )
        return {
            "refine1": refine,
            "refine2": refine,
            "out": LayerSpec(kind="conv3d", in_channels=2, out_channels=2, kernel=kernel, **self._common()),
        }

    def layers(self) -> Iterator[Tuple[str, str, str, LayerSpec]]:
        for part, modules in self.specs.items():
            for module, specs in modules.items():
                for name, spec in specs.items():
                    yield part, module, name, spec

    def init(self) -> ParameterSet:
        c = self.config
        rng = np.random.default_rng(c.seed)
        params: ParamTree = {}
        buffers: ParamTree = {}
        for part, module, name, spec in self.layers():
            params.setdefault(part, {}).setdefault(module, {})[name] = init_params(spec, rng, c.dtype)
            state = init_buffers(spec, c.dtype)
            if state:
                buffers.setdefault(part, {}).setdefault(module, {})[name] = state
        for part in ParameterSet.PARTS:
            buffers.setdefault(part, {})
        return ParameterSet(params, buffers)

    def module_param_counts(self) -> Dict[str, int]:
        return {
            module: sum(param_count(spec) for spec in specs.values())
            for modules in self.specs.values()
            for module, specs in modules.items()
        }

    # -- evaluation ---------------------------------------------------------

    def _check_sample(self, x: Tensor) -> Tensor:
        c = self.config
        if x.ndim == 4:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 5 or x.shape[2:] != (c.n_t, c.n_c, 2) or x.shape[1] < 1:
            raise ShapeError(f"expected [B x] T x {c.n_t} x {c.n_c} x 2 input, got {x.shape}")
        return x

    def _cast(self, x: Union[Tensor, np.ndarray], params: ParameterSet) -> Tensor:
        dtype = params.dtype
        if isinstance(x, Tensor):
            return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
        return as_tensor(np.asarray(x), dtype=dtype)

    def _extract(self, params: ParamTree, buffers: ParamTree, x: Tensor, training: bool) -> Tensor:
        specs = self.specs["encoder"]["extract"]
        if "convlstm" in specs:
            x, _ = convlstm_sequence(specs["convlstm"], params["convlstm"], x)
        if "p3d" in specs:
            variant = specs["p3d"].kind[-1]
            x = p3d_block(variant, specs["p3d"], params["p3d"], buffers["p3d"], x, training)
            x = conv(specs["project"], params["project"], x)
        else:
            x = conv(specs["conv"], params["conv"], x)
        x = batchnorm(specs["bn"], params["bn"], buffers["bn"], x, training)
        return activation(specs["bn"], x)

    def _parallel_rows(self, specs: Dict[str, LayerSpec], params: ParamTree, x: Tensor) -> Tensor:
        """FC per time step alongside an LSTM over the steps, merged by addition."""
        batch, steps, width = x.shape
        fc = specs["fc"]
        rows = reshape(dense(fc, params["fc"], reshape(x, (batch * steps, width))), (batch, steps, fc.out_channels))
        if "lstm" not in specs:
            return rows
        recurrent, _ = lstm_sequence(specs["lstm"], params["lstm"], x)
        return add(rows, recurrent)

    def encode(self, params: ParameterSet, sample: Union[Tensor, np.ndarray], training: bool = False) -> Tensor:
        x = self._check_sample(self._cast(sample, params))
        unbatched = np.ndim(sample.data if isinstance(sample, Tensor) else sample) == 4
        enc, enc_buffers = params.encoder, params.buffers["encoder"]
        features = self._extract(enc["extract"], enc_buffers["extract"], x, training)
        batch, steps = features.shape[:2]
        flat = reshape(features, (batch, steps, self.config.n_features))
        codewords = self._parallel_rows(self.specs["encoder"]["compress"], enc["compress"], flat)
        return reshape(codewords, codewords.shape[1:]) if unbatched else codewords

    def decode(self, params: ParameterSet, codewords: Union[Tensor, np.ndarray], training: bool = False) -> Tensor:
        c = self.config
        s = self._cast(codewords, params)
        unbatched = s.ndim == 2
        if unbatched:
            s = reshape(s, (1,) + s.shape)
        if s.ndim != 3 or s.shape[-1] != c.codeword_length:
            raise ShapeError(f"expected [B x] T x {c.codeword_length} codewords, got {s.shape}")
        dec, dec_buffers = params.decoder, params.buffers["decoder"]
        rough = self._parallel_rows(self.specs["decoder"]["decompress"], dec["decompress"], s)
        batch, steps = s.shape[:2]
        y = reshape(rough, (batch, steps, c.n_t, c.n_c, 2))
        specs = self.specs["decoder"]["recover"]
        for name in ("refine1", "refine2"):
            y = refine_block(specs[name], dec["recover"][name], dec_buffers["recover"][name], y, training)
        y = sigmoid(conv(specs["out"], dec["recover"]["out"], y))
        return reshape(y, y.shape[1:]) if unbatched else y

    def forward(self, params: ParameterSet, sample: Union[Tensor, np.ndarray], training: bool = False) -> Tensor:
        """Reconstruction of every step t from H_1..H_t: decode(encode(x))."""
        return self.decode(params, self.encode(params, sample, training), training)


def build_model(config: ModelConfig) -> Tuple[CsiFeedbackModel, ParameterSet]:
    """Build the network for ``config`` and initialize its parameters from ``config.seed``."""
    model = CsiFeedbackModel(config)
    params = model.init()
    logger.debug("built %r with %d parameters", model, param_count(params))
    return model, params


def encode(model: CsiFeedbackModel, params: ParameterSet, sample, training: bool = False) -> Tensor:
    return model.encode(params, sample, training)


def decode(model: CsiFeedbackModel, params: ParameterSet, codewords, training: bool = False) -> Tensor:
    return model.decode(params, codewords, training)


def forward(model: CsiFeedbackModel, params: ParameterSet, sample, training: bool = False) -> Tensor:
    return model.forward(params, sample, training)


def recovery_param_count(config: ModelConfig, separable: bool) -> int:
    """Learnable scalars of the recovery module with DS or standard convolutions."""
    specs = CsiFeedbackModel(config).recovery_specs(separable=separable)
    return sum(param_count(spec) for spec in specs.values())
