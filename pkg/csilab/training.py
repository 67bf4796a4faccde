"""End-to-end training: MSE loss, ADAM, piecewise learning rate and the epoch loop."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .channel import NormalizationRecord, derive_seed
from .errors import ConfigError, NonFiniteError, ShapeError, TrainingDivergedError
from .metrics import evaluate_nmse_db
from .models import CsiFeedbackModel, ParameterSet
from .storage import read_tensors, write_tensors
from .tensor import Tape, Tensor, backward, scale, square, sub, sum_all

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_nmse_db")

Breakpoints = Tuple[Tuple[int, float], ...]


class TrainConfig(BaseModel):
    """Optimization settings.

    ``breakpoints`` are ``(first epoch, learning rate)`` pairs written for a
    run of ``reference_epochs``; with ``scale_schedule`` they are stretched
    to ``epochs`` (1500 epochs with changes at 1001 and 1201 become 150
    epochs with changes at 101 and 121).
    """

    model_config = ConfigDict(frozen=True)

    epochs: int = 150
    batch_size: int = 200
    breakpoints: Breakpoints = ((1, 1e-3), (1001, 5e-4), (1201, 1e-4))
    reference_epochs: int = 1500
    scale_schedule: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    eval_batch_size: int = 200

    @field_validator("epochs", "checkpoint_every")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError(f"must be non-negative, got {value}")
        return value

    @field_validator("batch_size", "reference_epochs", "eval_batch_size")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be at least 1, got {value}")
        return value

    @model_validator(mode="after")
    def _schedule(self) -> "TrainConfig":
        starts = [start for start, _ in self.breakpoints]
        if not starts or starts[0] != 1:
            raise ValueError(f"the first learning-rate breakpoint must start at epoch 1, got {starts}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"learning-rate breakpoints must be strictly increasing, got {starts}")
        if any(lr <= 0 for _, lr in self.breakpoints):
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.epsilon > 0):
            raise ValueError(f"invalid ADAM constants beta1={self.beta1} beta2={self.beta2} epsilon={self.epsilon}")
        return self

    def scaled_breakpoints(self) -> Breakpoints:
        if not self.scale_schedule or self.epochs == self.reference_epochs or self.epochs == 0:
            return self.breakpoints
        factor = self.epochs / self.reference_epochs
        return tuple((1 + int(round((start - 1) * factor)), lr) for start, lr in self.breakpoints)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant learning rate of 1-based ``epoch``."""
    if epoch < 1:
        raise ConfigError(f"epochs are numbered from 1, got {epoch}")
    rate = config.breakpoints[0][1]
    for start, lr in config.scaled_breakpoints():
        if epoch >= start:
            rate = lr
    return rate


def mse_loss(predictions: Tensor, targets: Tensor) -> Tensor:
    """Squared distance summed per (sample, step), averaged over samples and steps."""
    if predictions.shape != targets.shape:
        raise ShapeError(f"mse_loss shape mismatch {predictions.shape} vs {targets.shape}")
    if predictions.ndim < 2:
        raise ShapeError(f"mse_loss expects batch x T x ..., got {predictions.shape}")
    terms = predictions.shape[0] * predictions.shape[1]
    return scale(sum_all(square(sub(predictions, targets))), 1.0 / terms)


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


class AdamState:
    """First and second moment estimates keyed by parameter name, plus the step count."""

    def __init__(self, m: Optional[Dict[str, np.ndarray]] = None, v: Optional[Dict[str, np.ndarray]] = None, step: int = 0):
        self.m = m or {}
        self.v = v or {}
        self.step = step
        self.rejected = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            {name: np.zeros_like(p.data) for name, p in params.items()},
            {name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> bool:
    """Bias-corrected ADAM update of ``params`` in place.

    A step with any non-finite gradient entry is rejected: nothing changes,
    a warning is logged and ``False`` is returned.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            state.rejected += 1
            logger.warning("adam: rejected step %d, non-finite gradient for %s", state.step + 1, name)
            return False
    for name in params:
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name].data)
            state.v[name] = np.zeros_like(params[name].data)
        if state.m[name].shape != params[name].shape:
            raise ShapeError(f"adam moments for {name} are {state.m[name].shape}, parameter is {params[name].shape}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return True


def save_optimizer(path: Union[str, Path], state: AdamState, epoch: int) -> Path:
    arrays = {f"m/{name}": a for name, a in state.m.items()}
    arrays.update({f"v/{name}": a for name, a in state.v.items()})
    return write_tensors(path, arrays, {"step": state.step, "epoch": epoch})


def load_optimizer(path: Union[str, Path]) -> Tuple[AdamState, int]:
    """Returns the moments and the last completed epoch."""
    echo, arrays = read_tensors(path)
    m = {name[2:]: a for name, a in arrays.items() if name.startswith("m/")}
    v = {name[2:]: a for name, a in arrays.items() if name.startswith("v/")}
    if m.keys() != v.keys():
        raise ShapeError(f"{path}: first and second moments cover different parameters")
    return AdamState(m, v, int(echo.get("step", 0))), int(echo.get("epoch", 0))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TrainResult(NamedTuple):
    params: ParameterSet
    best_params: ParameterSet
    history: List[Dict[str, Any]]
    optimizer: AdamState
    best_val_nmse_db: float


EpochCallback = Callable[[int, ParameterSet, AdamState, List[Dict[str, Any]]], None]


def _batches(count: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng(derive_seed(seed, epoch)).permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def train(
    model: CsiFeedbackModel,
    params: ParameterSet,
    train_samples: np.ndarray,
    val_samples: np.ndarray,
    record: NormalizationRecord,
    config: TrainConfig,
    val_record: Optional[NormalizationRecord] = None,
    start_epoch: int = 1,
    optimizer: Optional[AdamState] = None,
    history: Optional[Sequence[Dict[str, Any]]] = None,
    on_epoch: Optional[EpochCallback] = None,
    best_params: Optional[ParameterSet] = None,
) -> TrainResult:
    """Train ``params`` in place on normalized samples for epochs ``start_epoch..config.epochs``.

    Every epoch visits the training samples in a shuffled order derived from
    ``config.seed`` and the epoch number, records the mean mini-batch loss and
    the validation NMSE, and keeps a copy of the parameters with the best
    validation NMSE.

    When resuming, ``best_params`` must hold the weights of the best epoch in
    ``history``; they stay the best until a new epoch beats that epoch.
    Without them the resumed weights are only compared against their own
    epoch, the last row of ``history``.
    """
    if val_record is not None and (val_record.scale, val_record.offset) != (record.scale, record.offset):
        raise ConfigError(
            f"training and validation normalization differ: scale {record.scale} vs {val_record.scale}"
        )
    if len(train_samples) == 0 and config.epochs >= start_epoch:
        raise ConfigError("training split is empty")

    named = dict(params.named())
    optimizer = optimizer or AdamState.zeros_like(named)
    history = list(history or [])
    finite = [row["val_nmse_db"] for row in history if math.isfinite(row["val_nmse_db"])]
    if best_params is not None:
        best_params = best_params.copy()
        best_val = min(finite, default=math.inf)
    else:
        best_params = params.copy()
        last = history[-1]["val_nmse_db"] if history else math.inf
        best_val = last if math.isfinite(last) else math.inf
    dtype = params.dtype

    for epoch in range(start_epoch, config.epochs + 1):
        last_good = params.copy()
        lr = lr_schedule(epoch, config)
        losses = []
        for index in _batches(len(train_samples), config.batch_size, config.seed, epoch):
            batch = Tensor(np.asarray(train_samples[index], dtype=dtype))
            with Tape():
                loss = mse_loss(model.forward(params, batch, training=True), batch)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}", last_good=last_good, history=history
                    )
                grads = backward(loss, named.values())
            adam_step(named, dict(zip(named, grads)), optimizer, lr, config.beta1, config.beta2, config.epsilon)
            losses.append(loss.item())

        val_db = evaluate_nmse_db(model, params, val_samples, record, config.eval_batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_nmse_db": val_db}
        history.append(row)
        logger.info("epoch %d lr=%.1e loss=%.6f val_nmse=%.2f dB", epoch, lr, row["train_loss"], val_db)
        if val_db < best_val:
            best_val = val_db
            best_params = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, params, optimizer, history)

    if optimizer.rejected:
        logger.warning("training rejected %d optimizer steps with non-finite gradients", optimizer.rejected)
    return TrainResult(params, best_params, history, optimizer, best_val)


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ConfigError(f"smoothing window must be at least 1, got {window}")
    sums = np.cumsum(np.concatenate([[0.0], values]))
    ends = np.arange(1, len(values) + 1)
    starts = np.maximum(ends - window, 0)
    return (sums[ends] - sums[starts]) / (ends - starts)


def ensure_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return values
