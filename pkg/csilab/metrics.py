"""Reconstruction quality: NMSE on the truncated CSI and cosine similarity on the full channel."""

from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .channel import ChannelParams, NormalizationRecord, denormalize, zero_pad_idft
from .errors import CsiLabError, ShapeError
from .models import CsiFeedbackModel, ParameterSet

logger = logging.getLogger(__name__)

DB_FLOOR = -300.0


class MetricsReport(BaseModel):
    """Metrics of one (variant, gamma, alpha) cell."""

    model_config = ConfigDict(frozen=True)

    variant: str
    gamma: str
    alpha: float
    epochs: int = 0
    seed: int = 0
    nmse_linear: float = Field(ge=0.0)
    nmse_db: float
    rho: float = Field(ge=0.0, le=1.0)
    samples: int = 0
    skipped_samples: int = 0
    skipped_columns: int = 0


def to_db(value: float) -> float:
    """10 log10 of a power ratio, floored at -300 dB."""
    if value <= 0.0:
        return DB_FLOOR
    return max(10.0 * math.log10(value), DB_FLOOR)


def nmse_terms(originals: np.ndarray, reconstructions: np.ndarray) -> Tuple[float, int]:
    """Mean over samples of the per-step average ||H - H^||^2 / ||H||^2.

    ``originals`` and ``reconstructions`` are ``B x T x N_t x N_c`` complex
    arrays. Samples containing an all-zero H_t are skipped; returns the mean
    and the number skipped.
    """
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if originals.shape != reconstructions.shape or originals.ndim != 4:
        raise ShapeError(f"nmse expects equal B x T x N_t x N_c arrays, got {originals.shape} vs {reconstructions.shape}")
    energy = np.sum(np.abs(originals) ** 2, axis=(2, 3))
    error = np.sum(np.abs(originals - reconstructions) ** 2, axis=(2, 3))
    valid = np.all(energy > 0, axis=1)
    skipped = int(np.count_nonzero(~valid))
    if skipped:
        logger.warning("nmse: skipped %d samples with a zero-norm CSI matrix", skipped)
    if not valid.any():
        raise CsiLabError("nmse: every sample has a zero-norm CSI matrix")
    ratios = error[valid] / energy[valid]
    return float(np.mean(ratios.mean(axis=1))), skipped


def nmse(originals: np.ndarray, reconstructions: np.ndarray) -> float:
    return nmse_terms(originals, reconstructions)[0]


def nmse_db(originals: np.ndarray, reconstructions: np.ndarray) -> float:
    return to_db(nmse(originals, reconstructions))


def rho_terms(full_originals: np.ndarray, full_reconstructions: np.ndarray) -> Tuple[float, int]:
    """Mean over subcarrier columns of |h^^H h| / (||h^|| ||h||).

    Inputs are ``... x N_t x N~_c`` complex arrays; each column (one
    subcarrier at one time step) contributes one term. Columns where either
    vector is zero are excluded; returns the mean and the number excluded.
    """
    total, counted, excluded = _rho_sums(full_originals, full_reconstructions)
    return _rho_mean(total, counted, excluded), excluded


def _rho_sums(h: np.ndarray, h_hat: np.ndarray) -> Tuple[float, int, int]:
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    if h.shape != h_hat.shape or h.ndim < 2:
        raise ShapeError(f"rho expects equal ... x N_t x N~_c arrays, got {h.shape} vs {h_hat.shape}")
    inner = np.abs(np.sum(np.conj(h_hat) * h, axis=-2))
    norms = np.linalg.norm(h_hat, axis=-2) * np.linalg.norm(h, axis=-2)
    valid = norms > 0
    terms = np.minimum(inner[valid] / norms[valid], 1.0)
    return float(terms.sum()), int(terms.size), int(np.count_nonzero(~valid))


def _rho_mean(total: float, counted: int, excluded: int) -> float:
    if excluded:
        logger.warning("rho: excluded %d zero-norm subcarrier columns", excluded)
    if not counted:
        raise CsiLabError("rho: every subcarrier column has zero norm")
    return total / counted


def cosine_similarity_rho(full_originals: np.ndarray, full_reconstructions: np.ndarray) -> float:
    return rho_terms(full_originals, full_reconstructions)[0]


def reconstruct(
    model: CsiFeedbackModel,
    params: ParameterSet,
    samples: np.ndarray,
    batch_size: int = 200,
) -> np.ndarray:
    """Inference-mode forward pass over ``samples`` in batches (normalized domain)."""
    outputs = [
        model.forward(params, samples[start : start + batch_size], training=False).data
        for start in range(0, len(samples), batch_size)
    ]
    if not outputs:
        return np.empty_like(samples)
    return np.concatenate(outputs)


def evaluate_nmse_db(
    model: CsiFeedbackModel,
    params: ParameterSet,
    samples: np.ndarray,
    record: NormalizationRecord,
    batch_size: int = 200,
) -> float:
    """NMSE in dB of the network on normalized samples; NaN when there are none."""
    if len(samples) == 0:
        return math.nan
    predicted = reconstruct(model, params, samples, batch_size)
    return nmse_db(denormalize(samples, record), denormalize(predicted, record))


def evaluate(
    model: Optional[CsiFeedbackModel],
    params: Optional[ParameterSet],
    samples: np.ndarray,
    record: NormalizationRecord,
    channel: ChannelParams,
    epochs: int = 0,
    batch_size: int = 200,
    bypass: bool = False,
    variant: Optional[str] = None,
    gamma: Optional[str] = None,
) -> MetricsReport:
    """Full-pipeline metrics of a trained network on normalized test samples.

    Reconstructions are denormalized before NMSE; both sides are lifted to
    the full subcarrier domain for rho. With ``bypass`` the network is
    replaced by the identity.
    """
    if bypass:
        predicted = np.asarray(samples)
    else:
        if model is None or params is None:
            raise CsiLabError("evaluate needs a model and parameters unless bypass is set")
        predicted = reconstruct(model, params, samples, batch_size)
    originals = denormalize(samples, record)
    reconstructions = denormalize(predicted, record)

    linear, skipped = nmse_terms(originals, reconstructions)
    # the full-band lift is N~_c / N_c times larger, so go batch by batch
    total, counted, excluded = 0.0, 0, 0
    for start in range(0, len(samples), batch_size):
        part = slice(start, start + batch_size)
        sums = _rho_sums(zero_pad_idft(originals[part], channel), zero_pad_idft(reconstructions[part], channel))
        total, counted, excluded = total + sums[0], counted + sums[1], excluded + sums[2]
    rho = _rho_mean(total, counted, excluded)
    config = model.config if model is not None else None
    report = MetricsReport(
        variant=variant or (config.variant if config else "bypass"),
        gamma=gamma or (config.gamma if config else "1/1"),
        alpha=channel.alpha,
        epochs=epochs,
        seed=config.seed if config else channel.seed,
        nmse_linear=linear,
        nmse_db=to_db(linear),
        rho=rho,
        samples=len(samples),
        skipped_samples=skipped,
        skipped_columns=excluded,
    )
    logger.info("evaluate %s gamma=%s alpha=%g: NMSE %.2f dB, rho %.4f", report.variant, report.gamma, report.alpha, report.nmse_db, report.rho)
    return report


def improvement_db(new_db: float, base_db: float) -> float:
    """Percentage gain in NMSE magnitude: (|new| - |base|) / |base| * 100."""
    if base_db == 0.0:
        return 0.0
    return (abs(new_db) - abs(base_db)) / abs(base_db) * 100.0


def improvement_rho(new_rho: float, base_rho: float) -> float:
    if base_rho == 0.0:
        return 0.0
    return (new_rho - base_rho) / base_rho * 100.0
