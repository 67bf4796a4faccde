"""Synthetic time-varying MIMO-OFDM CSI.

Pipeline for one sample::

    gen_multipath_csi   -> H~ (N_t x N~_c, spatial-frequency domain)
    dft_truncate        -> H_1 (N_t x N_c, angular-delay domain)
    evolve_sequence     -> H_1..H_T with H_{t+1} = (1-a^2) H_t + a^2 U_t
    normalize           -> T x N_t x N_c x 2 real tensor in [0, 1]

The multipath generator stands in for COST2100: a uniform linear array with
half-wavelength spacing, L paths with on-grid delays inside the retained
delay window and exponentially decaying power.
"""

from __future__ import annotations

import logging
import math
from typing import NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class ChannelParams(BaseModel):
    """Dimensions and statistics of the generated channels."""

    model_config = ConfigDict(frozen=True)

    n_t: int = 32
    n_sub: int = 1024
    n_c: int = 32
    steps: int = 4
    alpha: float = 0.1
    sigma_u: float = 1e-3
    paths: int = 3
    seed: int = 0

    @field_validator("n_t", "n_sub", "n_c", "steps")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"extents must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _ranges(self) -> "ChannelParams":
        if self.n_c >= self.n_sub:
            raise ValueError(f"retained columns N_c={self.n_c} must be below N~_c={self.n_sub}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.sigma_u <= 0:
            raise ValueError(f"sigma_u must be positive, got {self.sigma_u}")
        if self.paths < 0:
            raise ValueError(f"paths must be non-negative, got {self.paths}")
        return self

    @property
    def f_weight(self) -> float:
        """Scalar of F = (1 - alpha^2) I."""
        return 1.0 - self.alpha**2

    @property
    def g_weight(self) -> float:
        """Scalar of G = alpha^2 I."""
        return self.alpha**2


class CsiSequence(NamedTuple):
    """T angular-delay CSI matrices of one sample plus how they were drawn."""

    matrices: np.ndarray  # T x N_t x N_c complex
    params: ChannelParams
    seed: int


class NormalizationRecord(BaseModel):
    """Affine map x -> x / (2 s) + offset shared by all splits of a dataset."""

    scale: float
    offset: float = 0.5
    clipped: int = 0

    @field_validator("scale")
    @classmethod
    def _positive_scale(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"normalization scale must be positive, got {value}")
        return value


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def mix64(value: int) -> int:
    """SplitMix64 finalizer."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, index: int) -> int:
    """Seed for stream ``index`` of base seed ``base``, independent of generation order."""
    return mix64((mix64(base & _MASK64) ^ (index & _MASK64)) & _MASK64)


def sample_streams(seed: int, index: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Path and noise generators for sample ``index``."""
    sample_seed = derive_seed(seed, index)
    return (
        np.random.default_rng(derive_seed(sample_seed, 0)),
        np.random.default_rng(derive_seed(sample_seed, 1)),
    )


# ---------------------------------------------------------------------------
# Channel generation and domain transforms
# ---------------------------------------------------------------------------


def steering_vector(n_t: int, theta: float) -> np.ndarray:
    """Half-wavelength ULA response."""
    return np.exp(-1j * math.pi * np.arange(n_t) * math.sin(theta))


def frequency_response(n_sub: int, delay: float) -> np.ndarray:
    return np.exp(-2j * math.pi * np.arange(n_sub) * delay / n_sub)


def multipath_csi(
    n_t: int, n_sub: int, gains: np.ndarray, angles: np.ndarray, delays: np.ndarray
) -> np.ndarray:
    """Closed-form sum over paths of gain * steer(angle) * freq(delay)^T."""
    csi = np.zeros((n_t, n_sub), dtype=np.complex128)
    for gain, theta, delay in zip(gains, angles, delays):
        csi += gain * np.outer(steering_vector(n_t, theta), frequency_response(n_sub, delay))
    return csi


def gen_multipath_csi(params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one spatial-frequency CSI matrix H~ (N_t x N~_c)."""
    count = params.paths
    if count == 0:
        return np.zeros((params.n_t, params.n_sub), dtype=np.complex128)
    angles = rng.uniform(-math.pi / 2, math.pi / 2, size=count)
    delays = rng.integers(0, params.n_c, size=count).astype(np.float64)
    power = np.exp(-delays / (params.n_c / 4.0))
    power /= power.sum()
    gains = np.sqrt(power / 2.0) * (rng.standard_normal(count) + 1j * rng.standard_normal(count))
    return multipath_csi(params.n_t, params.n_sub, gains, angles, delays)


def _to_angular_delay(csi: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.fft.fft(csi, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def _to_spatial_frequency(csi: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.fft.fft(csi, axis=-1, norm="ortho"), axis=-2, norm="ortho")


def dft_truncate(csi: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Unitary 2D DFT to the angular-delay domain, keeping the first N_c delay columns.

    Works on a single ``N_t x N~_c`` matrix or any stack of them.
    """
    if csi.shape[-2:] != (params.n_t, params.n_sub):
        raise ShapeError(f"dft_truncate expects ... x {params.n_t} x {params.n_sub}, got {csi.shape}")
    return _to_angular_delay(csi)[..., : params.n_c]


def zero_pad_idft(truncated: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Append N~_c - N_c zero columns and invert the :func:`dft_truncate` transform."""
    if truncated.shape[-2:] != (params.n_t, params.n_c):
        raise ShapeError(f"zero_pad_idft expects ... x {params.n_t} x {params.n_c}, got {truncated.shape}")
    widths = [(0, 0)] * (truncated.ndim - 1) + [(0, params.n_sub - params.n_c)]
    return _to_spatial_frequency(np.pad(truncated.astype(np.complex128), widths))


def evolve_sequence(
    first: np.ndarray, params: ChannelParams, rng: np.random.Generator
) -> np.ndarray:
    """Extend H_1 to T matrices with H_{t+1} = (1 - a^2) H_t + a^2 U_t.

    U_t has independent circularly-symmetric complex Gaussian entries of total
    variance sigma_u^2.
    """
    if first.shape != (params.n_t, params.n_c):
        raise ShapeError(f"evolve_sequence expects {params.n_t} x {params.n_c}, got {first.shape}")
    f, g = params.f_weight, params.g_weight
    std = params.sigma_u / math.sqrt(2.0)
    matrices = [np.asarray(first, dtype=np.complex128)]
    for _ in range(params.steps - 1):
        noise = std * (
            rng.standard_normal(first.shape) + 1j * rng.standard_normal(first.shape)
        )
        matrices.append(f * matrices[-1] + g * noise)
    return np.stack(matrices)


def generate_sequence(params: ChannelParams, index: int) -> CsiSequence:
    """Generate sample ``index`` of the stream seeded by ``params.seed``."""
    path_rng, noise_rng = sample_streams(params.seed, index)
    first = dft_truncate(gen_multipath_csi(params, path_rng), params)
    return CsiSequence(evolve_sequence(first, params, noise_rng), params, derive_seed(params.seed, index))


def generate_batch(params: ChannelParams, count: int, start: int = 0) -> np.ndarray:
    """``count x T x N_t x N_c`` complex matrices for sample indices ``start..start+count-1``."""
    shape = (count, params.steps, params.n_t, params.n_c)
    batch = np.empty(shape, dtype=np.complex128)
    for i in range(count):
        batch[i] = generate_sequence(params, start + i).matrices
    return batch


def temporal_correlation(sequences: np.ndarray, step: int = 0) -> float:
    """Mean normalized real inner product between H_step and H_step+1."""
    a = sequences[:, step].reshape(len(sequences), -1)
    b = sequences[:, step + 1].reshape(len(sequences), -1)
    inner = np.real(np.sum(np.conj(a) * b, axis=1))
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    valid = norms > 0
    return float(np.mean(inner[valid] / norms[valid]))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def split_complex(matrices: np.ndarray) -> np.ndarray:
    """Stack real and imaginary parts as a trailing channel axis."""
    return np.stack([matrices.real, matrices.imag], axis=-1)


def merge_complex(channels: np.ndarray) -> np.ndarray:
    return channels[..., 0] + 1j * channels[..., 1]


def fit_normalization(train: np.ndarray) -> NormalizationRecord:
    """Scale record from the largest real/imaginary magnitude of the training split."""
    scale = float(np.max(np.abs(split_complex(train)))) if train.size else 0.0
    if scale == 0.0:
        raise ConfigError("training split is all zeros; normalization scale would be 0")
    return NormalizationRecord(scale=scale)


def normalize(
    matrices: np.ndarray, record: Optional[NormalizationRecord] = None
) -> Tuple[np.ndarray, NormalizationRecord]:
    """Map complex CSI to real ``... x 2`` values in [0, 1].

    Without ``record`` one is fitted on ``matrices`` (the training split).
    Values falling outside [0, 1] are clipped and counted in the returned
    record.
    """
    if record is None:
        record = fit_normalization(matrices)
    values = split_complex(matrices) / (2.0 * record.scale) + record.offset
    outside = int(np.count_nonzero((values < 0.0) | (values > 1.0)))
    if outside:
        logger.warning("normalize: clipped %d values outside [0, 1]", outside)
        values = np.clip(values, 0.0, 1.0)
    return values, record.model_copy(update={"clipped": record.clipped + outside})


def denormalize(values: np.ndarray, record: NormalizationRecord) -> np.ndarray:
    """Invert :func:`normalize` back to complex matrices."""
    real = (np.asarray(values, dtype=np.float64) - record.offset) * (2.0 * record.scale)
    return merge_complex(real)
