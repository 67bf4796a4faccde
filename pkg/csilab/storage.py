"""Binary storage for datasets ("CSID") and parameter checkpoints ("CSIW"), plus CSV helpers.

Both binary formats are little-endian. Headers are numpy structured dtypes.

CSID: header (magic, version, channel params, seed, count, split name and
sizes), then ``count x T x N_t x N_c x 2`` float32 normalized values, then the
normalization record.

CSIW: magic, version, value code (4 = float32, 8 = float64), a JSON config
echo, the record count, then per record: name length, name, rank, shape and
values.
"""

from __future__ import annotations

import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .channel import ChannelParams, NormalizationRecord
from .errors import (
    MagicMismatchError,
    ShapeInconsistencyError,
    StorageError,
    TruncatedFileError,
    VersionMismatchError,
)
from .models import ModelConfig, ParameterSet, build_model

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

DATASET_MAGIC = b"CSID"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"CSIW"
CHECKPOINT_VERSION = 1
NOISE_COMPLEX = 1

DATASET_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("n_t", "<u4"),
        ("n_c", "<u4"),
        ("n_sub", "<u4"),
        ("steps", "<u4"),
        ("alpha", "<f8"),
        ("sigma_u", "<f8"),
        ("paths", "<u4"),
        ("noise", "<u4"),
        ("seed", "<u8"),
        ("count", "<u8"),
        ("split", "S8"),
        ("split_sizes", "<u8", (3,)),
    ]
)
NORMALIZATION_RECORD = np.dtype([("scale", "<f8"), ("offset", "<f8"), ("clipped", "<u8")])
CHECKPOINT_HEADER = np.dtype(
    [("magic", "S4"), ("version", "<u4"), ("value_code", "<u4"), ("echo_length", "<u4")]
)
_VALUE_TYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def ensure_dir(path: PathLike) -> Path:
    """Ensure a directory exists."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


class Dataset(NamedTuple):
    """One split as stored on disk."""

    samples: np.ndarray  # count x T x N_t x N_c x 2, float32 in [0, 1]
    record: NormalizationRecord
    params: ChannelParams
    split: str
    split_sizes: Tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def dataset_write(
    path: PathLike,
    samples: np.ndarray,
    record: NormalizationRecord,
    params: ChannelParams,
    split: str = "train",
    split_sizes: Sequence[int] = (0, 0, 0),
) -> Path:
    """
    Write one split; same inputs always give byte-identical files.

    Args:
        path: Destination ``.csid`` file
        samples: Normalized ``M x T x N_t x N_c x 2`` array
        record: Normalization fitted on the training split
        params: Channel parameters echoed in the header
        split: Split name stored in the header
        split_sizes: Train/val/test sizes of the whole generation run

    Returns:
        The written path
    """
    expected = (params.steps, params.n_t, params.n_c, 2)
    if samples.ndim != 5 or samples.shape[1:] != expected:
        raise ShapeInconsistencyError(
            f"samples of shape {samples.shape} do not match count x {' x '.join(map(str, expected))}"
        )
    header = np.zeros((), dtype=DATASET_HEADER)
    header["magic"] = DATASET_MAGIC
    header["version"] = DATASET_VERSION
    for field in ("n_t", "n_c", "n_sub", "steps", "alpha", "sigma_u", "paths", "seed"):
        header[field] = getattr(params, field)
    header["noise"] = NOISE_COMPLEX
    header["count"] = len(samples)
    header["split"] = split.encode("ascii")
    header["split_sizes"] = tuple(split_sizes)
    tail = np.zeros((), dtype=NORMALIZATION_RECORD)
    tail["scale"], tail["offset"], tail["clipped"] = record.scale, record.offset, record.clipped

    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(samples, dtype="<f4").tobytes())
        f.write(tail.tobytes())
    logger.info("wrote %d %s samples to %s", len(samples), split, path)
    return path


def dataset_read(path: PathLike) -> Dataset:
    """
    Read a split written by :func:`dataset_write`.

    Args:
        path: A ``.csid`` file

    Returns:
        The samples with their normalization record and channel parameters
    """
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != DATASET_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {DATASET_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < DATASET_HEADER.itemsize:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the dataset header")
    header = np.frombuffer(raw, dtype=DATASET_HEADER, count=1)[0]
    if int(header["version"]) != DATASET_VERSION:
        raise VersionMismatchError(f"{path}: format version {int(header['version'])}, expected {DATASET_VERSION}")

    params = ChannelParams(
        n_t=int(header["n_t"]),
        n_c=int(header["n_c"]),
        n_sub=int(header["n_sub"]),
        steps=int(header["steps"]),
        alpha=float(header["alpha"]),
        sigma_u=float(header["sigma_u"]),
        paths=int(header["paths"]),
        seed=int(header["seed"]),
    )
    count = int(header["count"])
    shape = (count, params.steps, params.n_t, params.n_c, 2)
    data_bytes = int(np.prod(shape)) * 4
    expected = DATASET_HEADER.itemsize + data_bytes + NORMALIZATION_RECORD.itemsize
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header declares {expected}")
    if len(raw) > expected:
        raise ShapeInconsistencyError(f"{path}: {len(raw) - expected} bytes beyond the declared samples")

    offset = DATASET_HEADER.itemsize
    samples = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape).copy()
    tail = np.frombuffer(raw, dtype=NORMALIZATION_RECORD, count=1, offset=offset + data_bytes)[0]
    record = NormalizationRecord(scale=float(tail["scale"]), offset=float(tail["offset"]), clipped=int(tail["clipped"]))
    split = header["split"].decode("ascii")
    sizes = tuple(int(s) for s in header["split_sizes"])
    return Dataset(samples, record, params, split, sizes)


# ---------------------------------------------------------------------------
# Named tensor records (checkpoints)
# ---------------------------------------------------------------------------


def write_tensors(path: PathLike, arrays: Mapping[str, np.ndarray], echo: Mapping[str, Any]) -> Path:
    """
    Write named arrays in the CSIW record format.

    Args:
        path: Destination file
        arrays: Name to float32 or float64 array
        echo: JSON-serializable header, read back by :func:`read_tensors`

    Returns:
        The written path
    """
    dtypes = {np.dtype(a.dtype).itemsize for a in arrays.values()}
    if len(dtypes) > 1 or not dtypes <= set(_VALUE_TYPES):
        raise ShapeInconsistencyError(f"checkpoint arrays must share float32 or float64, got itemsizes {dtypes}")
    value_code = dtypes.pop() if dtypes else 4
    value_type = _VALUE_TYPES[value_code]
    echo_bytes = json.dumps(dict(echo), sort_keys=True).encode("utf-8")

    header = np.zeros((), dtype=CHECKPOINT_HEADER)
    header["magic"], header["version"] = CHECKPOINT_MAGIC, CHECKPOINT_VERSION
    header["value_code"], header["echo_length"] = value_code, len(echo_bytes)

    buffer = io.BytesIO()
    buffer.write(header.tobytes())
    buffer.write(echo_bytes)
    buffer.write(np.uint32(len(arrays)).astype("<u4").tobytes())
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        buffer.write(np.array([len(encoded)], dtype="<u4").tobytes())
        buffer.write(encoded)
        buffer.write(np.array([array.ndim] + list(array.shape), dtype="<u4").tobytes())
        buffer.write(np.ascontiguousarray(array, dtype=value_type).tobytes())

    path = Path(path)
    ensure_dir(path.parent)
    path.write_bytes(buffer.getvalue())
    return path


class _Reader:
    def __init__(self, raw: bytes, path: PathLike):
        self.raw, self.path, self.offset = raw, path, 0

    def take(self, dtype: np.dtype, count: int = 1) -> np.ndarray:
        dtype = np.dtype(dtype)
        if count == 0:
            return np.empty(0, dtype=dtype)
        size = dtype.itemsize * count
        if self.offset + size > len(self.raw):
            raise TruncatedFileError(f"{self.path}: file ends at byte {len(self.raw)}, record needs {self.offset + size}")
        out = np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out

    def take_bytes(self, size: int) -> bytes:
        return self.take(np.uint8, size).tobytes()


def read_tensors(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Read a CSIW file.

    Returns:
        ``(echo, arrays)`` with arrays in their stored precision
    """
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {raw[:4]!r}")
    reader = _Reader(raw, path)
    header = reader.take(CHECKPOINT_HEADER)[0]
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: format version {int(header['version'])}, expected {CHECKPOINT_VERSION}")
    value_type = _VALUE_TYPES.get(int(header["value_code"]))
    if value_type is None:
        raise StorageError(f"{path}: unknown value code {int(header['value_code'])}")
    echo = json.loads(reader.take_bytes(int(header["echo_length"])).decode("utf-8"))
    count = int(reader.take("<u4")[0])
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take_bytes(int(reader.take("<u4")[0])).decode("utf-8")
        rank = int(reader.take("<u4")[0])
        shape = tuple(int(s) for s in reader.take("<u4", rank))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = reader.take(value_type, size).reshape(shape).astype(value_type.newbyteorder("="))
    if reader.offset != len(raw):
        raise ShapeInconsistencyError(f"{path}: {len(raw) - reader.offset} trailing bytes after {count} records")
    return echo, arrays


def save_checkpoint(
    path: PathLike,
    config: ModelConfig,
    params: ParameterSet,
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Persist a parameter set with its model configuration echoed in the header.

    Args:
        path: Destination ``.csiw`` file
        config: Model configuration the parameters belong to
        params: Parameters and batch-norm statistics
        extra: Additional header entries, e.g. the epoch

    Returns:
        The written path
    """
    echo = {"model": config.model_dump(), **(extra or {})}
    return write_tensors(path, params.state_arrays(), echo)


def load_checkpoint(path: PathLike) -> Tuple[ModelConfig, ParameterSet, Dict[str, Any]]:
    """
    Rebuild the model configuration and parameter set saved by :func:`save_checkpoint`.

    Returns:
        ``(config, params, echo)``; ``echo`` keeps the extra header entries
    """
    echo, arrays = read_tensors(path)
    if "model" not in echo:
        raise StorageError(f"{path}: checkpoint has no model configuration echo")
    config = ModelConfig(**echo["model"])
    _, params = build_model(config)
    own = params.state_arrays()
    for name, array in arrays.items():
        if name not in own or own[name].shape != array.shape:
            raise ShapeInconsistencyError(
                f"{path}: record {name} {array.shape} does not fit a {config.variant} model"
            )
    params.load_arrays(arrays)
    return config, params, echo


# ---------------------------------------------------------------------------
# CSV and text artifacts
# ---------------------------------------------------------------------------


def append_rows(path: PathLike, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    """
    Append rows to a CSV whose header must equal ``columns``.

    Args:
        path: CSV file, created with a header when missing
        rows: Row dicts; missing columns are left empty
        columns: Expected header

    Returns:
        The path appended to
    """
    path = Path(path)
    ensure_dir(path.parent)
    if path.exists() and path.stat().st_size:
        existing = list(pd.read_csv(path, nrows=0).columns)
        if existing != list(columns):
            raise StorageError(f"{path}: columns {existing} differ from {list(columns)}")
        header = False
    else:
        header = True
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, mode="a", header=header, index=False)
    return path


def write_rows(path: PathLike, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    """Replace ``path`` with ``rows``."""
    path = Path(path)
    ensure_dir(path.parent)
    pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False)
    return path


def read_rows(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"{path}: no such results file")
    return pd.read_csv(path)


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """Write an 8-bit binary portable graymap (P5)."""
    if image.ndim != 2:
        raise ShapeInconsistencyError(f"graymap must be 2-D, got {image.shape}")
    height, width = image.shape
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise MagicMismatchError(f"{path}: not a binary graymap")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise StorageError(f"{path}: unsupported max value {maxval}")
    pixels = raw[len(raw) - width * height :]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
