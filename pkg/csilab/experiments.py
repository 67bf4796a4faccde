"""Experiment orchestration behind the CLI commands.

gen -> train -> eval form one cell; sweep fans cells out over the
(variant, gamma, alpha, seed) grid and report aggregates the results into
the comparison tables.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .channel import denormalize, generate_batch, normalize
from .config import (
    BEST_CHECKPOINT_FILE,
    CHECKPOINT_FILE,
    DATA_SUBDIR,
    HISTORY_FILE,
    OPTIMIZER_FILE,
    RESULTS_FILE,
    SPLITS,
)
from .errors import ConfigError, CsiLabError, ShapeError, TrainingDivergedError
from .metrics import MetricsReport, evaluate, improvement_db, improvement_rho, reconstruct
from .models import DISPLAY_NAMES, VARIANTS, CsiFeedbackModel, ModelConfig, build_model, recovery_param_count
from .settings import ExperimentConfig, channel_params, model_config, train_config, with_values, write_echo
from .storage import (
    Dataset,
    append_rows,
    dataset_read,
    dataset_write,
    ensure_dir,
    load_checkpoint,
    read_rows,
    save_checkpoint,
    write_pgm,
    write_rows,
)
from .training import HISTORY_COLUMNS, ensure_finite, load_optimizer, save_optimizer, train

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("variant", "gamma", "alpha", "seed", "epochs", "nmse_linear", "nmse_db", "rho", "samples")
SWEEP_COLUMNS = ("cell", "status", "error") + RESULT_COLUMNS
SWEEP_FILE = "sweep.csv"
SUMMARY_FILE = "summary.csv"
IMPROVEMENTS_FILE = "improvements.csv"
ALPHA_SERIES_FILE = "alpha_series.csv"
P3D_FILE = "p3d_ordering.csv"
PARAM_COUNTS_FILE = "param_counts.csv"
IMAGES_DIR = "images"
IMAGES_SIDECAR = "images.json"


def data_dir(settings: ExperimentConfig) -> Path:
    return Path(settings.out) / DATA_SUBDIR


def split_path(directory: Path, split: str) -> Path:
    return Path(directory) / f"{split}.csid"


def _result_row(report: MetricsReport) -> Dict[str, Any]:
    return {column: getattr(report, column) for column in RESULT_COLUMNS}


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def run_gen(settings: ExperimentConfig, directory: Optional[Path] = None) -> Dict[str, Path]:
    """
    Generate train/val/test splits; the normalization is fitted on train only.

    Args:
        settings: Experiment settings
        directory: Output directory, ``<out>/data`` by default

    Returns:
        Split name to written ``.csid`` path
    """
    directory = Path(directory or data_dir(settings))
    sizes = settings.split_sizes()
    if sizes[0] == 0:
        raise ConfigError("train_size must be positive to fit the normalization")

    record = None
    paths: Dict[str, Path] = {}
    for split, count in zip(SPLITS, sizes):
        params = channel_params(settings, split)
        matrices = generate_batch(params, count)
        values, split_record = normalize(matrices, record)
        if record is None:
            record = split_record.model_copy(update={"clipped": 0})
        paths[split] = dataset_write(
            split_path(directory, split), values.astype(np.float32), split_record, params, split, sizes
        )
    write_echo(directory, settings)
    logger.info("generated %s samples (train/val/test) in %s", "/".join(map(str, sizes)), directory)
    return paths


def load_splits(directory: Path) -> Dict[str, Dataset]:
    splits = {split: dataset_read(split_path(directory, split)) for split in SPLITS}
    scales = {split: (d.record.scale, d.record.offset) for split, d in splits.items()}
    if len(set(scales.values())) != 1:
        raise ConfigError(f"splits in {directory} carry different normalization records: {scales}")
    return splits


def _check_dims(config: ModelConfig, dataset: Dataset, what: str) -> None:
    expected = (config.steps, config.n_t, config.n_c)
    found = (dataset.params.steps, dataset.params.n_t, dataset.params.n_c)
    if expected != found:
        raise ConfigError(f"{what}: dataset has T x N_t x N_c = {found}, configuration expects {expected}")


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def run_train(
    settings: ExperimentConfig,
    directory: Optional[Path] = None,
    resume: bool = False,
) -> MetricsReport:
    """Train one cell and evaluate its best checkpoint on the test split.

    Writes ``model.csiw`` (last epoch), ``best.csiw`` (best validation NMSE),
    ``optimizer.csiw``, ``history.csv``, ``config.echo`` and appends the test
    metrics to ``results.csv``.

    Args:
        settings: Experiment settings; ``out`` receives the artifacts
        directory: Directory holding the three splits, ``<out>/data`` by default
        resume: Continue from ``model.csiw``, ``optimizer.csiw`` and ``best.csiw``
            in ``out`` up to ``settings.epochs``

    Returns:
        Test metrics of the best checkpoint
    """
    out = ensure_dir(settings.out)
    splits = load_splits(Path(directory or data_dir(settings)))
    config = model_config(settings)
    options = train_config(settings)
    for split, dataset in splits.items():
        _check_dims(config, dataset, split)
        ensure_finite(dataset.samples, f"{split} samples")
    if splits["train"].params.alpha != settings.alpha:
        logger.warning("dataset alpha %g differs from configured alpha %g", splits["train"].params.alpha, settings.alpha)
    write_echo(out, settings)

    model, params = build_model(config)
    start_epoch, optimizer, history, best_params = 1, None, [], None
    if resume:
        saved, params, _ = load_checkpoint(out / CHECKPOINT_FILE)
        if saved != config:
            raise ConfigError(f"checkpoint in {out} was trained with a different model configuration")
        if (out / BEST_CHECKPOINT_FILE).exists():
            best_config, best_params, _ = load_checkpoint(out / BEST_CHECKPOINT_FILE)
            if best_config != config:
                raise ConfigError(f"best checkpoint in {out} was trained with a different model configuration")
        else:
            logger.warning("no %s in %s; the best checkpoint restarts from the resumed weights", BEST_CHECKPOINT_FILE, out)
        optimizer, last_epoch = load_optimizer(out / OPTIMIZER_FILE)
        history = [row for row in _read_history(out) if row["epoch"] <= last_epoch]
        start_epoch = last_epoch + 1
        logger.info("resuming %s from epoch %d", model, start_epoch)

    def save(epoch: int, current, state, rows) -> None:
        save_checkpoint(out / CHECKPOINT_FILE, config, current, {"epoch": epoch})
        save_optimizer(out / OPTIMIZER_FILE, state, epoch)
        write_rows(out / HISTORY_FILE, rows, HISTORY_COLUMNS)

    def on_epoch(epoch: int, current, state, rows) -> None:
        if options.checkpoint_every and epoch % options.checkpoint_every == 0:
            save(epoch, current, state, rows)

    record = splits["train"].record
    try:
        result = train(
            model,
            params,
            splits["train"].samples,
            splits["val"].samples,
            record,
            options,
            val_record=splits["val"].record,
            start_epoch=start_epoch,
            optimizer=optimizer,
            history=history,
            on_epoch=on_epoch,
            best_params=best_params,
        )
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            save_checkpoint(out / CHECKPOINT_FILE, config, exc.last_good, {"epoch": len(exc.history)})
            write_rows(out / HISTORY_FILE, exc.history, HISTORY_COLUMNS)
        raise

    epochs = max(options.epochs, start_epoch - 1)
    save(epochs, result.params, result.optimizer, result.history)
    save_checkpoint(out / BEST_CHECKPOINT_FILE, config, result.best_params, {"epoch": epochs})

    test = splits["test"]
    report = evaluate(
        model, result.best_params, test.samples, record, test.params, epochs=epochs, batch_size=options.eval_batch_size
    )
    append_rows(out / RESULTS_FILE, [_result_row(report)], RESULT_COLUMNS)
    return report


def _read_history(out: Path) -> List[Dict[str, Any]]:
    path = out / HISTORY_FILE
    if not path.exists():
        return []
    frame = read_rows(path)
    return [
        {"epoch": int(r.epoch), "lr": float(r.lr), "train_loss": float(r.train_loss), "val_nmse_db": float(r.val_nmse_db)}
        for r in frame.itertuples(index=False)
    ]


def run_eval(
    settings: ExperimentConfig,
    checkpoint: Optional[Path] = None,
    test_path: Optional[Path] = None,
    bypass: bool = False,
) -> MetricsReport:
    """
    Evaluate a checkpoint (or the identity with ``bypass``) and append a results row.

    Args:
        settings: Experiment settings
        checkpoint: ``.csiw`` file, ``<out>/best.csiw`` by default
        test_path: ``.csid`` test split, the generated one by default
        bypass: Score H^ = H instead of a network

    Returns:
        The metrics written to ``results.csv``
    """
    out = ensure_dir(settings.out)
    test = dataset_read(test_path or split_path(data_dir(settings), "test"))
    if bypass:
        report = evaluate(None, None, test.samples, test.record, test.params, bypass=True, variant="bypass", gamma="1/1")
    else:
        config, params, echo = load_checkpoint(checkpoint or out / BEST_CHECKPOINT_FILE)
        found = (test.params.steps, test.params.n_t, test.params.n_c)
        if found != (config.steps, config.n_t, config.n_c):
            raise ShapeError(
                f"test set T x N_t x N_c = {found} does not fit checkpoint {(config.steps, config.n_t, config.n_c)}"
            )
        model, _ = build_model(config)
        report = evaluate(
            model, params, test.samples, test.record, test.params,
            epochs=int(echo.get("epoch", 0)), batch_size=settings.eval_batch_size,
        )
    append_rows(out / RESULTS_FILE, [_result_row(report)], RESULT_COLUMNS)
    return report


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cell_name(variant: str, gamma: str, alpha: float, seed: int) -> str:
    return f"{variant}_g{gamma.replace('/', '-')}_a{alpha:g}_s{seed}"


def sweep_cells(settings: ExperimentConfig) -> List[Tuple[str, str, float, int]]:
    """Grid of (variant, gamma, alpha, seed). Baselines must be listed as variants to be compared against."""
    if not (settings.sweep_variants and settings.sweep_gammas and settings.sweep_alphas and settings.sweep_seeds):
        raise ConfigError("sweep axes must be non-empty")
    variants = list(dict.fromkeys(settings.sweep_variants))
    return list(itertools.product(variants, settings.sweep_gammas, settings.sweep_alphas, settings.sweep_seeds))


def _run_cell(settings: ExperimentConfig, cell: Tuple[str, str, float, int], data: Path) -> Dict[str, Any]:
    variant, gamma, alpha, seed = cell
    name = cell_name(*cell)
    cell_settings = with_values(
        settings, variant=variant, gamma=gamma, alpha=alpha, seed=seed, out=str(Path(settings.out) / "cells" / name)
    )
    try:
        report = run_train(cell_settings, data)
    except Exception as exc:
        logger.warning("sweep cell %s failed: %s", name, exc, exc_info=not isinstance(exc, CsiLabError))
        row = {column: None for column in RESULT_COLUMNS}
        row.update(variant=variant, gamma=gamma, alpha=alpha, seed=seed)
        return {"cell": name, "status": "failed", "error": str(exc), **row}
    return {"cell": name, "status": "ok", "error": "", **_result_row(report)}


async def run_sweep(settings: ExperimentConfig) -> Tuple[List[Dict[str, Any]], int]:
    """Train and evaluate every grid cell, at most ``settings.parallel`` at a time.

    Datasets are generated once per (alpha, seed). Returns the sweep rows and
    the number of failed cells.
    """
    cells = sweep_cells(settings)
    out = ensure_dir(settings.out)
    write_echo(out, settings)

    data_dirs: Dict[Tuple[float, int], Path] = {}
    for alpha, seed in sorted({(cell[2], cell[3]) for cell in cells}):
        directory = out / DATA_SUBDIR / f"a{alpha:g}_s{seed}"
        if not split_path(directory, "train").exists():
            run_gen(with_values(settings, alpha=alpha, seed=seed), directory)
        data_dirs[(alpha, seed)] = directory

    semaphore = asyncio.Semaphore(settings.parallel)

    async def bounded(cell):
        async with semaphore:
            return await asyncio.to_thread(_run_cell, settings, cell, data_dirs[(cell[2], cell[3])])

    rows = list(await asyncio.gather(*(bounded(cell) for cell in cells)))
    write_rows(out / SWEEP_FILE, rows, SWEEP_COLUMNS)
    failures = sum(row["status"] != "ok" for row in rows)
    write_report(settings)
    if failures:
        logger.warning("sweep finished with %d of %d cells failed", failures, len(rows))
    return rows, failures


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def summary_table(results: pd.DataFrame) -> pd.DataFrame:
    """Median over seeds of NMSE (dB) and rho per (alpha, variant, gamma)."""
    ok = results[results["status"] == "ok"] if "status" in results else results
    return (
        ok.groupby(["alpha", "variant", "gamma"], as_index=False)
        .agg(nmse_db=("nmse_db", "median"), rho=("rho", "median"), seeds=("seed", "nunique"))
        .sort_values(["alpha", "variant", "gamma"], key=_display_order)
        .reset_index(drop=True)
    )


def _display_order(column: pd.Series) -> pd.Series:
    if column.name == "variant":
        return column.map({v: i for i, v in enumerate(VARIANTS)})
    if column.name == "gamma":
        return column.map(lambda g: -_ratio(g))
    return column


def _ratio(gamma: str) -> float:
    numerator, _, denominator = str(gamma).partition("/")
    return float(numerator) / float(denominator or 1)


def improvement_table(table: pd.DataFrame, baselines: Sequence[str]) -> pd.DataFrame:
    """Percentage improvement of every variant over each baseline in the same (alpha, gamma)."""
    rows = []
    indexed = table.set_index(["alpha", "variant", "gamma"])
    for row in table.itertuples(index=False):
        for baseline in baselines:
            key = (row.alpha, baseline, row.gamma)
            if key not in indexed.index:
                continue
            base = indexed.loc[key]
            rows.append({
                "alpha": row.alpha,
                "gamma": row.gamma,
                "variant": row.variant,
                "baseline": baseline,
                "nmse_improvement_pct": improvement_db(row.nmse_db, base["nmse_db"]),
                "rho_improvement_pct": improvement_rho(row.rho, base["rho"]),
            })
    return pd.DataFrame(rows, columns=["alpha", "gamma", "variant", "baseline", "nmse_improvement_pct", "rho_improvement_pct"])


def alpha_series(table: pd.DataFrame) -> pd.DataFrame:
    """NMSE against alpha per (variant, gamma), the evolution-factor plot series."""
    return table[["variant", "gamma", "alpha", "nmse_db"]].sort_values(["variant", "gamma", "alpha"]).reset_index(drop=True)


def p3d_ordering(table: pd.DataFrame) -> pd.DataFrame:
    """NMSE of the three P3D variants side by side; observational only."""
    p3d = table[table["variant"].isin(["convlstm_a", "convlstm_b", "convlstm_c"])]
    if p3d.empty:
        return pd.DataFrame(columns=["alpha", "gamma", "convlstm_a", "convlstm_b", "convlstm_c", "best"])
    wide = p3d.pivot_table(index=["alpha", "gamma"], columns="variant", values="nmse_db").reset_index()
    wide.columns.name = None
    present = [v for v in ("convlstm_a", "convlstm_b", "convlstm_c") if v in wide]
    wide["best"] = wide[present].idxmin(axis=1)
    return wide


def param_counts(settings: ExperimentConfig) -> pd.DataFrame:
    """Learnable parameters per variant and module at the configured sizes."""
    rows = []
    for variant in VARIANTS:
        config = model_config(with_values(settings, variant=variant))
        modules = CsiFeedbackModel(config).module_param_counts()
        encoder = modules["extract"] + modules["compress"]
        decoder = modules["decompress"] + modules["recover"]
        rows.append({
            "variant": variant,
            "name": DISPLAY_NAMES[variant],
            "gamma": config.gamma,
            "codeword_length": config.codeword_length,
            "total": encoder + decoder,
            "encoder": encoder,
            "decoder": decoder,
            **modules,
            "recover_ds": recovery_param_count(config, separable=True),
            "recover_standard": recovery_param_count(config, separable=False),
        })
    return pd.DataFrame(rows)


def write_report(settings: ExperimentConfig) -> Dict[str, Path]:
    """
    Write param_counts.csv and, when a sweep table exists, the aggregate tables.

    Args:
        settings: Experiment settings; ``out`` holds ``sweep.csv``

    Returns:
        Table name to written path
    """
    out = ensure_dir(settings.out)
    written = {"param_counts": out / PARAM_COUNTS_FILE}
    param_counts(settings).to_csv(written["param_counts"], index=False)

    sweep = out / SWEEP_FILE
    if not sweep.exists():
        logger.info("no %s in %s, wrote parameter counts only", SWEEP_FILE, out)
        return written
    results = read_rows(sweep)
    results["gamma"] = results["gamma"].astype(str)
    table = summary_table(results)
    outputs = {
        "summary": (SUMMARY_FILE, table),
        "improvements": (IMPROVEMENTS_FILE, improvement_table(table, settings.baselines)),
        "alpha_series": (ALPHA_SERIES_FILE, alpha_series(table)),
        "p3d_ordering": (P3D_FILE, p3d_ordering(table)),
    }
    for key, (name, frame) in outputs.items():
        frame.to_csv(out / name, index=False)
        written[key] = out / name
    return written


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def magnitude_pair(original: np.ndarray, reconstruction: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """8-bit |H| and |H^| images on one shared linear scale."""
    a, b = np.abs(original), np.abs(reconstruction)
    peak = float(max(a.max(initial=0.0), b.max(initial=0.0)))
    if peak == 0.0 or not math.isfinite(peak):
        return np.zeros(a.shape, np.uint8), np.zeros(b.shape, np.uint8), 0.0
    gray = lambda m: np.clip(np.rint(m / peak * 255.0), 0, 255).astype(np.uint8)  # noqa: E731
    return gray(a), gray(b), peak


def run_images(
    settings: ExperimentConfig,
    checkpoint: Optional[Path] = None,
    test_path: Optional[Path] = None,
    count: Optional[int] = None,
    bypass: bool = False,
) -> Path:
    """
    Write |H_t| / |H^_t| graymaps for the first ``count`` test samples plus an ``images.json`` sidecar.

    Args:
        settings: Experiment settings
        checkpoint: ``.csiw`` file, ``<out>/best.csiw`` by default
        test_path: ``.csid`` test split, the generated one by default
        count: Number of samples, ``settings.image_count`` by default
        bypass: Use the input as its own reconstruction

    Returns:
        The images directory
    """
    out = ensure_dir(settings.out)
    test = dataset_read(test_path or split_path(data_dir(settings), "test"))
    count = settings.image_count if count is None else count
    if not 0 <= count <= len(test):
        raise ConfigError(f"cannot render {count} images from {len(test)} test samples")
    samples = test.samples[:count]
    if bypass:
        predicted = samples
    else:
        config, params, _ = load_checkpoint(checkpoint or out / BEST_CHECKPOINT_FILE)
        model, _ = build_model(config)
        predicted = reconstruct(model, params, samples, settings.eval_batch_size)
    originals = denormalize(samples, test.record)
    reconstructions = denormalize(predicted, test.record)

    directory = ensure_dir(out / IMAGES_DIR)
    pairs = []
    for i, t in itertools.product(range(count), range(test.params.steps)):
        first, second, peak = magnitude_pair(originals[i, t], reconstructions[i, t])
        stem = f"sample{i:03d}_t{t}"
        write_pgm(directory / f"{stem}_orig.pgm", first)
        write_pgm(directory / f"{stem}_recon.pgm", second)
        pairs.append({
            "sample": i, "step": t, "scale": peak,
            "original": f"{stem}_orig.pgm", "reconstruction": f"{stem}_recon.pgm",
        })
    sidecar = directory / IMAGES_SIDECAR
    with open(sidecar, "w") as f:
        json.dump({"mapping": "linear", "quantity": "magnitude", "levels": 255, "pairs": pairs}, f, indent=2)
    logger.info("wrote %d image pairs to %s", len(pairs), directory)
    return directory
