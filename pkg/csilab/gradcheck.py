"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import logging
from typing import Callable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)


class GradCheckEntry(NamedTuple):
    param: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    status: str  # "ok", "fail", "nonsmooth" or "nonfinite"


class GradCheckReport(NamedTuple):
    max_rel_error: float
    tolerance: float
    entries: List[GradCheckEntry]

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.status in ("fail", "nonfinite")]

    @property
    def nonsmooth(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.status == "nonsmooth"]

    @property
    def passed(self) -> bool:
        return not self.failures


def _named(params: Union[Mapping[str, Tensor], Sequence[Tensor]]) -> List[Tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def _probe_indices(
    tensor: Tensor, max_entries: Optional[int], rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    flat = np.arange(tensor.size)
    if max_entries is not None and tensor.size > max_entries:
        flat = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
    return [tuple(int(i) for i in np.unravel_index(f, tensor.shape)) for f in flat]


def grad_check(
    fn: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` must rebuild the scalar loss from the current values of ``params``
    on every call. With ``max_entries`` only that many entries per tensor are
    probed, chosen deterministically from ``seed``. Gradients smaller than
    ``floor`` are compared in absolute rather than relative terms.

    An entry whose two one-sided differences disagree by more than the central
    estimate disagrees with the tape sits on a kink of the function (for
    example a leaky-ReLU input at zero); it is reported as ``nonsmooth`` and
    does not fail the check.
    """
    named = _named(params)
    with Tape():
        loss = fn()
        analytic = backward(loss, [p for _, p in named])
    base = loss.item()
    rng = np.random.default_rng(seed)

    entries: List[GradCheckEntry] = []
    for (name, tensor), grad in zip(named, analytic):
        for index in _probe_indices(tensor, max_entries, rng):
            original = tensor.data[index]
            tensor.data[index] = original + step
            plus = fn().item()
            tensor.data[index] = original - step
            minus = fn().item()
            tensor.data[index] = original

            a = float(grad[index])
            numeric = (plus - minus) / (2.0 * step)
            if not all(np.isfinite(v) for v in (a, numeric, base)):
                entries.append(GradCheckEntry(name, index, a, numeric, float("inf"), "nonfinite"))
                continue
            error = abs(a - numeric)
            rel = error / max(abs(a), abs(numeric), floor)
            status = "ok"
            if rel > tolerance:
                one_sided_gap = abs((plus - base) - (base - minus)) / step
                status = "nonsmooth" if one_sided_gap > error else "fail"
            entries.append(GradCheckEntry(name, index, a, numeric, rel, status))

    checked = [e.rel_error for e in entries if e.status in ("ok", "fail")]
    worst = max(checked) if checked else 0.0
    report = GradCheckReport(worst, tolerance, entries)
    if report.failures:
        logger.warning(
            "grad_check: %d of %d entries exceed tolerance %.1e (worst %.3e)",
            len(report.failures), len(entries), tolerance, worst,
        )
    return report
