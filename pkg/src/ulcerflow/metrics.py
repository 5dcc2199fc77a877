"""Overlap metrics and aggregate statistics used by the evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import EmptyInput, ShapeError
from .imaging import BinaryMask

if TYPE_CHECKING:
    from .pipeline import PipelineRecord


@dataclass(frozen=True)
class OverlapScores:
    """IoU and Dice for one mask pair, plus the raw pixel counts behind them."""

    iou: float
    dice: float
    intersection_px: int
    union_px: int
    a_px: int
    b_px: int
    both_empty: bool = False


def overlap_scores(a: BinaryMask, b: BinaryMask) -> OverlapScores:
    """Exact-count IoU/Dice. Two empty masks score 1.0 with ``both_empty`` set."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    am = a.data.astype(bool)
    bm = b.data.astype(bool)
    inter = int(np.count_nonzero(am & bm))
    na = int(np.count_nonzero(am))
    nb = int(np.count_nonzero(bm))
    union = na + nb - inter
    if union == 0:
        return OverlapScores(1.0, 1.0, 0, 0, 0, 0, both_empty=True)
    return OverlapScores(
        iou=inter / union,
        dice=2 * inter / (na + nb),
        intersection_px=inter,
        union_px=union,
        a_px=na,
        b_px=nb,
    )


def iou(a: BinaryMask, b: BinaryMask) -> float:
    return overlap_scores(a, b).iou


def dice(a: BinaryMask, b: BinaryMask) -> float:
    return overlap_scores(a, b).dice


@dataclass(frozen=True)
class SummaryStat:
    """Mean and standard deviation over n samples."""

    mean: float
    sd: float
    n: int

    @classmethod
    def from_values(cls, values: Iterable[float], population: bool = False) -> "SummaryStat":
        return mean_sd(values, population=population)


def mean_sd(values: Iterable[float], population: bool = False) -> SummaryStat:
    """Mean and standard deviation (sample SD by default, ddof=1).

    A single value has SD 0.0; an empty input raises EmptyInput.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("mean_sd needs at least one value")
    if arr.size == 1:
        return SummaryStat(mean=float(arr[0]), sd=0.0, n=1)
    sd = float(arr.std(ddof=0 if population else 1))
    return SummaryStat(mean=float(arr.mean()), sd=sd, n=int(arr.size))


@dataclass(frozen=True)
class SuccessRate:
    """Successes out of attempts, formatted the way the run reports print it."""

    successes: int
    attempts: int

    def __post_init__(self):
        if self.attempts < 1:
            raise EmptyInput("success rate over zero records is undefined")
        if not 0 <= self.successes <= self.attempts:
            raise ValueError(f"bad counts {self.successes}/{self.attempts}")

    @property
    def failures(self) -> int:
        return self.attempts - self.successes

    @property
    def rate(self) -> float:
        return self.successes / self.attempts

    @property
    def percent(self) -> float:
        return round(100.0 * self.rate, 1)

    def formatted(self) -> str:
        return f"{self.successes} / {self.attempts} ({self.percent:.1f}%)"


def record_is_success(record) -> bool:
    """One place encoding what counts as an end-to-end success for rate reporting.

    Accepts a PipelineRecord or a plain dict loaded back from records.jsonl.
    """
    status = record["status"] if isinstance(record, dict) else record.status
    return status == "success"


def success_rate_from_records(records: Iterable["PipelineRecord"]) -> SuccessRate:
    recs = list(records)
    if not recs:
        raise EmptyInput("no records to rate")
    return SuccessRate(sum(record_is_success(r) for r in recs), len(recs))


def percent_agreement(a: Sequence, b: Sequence) -> float:
    """Fraction of positions where the two label lists match."""
    if len(a) != len(b):
        raise ShapeError(f"label lists differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise EmptyInput("no labels to compare")
    return sum(x == y for x, y in zip(a, b)) / len(a)
