"""Outcome classification, campaign rates and the derived analyses."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .taxonomy import CLASSES, OutcomeClass, Subregime


class ClassificationError(ValueError):
    pass


class SubregimeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ClassificationThresholds:
    theta_minor: float = 0.01
    theta_major: float = 0.50

    def __post_init__(self):
        if not 0.0 < self.theta_minor < self.theta_major < 1.0:
            raise ValueError("need 0 < theta_minor < theta_major < 1")


DEFAULT_THRESHOLDS = ClassificationThresholds()


def classify_trial(record, baseline_top1: float,
                   thresholds: ClassificationThresholds = DEFAULT_THRESHOLDS) -> OutcomeClass:
    if not 0.0 < baseline_top1 <= 1.0:
        raise ValueError("baseline_top1 must lie in (0, 1]")
    if record.device_failed:
        return OutcomeClass.C3
    if record.top1 is None:
        raise ClassificationError(f"trial {record.trial_id}: completed trial without top1")
    delta = baseline_top1 - record.top1
    if abs(delta) <= thresholds.theta_minor:
        return OutcomeClass.C0
    if delta > thresholds.theta_major:
        if record.followup_top1 is None:
            raise ClassificationError(
                f"trial {record.trial_id}: major drop without a persistence probe")
        if baseline_top1 - record.followup_top1 > thresholds.theta_major:
            return OutcomeClass.C2
    return OutcomeClass.C1


def classify_records(records: Iterable, baseline: float | Mapping,
                     thresholds: ClassificationThresholds = DEFAULT_THRESHOLDS) -> list:
    """Set ``outcome_class`` on each record.

    ``baseline`` is either one accuracy or a mapping ``(model, n_images) -> top1``.
    """
    out = []
    for r in records:
        b = baseline[(r.model, r.n_images)] if isinstance(baseline, Mapping) else baseline
        r.outcome_class = classify_trial(r, b, thresholds)
        out.append(r)
    return out


@dataclass(frozen=True)
class RateSummary:
    n_c0: int
    n_c1: int
    n_c2: int
    n_c3: int

    def __post_init__(self):
        if min(self.counts) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.n_c0, self.n_c1, self.n_c2, self.n_c3)

    @property
    def n_trial(self) -> int:
        return sum(self.counts)

    @property
    def n_completed(self) -> int:
        return self.n_c0 + self.n_c1 + self.n_c2

    @property
    def r_mis(self) -> Fraction | None:
        if self.n_completed == 0:
            return None
        return Fraction(self.n_c1 + self.n_c2, self.n_completed)

    @property
    def r_fail(self) -> Fraction:
        return Fraction(self.n_c3, self.n_trial) if self.n_trial else Fraction(0)

    @property
    def r_persist(self) -> Fraction:
        return Fraction(self.n_c2, self.n_trial) if self.n_trial else Fraction(0)


def count_classes(records: Iterable) -> tuple[int, int, int, int]:
    tally = Counter()
    for r in records:
        if r.outcome_class is None:
            raise ClassificationError(f"trial {r.trial_id} is not classified")
        tally[r.outcome_class] += 1
    return tuple(tally[c] for c in CLASSES)


def compute_rates(records: Iterable) -> RateSummary:
    return RateSummary(*count_classes(records))


@dataclass(frozen=True)
class HistogramReport:
    edges: np.ndarray
    counts: np.ndarray
    n_completed: int
    intermediate: int
    bimodal: bool

    @property
    def intermediate_fraction(self) -> float:
        return self.intermediate / self.n_completed if self.n_completed else 0.0


def accuracy_histogram(records: Iterable, baseline_top1: float, bins: int = 50,
                       thresholds: ClassificationThresholds = DEFAULT_THRESHOLDS) -> HistogramReport:
    top1 = np.array([r.top1 for r in records if not r.device_failed and r.top1 is not None],
                    dtype=float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(top1, bins=edges)
    lo, hi = baseline_top1 - thresholds.theta_major, baseline_top1 - thresholds.theta_minor
    inter = int(np.count_nonzero((top1 > lo) & (top1 < hi)))
    low_mode = np.count_nonzero(top1 <= lo) > 0
    high_mode = np.count_nonzero(top1 >= hi) > 0
    bimodal = bool(top1.size and low_mode and high_mode and inter < 0.05 * top1.size)
    return HistogramReport(edges, counts, int(top1.size), inter, bimodal)


def detect_subregime(trace, ceiling: float = 1023.5, eps: float = 0.5) -> Subregime:
    """Classify a C2 episode from its post-pulse logits (one row per image)."""
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        raise ValueError("empty logit trace")
    if arr.ndim == 1:
        arr = arr[None, :]
    saturated = bool(np.any(np.abs(arr) >= ceiling - eps))
    _, freq = np.unique(arr.argmax(axis=1), return_counts=True)
    if saturated and freq.size == 1:
        return Subregime.SATURATED
    # partial collapse piles argmaxes onto a head class; clean outputs rarely repeat
    if not saturated and freq.max() < max(3, 0.04 * arr.shape[0]):
        warnings.warn("trace shows neither saturation nor argmax collapse; "
                      "it may not come from a persistent-corruption episode", SubregimeWarning)
    return Subregime.PARTIAL_COLLAPSE


@dataclass
class SpatialMap:
    cell_mm: float
    origin: tuple[float, float]
    cells: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    def counts(self, cell: tuple[int, int]) -> list[int]:
        return self.cells.get(cell, [0, 0, 0, 0])

    def dominant(self, cell: tuple[int, int], fault_only: bool = True) -> OutcomeClass | None:
        c = self.counts(cell)
        idx = range(1, 4) if fault_only else range(4)
        best = max(idx, key=lambda i: (c[i], -i))
        return CLASSES[best] if c[best] > 0 else None

    def center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (self.origin[0] + (cell[0] + 0.5) * self.cell_mm,
                self.origin[1] + (cell[1] + 0.5) * self.cell_mm)

    def layers(self):
        """(class, x, y) points in drawing order: C0 first, C2 on top."""
        order = (OutcomeClass.C0, OutcomeClass.C1, OutcomeClass.C3, OutcomeClass.C2)
        return [(cls, cell) for cls in order for cell in sorted(self.cells)
                if self.cells[cell][cls.index] > 0]


def spatial_map(records: Iterable, cell_mm: float = 1.0,
                origin: tuple[float, float] = (113.0, 148.0)) -> SpatialMap:
    if cell_mm <= 0:
        raise ValueError("cell_mm must be positive")
    m = SpatialMap(cell_mm, origin)
    for r in records:
        ix = math.floor((r.pulse.x_mm - origin[0]) / cell_mm)
        iy = math.floor((r.pulse.y_mm - origin[1]) / cell_mm)
        m.cells.setdefault((ix, iy), [0, 0, 0, 0])[r.outcome_class.index] += 1
    return m


@dataclass(frozen=True)
class RepeatabilityReport:
    counts_a: tuple[int, ...]
    counts_b: tuple[int, ...]

    @property
    def deltas(self) -> tuple[int, ...]:
        return tuple(abs(a - b) for a, b in zip(self.counts_a, self.counts_b))

    @property
    def max_delta(self) -> int:
        return max(self.deltas)


def compare_counts(counts_a: Sequence[int], counts_b: Sequence[int]) -> RepeatabilityReport:
    if len(counts_a) != 4 or len(counts_b) != 4:
        raise ValueError("expected four class counts per run")
    if sum(counts_a) != sum(counts_b):
        raise ValueError("runs must have equal trial counts")
    return RepeatabilityReport(tuple(counts_a), tuple(counts_b))


def repeatability_compare(run_a: Sequence, run_b: Sequence) -> RepeatabilityReport:
    return compare_counts(count_classes(run_a), count_classes(run_b))
