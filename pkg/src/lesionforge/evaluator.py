"""Segmentation evaluation: per-image confusion metrics, mean +/- standard
error aggregation, clipped Gaussian kernel density estimates, and
regime-to-regime comparison tables.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, ValidationError
from .ingest import validate_mask

logger = logging.getLogger(__name__)

METRICS = ("dice", "sensitivity", "specificity", "accuracy")

# Degenerate-denominator conventions (logged whenever one fires):
# both masks empty -> perfect agreement; a rate with an empty reference class
# (no positives to find, or no negatives to keep) is defined as 1.
EMPTY_BOTH_DICE = 1.0
EMPTY_CLASS_RATE = 1.0
KDE_CLIP = (0.0, 1.0)  # all four metrics live on the unit interval

TABLE_DECIMALS = 4


class Regime(enum.Enum):
    """Training-set compositions compared in the augmentation experiment."""

    NO_AUG = "noaug"
    CLASSIC = "classic"
    SYNTH = "m2l"
    ALL = "all"

    @property
    def label(self) -> str:
        return {
            Regime.NO_AUG: "NoAug",
            Regime.CLASSIC: "ClassicAug",
            Regime.SYNTH: "SynthAug",
            Regime.ALL: "AllAug",
        }[self]

    @classmethod
    def from_string(cls, value: str) -> "Regime":
        for r in cls:
            if value in (r.value, r.label, r.name):
                return r
        raise ValidationError(f"unknown regime {value!r}; choose from {[r.value for r in cls]}")


@dataclass
class MetricRecord:
    """Confusion counts for one image plus the four derived metrics."""

    id: str
    tp: int
    fp: int
    tn: int
    fn: int
    dice: float
    sensitivity: float
    specificity: float
    accuracy: float

    @classmethod
    def from_counts(cls, id: str, tp: int, fp: int, tn: int, fn: int) -> "MetricRecord":
        if min(tp, fp, tn, fn) < 0:
            raise ValidationError(f"negative confusion count for {id!r}")
        denom_dice = 2 * tp + fp + fn
        if denom_dice == 0:
            logger.info("record %s: empty prediction and ground truth; dice := %s", id, EMPTY_BOTH_DICE)
            dice = EMPTY_BOTH_DICE
        else:
            dice = 2 * tp / denom_dice
        if tp + fn == 0:
            logger.info("record %s: no positive pixels in ground truth; sensitivity := %s", id, EMPTY_CLASS_RATE)
            sensitivity = EMPTY_CLASS_RATE
        else:
            sensitivity = tp / (tp + fn)
        if tn + fp == 0:
            logger.info("record %s: no negative pixels in ground truth; specificity := %s", id, EMPTY_CLASS_RATE)
            specificity = EMPTY_CLASS_RATE
        else:
            specificity = tn / (tn + fp)
        accuracy = (tp + tn) / (tp + fp + tn + fn)
        return cls(
            id=id, tp=tp, fp=fp, tn=tn, fn=fn,
            dice=dice, sensitivity=sensitivity, specificity=specificity, accuracy=accuracy,
        ).validate()

    def validate(self, total: int | None = None) -> "MetricRecord":
        if total is not None and self.tp + self.fp + self.tn + self.fn != total:
            raise ValidationError(
                f"record {self.id!r}: counts sum to {self.tp + self.fp + self.tn + self.fn}, expected {total}"
            )
        # metrics must be reproducible from the four counts to 1e-12
        denom = 2 * self.tp + self.fp + self.fn
        dice = EMPTY_BOTH_DICE if denom == 0 else 2 * self.tp / denom
        sens = EMPTY_CLASS_RATE if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)
        spec = EMPTY_CLASS_RATE if self.tn + self.fp == 0 else self.tn / (self.tn + self.fp)
        acc = (self.tp + self.tn) / (self.tp + self.fp + self.tn + self.fn)
        for name, expected in (("dice", dice), ("sensitivity", sens), ("specificity", spec), ("accuracy", acc)):
            if abs(getattr(self, name) - expected) > 1e-12:
                raise ValidationError(f"record {self.id!r}: stored {name} inconsistent with counts")
        return self

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def confusion_metrics(pred: np.ndarray, gt: np.ndarray, id: str = "") -> MetricRecord:
    """Pixel confusion counts and the challenge metrics for one prediction."""
    validate_mask(pred)
    validate_mask(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return MetricRecord.from_counts(id, tp, fp, tn, fn).validate(total=pred.size)


@dataclass
class RegimeReport:
    """Per-image records for one regime with mean and standard error per metric."""

    regime: Regime
    per_image: list[MetricRecord]
    n: int
    means: dict[str, float]
    standard_errors: dict[str, float]

    @classmethod
    def from_records(cls, records: list[MetricRecord], regime: Regime) -> "RegimeReport":
        if not records:
            raise ValidationError("cannot aggregate an empty record list")
        n = len(records)
        means, errs = {}, {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in records], dtype=np.float64)
            means[m] = float(vals.mean())
            if n == 1:
                logger.warning("regime %s: single record, standard error set to 0", regime.label)
                errs[m] = 0.0
            else:
                errs[m] = float(vals.std(ddof=1) / np.sqrt(n))
        return cls(regime=regime, per_image=list(records), n=n, means=means, standard_errors=errs)

    def cell(self, metric: str) -> str:
        return f"{self.means[metric]:.{TABLE_DECIMALS}f} ± {self.standard_errors[metric]:.{TABLE_DECIMALS}f}"


def aggregate_metrics(records: list[MetricRecord], regime: Regime) -> RegimeReport:
    """Mean and standard error (sample std over sqrt(n)) per metric."""
    return RegimeReport.from_records(records, regime)


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------

@dataclass
class DensityCurve:
    """Gaussian KDE on a fixed grid, renormalized over the clip range."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    clip_range: tuple[float, float]

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(sample std, IQR / 1.34) * n^(-1/5)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    sd = float(values.std(ddof=1))
    iqr = float(np.percentile(values, 75) - np.percentile(values, 25))
    return 0.9 * min(sd, iqr / 1.34) * n ** (-0.2)


def kde_estimate(
    values,
    clip: tuple[float, float],
    bandwidth: float | None = None,
    grid_points: int = 512,
    boundary: str = "truncate",
) -> DensityCurve:
    """Gaussian-kernel density of the values, clipped to [lo, hi].

    Mass falling outside the clip range is handled by truncation plus
    renormalization (the curve integrates to one over the clip range, by the
    trapezoid rule on its own grid). boundary="reflect" instead mirrors each
    kernel at both clip edges before renormalizing.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(clip[0]), float(clip[1])
    if len(values) < 2:
        raise EstimationError(f"need at least 2 values for a density estimate, got {len(values)}")
    if not lo < hi:
        raise EstimationError(f"clip range is empty: [{lo}, {hi}]")
    if values.min() < lo or values.max() > hi:
        raise ValidationError(f"values outside clip range [{lo}, {hi}]")
    if boundary not in ("truncate", "reflect"):
        raise ValidationError(f"unknown boundary mode {boundary!r}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(values)
        if bandwidth <= 0:
            raise EstimationError(
                "automatic bandwidth is zero (no spread in the values); pass an explicit bandwidth"
            )
    if bandwidth <= 0:
        raise ValidationError(f"bandwidth must be positive, got {bandwidth}")

    grid = np.linspace(lo, hi, grid_points)
    centers = [values]
    if boundary == "reflect":
        centers += [2 * lo - values, 2 * hi - values]
    z = (grid[:, None] - np.concatenate(centers)[None, :]) / bandwidth
    raw = np.exp(-0.5 * z**2).sum(axis=1) / (len(values) * bandwidth * np.sqrt(2 * np.pi))
    mass = np.trapezoid(raw, grid)
    if mass <= 0:
        raise EstimationError("density underflowed to zero over the clip range")
    density = raw / mass
    return DensityCurve(grid=grid, density=density, bandwidth=float(bandwidth), clip_range=(lo, hi))


# ---------------------------------------------------------------------------
# Regime comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonTable:
    """Regimes x metrics grid of mean +/- stderr, with best-per-metric flags
    and the relative improvement of AllAug over ClassicAug when both exist."""

    reports: list[RegimeReport]
    best: dict[str, list[Regime]] = field(default_factory=dict)
    improvements: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def regimes(self) -> list[Regime]:
        return [r.regime for r in self.reports]


def compare_regimes(reports: list[RegimeReport]) -> ComparisonTable:
    """Build the comparison grid; flags every regime achieving the row maximum."""
    if len(reports) < 2:
        raise ValidationError(f"need at least 2 regime reports to compare, got {len(reports)}")
    regimes = [r.regime for r in reports]
    if len(set(regimes)) != len(regimes):
        raise ValidationError("duplicate regimes in comparison")
    best: dict[str, list[Regime]] = {}
    for m in METRICS:
        top = max(rep.means[m] for rep in reports)
        best[m] = [rep.regime for rep in reports if rep.means[m] == top]
    improvements: dict[str, dict[str, float]] = {}
    by_regime = {rep.regime: rep for rep in reports}
    if Regime.CLASSIC in by_regime and Regime.ALL in by_regime:
        for m in METRICS:
            base = by_regime[Regime.CLASSIC].means[m]
            full = by_regime[Regime.ALL].means[m]
            improvements[m] = {
                # a zero baseline has no meaningful relative change
                "relative": (full - base) / base if base != 0 else math.nan,
                "absolute": full - base,
            }
    return ComparisonTable(reports=list(reports), best=best, improvements=improvements)


def render_table(table: ComparisonTable) -> str:
    """Fixed-width text rendering: one metric per row, best cells starred."""
    labels = [rep.regime.label for rep in table.reports]
    width = max(len("metric"), *(len(m) for m in METRICS))
    cell_w = max(len("0.0000 ± 0.0000") + 2, *(len(l) + 2 for l in labels))
    lines = ["metric".ljust(width) + "".join(l.rjust(cell_w) for l in labels)]
    for m in METRICS:
        cells = []
        for rep in table.reports:
            star = "*" if rep.regime in table.best[m] else " "
            cells.append((rep.cell(m) + star).rjust(cell_w))
        lines.append(m.ljust(width) + "".join(cells))
    if table.improvements:
        lines.append("")
        for m in METRICS:
            imp = table.improvements[m]
            if math.isnan(imp["relative"]):
                lines.append(
                    f"AllAug vs ClassicAug {m}: {imp['absolute'] * 100:+.2f} points absolute "
                    f"(zero baseline, no relative change)"
                )
            else:
                lines.append(
                    f"AllAug vs ClassicAug {m}: {imp['relative'] * 100:+.2f}% relative "
                    f"({imp['absolute'] * 100:+.2f} points absolute)"
                )
    return "\n".join(lines) + "\n"


def table_rows(table: ComparisonTable) -> tuple[list[str], list[list[str]]]:
    """Machine-readable rows: one record per regime x metric."""
    header = ["regime", "metric", "mean", "standard_error", "n", "best"]
    rows = []
    for rep in table.reports:
        for m in METRICS:
            rows.append([
                rep.regime.label,
                m,
                f"{rep.means[m]:.10g}",
                f"{rep.standard_errors[m]:.10g}",
                str(rep.n),
                "1" if rep.regime in table.best[m] else "0",
            ])
    return header, rows
