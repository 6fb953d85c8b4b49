"""Figure and report emission: synthesis grids, per-metric KDE overlays, and
the regime comparison table (rendered text + delimited data).

Every plotted number is also written to a TSV sidecar so figures can be
diffed without opening the PNGs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .evaluator import ComparisonTable, DensityCurve, RegimeReport, compare_regimes, render_table, table_rows
from .ingest import PairedSample, denormalize_intensity
from .util import write_tsv

logger = logging.getLogger(__name__)

KDE_METRICS = ("dice", "sensitivity", "specificity")


@dataclass
class FigureManifest:
    """Paths written by emit_figures plus per-figure failures."""

    files: list[Path] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def synthesis_grid(pairs: list[PairedSample], path: Path | str, max_cols: int = 8) -> Path:
    """Mask/output side-by-side grid: top row input masks, bottom row images."""
    if not pairs:
        raise ValidationError("no samples to draw")
    cols = min(len(pairs), max_cols)
    shown = pairs[:cols]
    fig, axes = plt.subplots(2, cols, figsize=(1.6 * cols, 3.4), squeeze=False)
    for j, sample in enumerate(shown):
        axes[0][j].imshow(sample.mask, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        axes[1][j].imshow(denormalize_intensity(sample.image), interpolation="nearest")
        axes[0][j].set_title(sample.id, fontsize=6)
        for row in (0, 1):
            axes[row][j].set_xticks([])
            axes[row][j].set_yticks([])
    axes[0][0].set_ylabel("mask", fontsize=8)
    axes[1][0].set_ylabel("output", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def kde_overlay(curves: dict[str, DensityCurve], metric: str, path: Path | str) -> tuple[Path, Path]:
    """Overlayed density curves for one metric, plus a TSV sidecar with the
    exact plotted numbers."""
    if not curves:
        raise ValidationError(f"no density curves for metric {metric!r}")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for label, curve in curves.items():
        ax.plot(curve.grid, curve.density, label=label, linewidth=1.5)
    ax.set_xlabel(metric)
    ax.set_ylabel("density")
    lo, hi = next(iter(curves.values())).clip_range
    ax.set_xlim(lo, hi)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

    sidecar = path.with_suffix(".tsv")
    labels = list(curves)
    grid = next(iter(curves.values())).grid
    rows = [
        [f"{g:.10g}"] + [f"{curves[l].density[i]:.10g}" for l in labels]
        for i, g in enumerate(grid)
    ]
    comments = [f"metric\t{metric}"] + [
        f"bandwidth\t{l}\t{curves[l].bandwidth:.10g}" for l in labels
    ] + [f"clip\t{lo:.10g}\t{hi:.10g}"]
    write_tsv(sidecar, ["grid"] + labels, rows, comments)
    return path, sidecar


def write_comparison(table: ComparisonTable, out_dir: Path | str) -> list[Path]:
    """Comparison table as delimited data plus rendered fixed-width text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv_path = out_dir / "comparison_table.tsv"
    header, rows = table_rows(table)
    comments = []
    for m, imp in table.improvements.items():
        comments.append(f"improvement\t{m}\trelative\t{imp['relative']:.10g}\tabsolute\t{imp['absolute']:.10g}")
    write_tsv(tsv_path, header, rows, comments)
    txt_path = out_dir / "comparison_table.txt"
    txt_path.write_text(render_table(table), encoding="utf-8")
    return [tsv_path, txt_path]


def emit_figures(
    reports: list[RegimeReport],
    curves: dict[str, dict[str, DensityCurve]],
    synth_pairs: list[PairedSample],
    out_dir: Path | str,
) -> FigureManifest:
    """Write every requested artifact, collecting per-figure failures instead
    of aborting: grids, KDE overlays (one file per metric), and the table.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = FigureManifest()

    try:
        manifest.files.append(synthesis_grid(synth_pairs, out_dir / "synthesis_grid.png"))
    except Exception as exc:  # per-figure isolation
        manifest.errors["synthesis_grid"] = str(exc)
        logger.warning("synthesis grid not written: %s", exc)

    for metric in KDE_METRICS:
        metric_curves = curves.get(metric, {})
        try:
            png, sidecar = kde_overlay(metric_curves, metric, out_dir / f"kde_{metric}.png")
            manifest.files += [png, sidecar]
        except Exception as exc:
            manifest.errors[f"kde_{metric}"] = str(exc)
            logger.warning("KDE overlay for %s not written: %s", metric, exc)

    try:
        table = compare_regimes(reports)
        manifest.files += write_comparison(table, out_dir)
    except Exception as exc:
        manifest.errors["comparison_table"] = str(exc)
        logger.warning("comparison table not written: %s", exc)

    return manifest
