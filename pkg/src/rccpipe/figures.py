"""Matplotlib summary figures rendered alongside each case report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .report import CaseReport

GRADE_NAMES = ["G1", "G2", "G3", "G4"]


def render_summary_figure(report: CaseReport, out_path: str | Path) -> Path:
    """Bar charts of subtype proportions and grade percentages, plus key metrics."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))

    ax = axes[0]
    if report.subtype is not None:
        s = report.subtype
        ax.bar(list(s.schema.labels), [100.0 * p for p in s.proportions], color="#4878d0")
        ax.set_title(f"Subtype proportions (slide: {s.slide_label})")
    else:
        ax.set_title("Subtype proportions (n/a)")
    ax.set_ylabel("% of tumor patches")
    ax.set_ylim(0, 100)

    ax = axes[1]
    if report.grade is not None:
        g = report.grade
        ax.bar(GRADE_NAMES, [100.0 * p for p in g.grade_percentages], color="#d65f5f")
        ax.set_title(f"Grade percentages (ISUP {g.slide_grade})")
    else:
        ax.set_title("Grade percentages (n/a)")
    ax.set_ylim(0, 100)

    m = report.metrics
    fig.suptitle(
        f"{report.case_id} / {report.slide_id}: tissue {m.tissue_area:.3f} mm2, "
        f"tumor {m.tumor_area:.3f} mm2 ({100.0 * m.tumor_fraction:.1f}%)",
        fontsize=10,
    )
    fig.tight_layout(rect=(0, 0, 1, 0.92))
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
