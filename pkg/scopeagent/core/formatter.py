"""
Report formatter module for the surgical image enhancement agent.
Renders accuracy, metric and ablation tables as Markdown and CSV from one
set of formatted cells.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from scopeagent.core.metrics import TABLE_CELLS, AccuracyReport
from scopeagent.utils import logger

ROW_NAMES = {
    "severity_only": "Sev.✓ Dis.✗",
    "category_only": "Sev.✗ Dis.✓",
    "joint": "Sev.✓ Dis.✓",
}
CATEGORY_SHORT = {"low_light": "Low", "over_exposure": "Over", "motion_blur": "Blur", "smoke": "Smoke"}
ACCURACY_HEADER = ["Method", "Criterion"] + [
    f"{sev.value.capitalize()} {CATEGORY_SHORT[cat.value]}" for sev, cat in TABLE_CELLS
] + ["Average"]
SEVERITY_FOOTNOTE = ("Severity-only accuracy compares the multiset of predicted severities with the "
                     "ground truth, ignoring which category each severity belongs to.")


def fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


@dataclass
class Table:
    title: str
    header: List[str]
    rows: List[List[str]]
    footnotes: List[str] = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = [f"### {self.title}", ""]
        lines.append("| " + " | ".join(self.header) + " |")
        lines.append("|" + "|".join("---" for _ in self.header) + "|")
        for row in self.rows:
            lines.append("| " + " | ".join(row) + " |")
        if self.footnotes:
            lines.append("")
            lines.extend(f"_{note}_" for note in self.footnotes)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()


class ReportFormatter:
    """Builds report tables from accuracy reports and metric summaries."""

    def accuracy_table(self, reports: Sequence[Tuple[str, AccuracyReport]],
                       footnotes: Sequence[str] = ()) -> Table:
        """One block of three criterion rows per method, seven cells plus the average."""
        rows = []
        for method, report in reports:
            for mode, name in ROW_NAMES.items():
                if mode not in report.cells:
                    continue
                rows.append([method, name] + [fmt(v) for v in report.row(mode)])
        logger.debug("Formatted accuracy table", methods=len(reports), rows=len(rows))
        return Table("Classification accuracy", list(ACCURACY_HEADER), rows,
                     [SEVERITY_FOOTNOTE, *footnotes])

    def metric_table(self, summaries: Sequence[Tuple[str, Dict[str, Optional[float]]]],
                     counts: Dict[str, int]) -> Table:
        """Distorted and enhanced rows; paired columns are full-reference, unpaired no-reference."""
        header = ["Setting", "Paired SSIM", "Paired PSNR", "Paired NIQE", "Paired BRISQUE",
                  "Unpaired NIQE", "Unpaired BRISQUE"]
        keys = ["paired.ssim", "paired.psnr", "paired.niqe", "paired.brisque",
                "unpaired.niqe", "unpaired.brisque"]
        rows = [[setting] + [fmt(summary.get(k)) for k in keys] for setting, summary in summaries]
        notes = [f"Paired images: {counts.get('paired', 0)}; unpaired images: {counts.get('unpaired', 0)}."]
        return Table("Enhancement quality", header, rows, notes)

    def ablation_table(self, columns: Sequence[Tuple[Dict[str, int], AccuracyReport]],
                       mode_label: str, synthetic: bool = False) -> Table:
        """Average accuracy per criterion with one column per context configuration, in input order."""
        header = ["Setting"] + [f"#{i + 1}" for i in range(len(columns))]
        rows = [
            ["k"] + [str(c["k"]) for c, _ in columns],
            ["Single / Composite"] + [f"{c['single']}/{c['composite']}" for c, _ in columns],
        ]
        for mode, name in ROW_NAMES.items():
            rows.append([name] + [fmt(report.average.get(mode)) for _, report in columns])
        notes = [f"Accuracy of {mode_label}, averaged over populated cells."]
        if synthetic:
            notes.append("Backend answers come from the offline noisy policy; the trend is synthetic.")
        return Table("Few-shot context ablation", header, rows, notes)
