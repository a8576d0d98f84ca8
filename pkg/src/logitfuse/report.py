"""Result tables (TSV + aligned text) and matplotlib figures.

Every artifact is deterministic for a given input: no timestamps, fixed
figure geometry, stable row ordering. Figures land next to the delimited
output in the same directory.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import EvalRecord, SummaryRow

ABSENT = "-"


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return ABSENT
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def summary_rows_to_cells(rows: Sequence[SummaryRow]) -> list[list[str]]:
    header = ["dataset", "questions", "samples", "pass@1", "pass@8", "avg_tokens"]
    cells = [header]
    for r in rows:
        cells.append(
            [
                r.dataset,
                str(r.n_questions),
                str(r.n_samples),
                _fmt(r.pass_at_1),
                _fmt(r.pass_at_8),
                _fmt(r.avg_tokens, 2),
            ]
        )
    return cells


def write_tsv(path: str | Path, cells: Sequence[Sequence[str]]) -> None:
    with open(path, "w") as fh:
        for row in cells:
            fh.write("\t".join(row) + "\n")


def format_text_table(cells: Sequence[Sequence[str]]) -> str:
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    lines = []
    for idx, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_summary(rows: Sequence[SummaryRow], outdir: str | Path) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cells = summary_rows_to_cells(rows)
    tsv = outdir / "summary.tsv"
    txt = outdir / "summary.txt"
    write_tsv(tsv, cells)
    txt.write_text(format_text_table(cells))
    return {"tsv": tsv, "txt": txt}


def render_eval_figures(
    records: Sequence[EvalRecord], rows: Sequence[SummaryRow], outdir: str | Path
) -> list[Path]:
    """Pass-rate bars and a token-length histogram next to the tables."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    datasets = [r.dataset for r in rows]
    if datasets:
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        xs = range(len(datasets))
        width = 0.38
        ax.bar([x - width / 2 for x in xs], [r.pass_at_1 for r in rows], width, label="pass@1")
        pass8 = [r.pass_at_8 if r.pass_at_8 is not None else 0.0 for r in rows]
        ax.bar([x + width / 2 for x in xs], pass8, width, label="pass@8")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(datasets, rotation=20, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("pass rate")
        ax.legend(loc="upper right", frameon=False)
        fig.tight_layout()
        path = outdir / "pass_rates.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    lengths = [c.token_count for rec in records for c in rec.completions]
    if lengths:
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        ax.hist(lengths, bins=min(30, max(5, len(set(lengths)))), color="#4878cf")
        ax.set_xlabel("generated tokens per completion")
        ax.set_ylabel("count")
        fig.tight_layout()
        path = outdir / "token_lengths.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    return written


def write_sweep_summary(
    variant_rows: Sequence[tuple[str, SummaryRow]], outdir: str | Path
) -> dict[str, Path]:
    """Cross-variant ablation table plus a pass@1 / token-length figure."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cells = [["variant", "dataset", "pass@1", "pass@8", "avg_tokens"]]
    for name, row in variant_rows:
        cells.append(
            [name, row.dataset, _fmt(row.pass_at_1), _fmt(row.pass_at_8), _fmt(row.avg_tokens, 2)]
        )
    paths = {"tsv": Path(outdir) / "sweep.tsv", "txt": Path(outdir) / "sweep.txt"}
    write_tsv(paths["tsv"], cells)
    paths["txt"].write_text(format_text_table(cells))

    if variant_rows:
        names = [name for name, _ in variant_rows]
        fig, ax1 = plt.subplots(figsize=(6.4, 3.8))
        xs = range(len(names))
        ax1.bar(xs, [row.pass_at_1 for _, row in variant_rows], 0.55, color="#4878cf")
        ax1.set_xticks(list(xs))
        ax1.set_xticklabels(names, rotation=20, ha="right")
        ax1.set_ylabel("pass@1", color="#4878cf")
        ax1.set_ylim(0, 1.05)
        ax2 = ax1.twinx()
        ax2.plot(list(xs), [row.avg_tokens for _, row in variant_rows], "o-", color="#d65f5f")
        ax2.set_ylabel("avg tokens", color="#d65f5f")
        fig.tight_layout()
        figure_path = Path(outdir) / "sweep.png"
        fig.savefig(figure_path, dpi=120)
        plt.close(fig)
        paths["figure"] = figure_path
    return paths
