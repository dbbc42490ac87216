"""Benchmark-report tables and the figures rendered alongside them.

Every numeric cell is formatted exactly once, so the aligned text table
and the tab-separated file always carry identical number strings. The
tables are the authoritative output; figures are a convenience layer on
top of the same rows.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

SATURATED = "sat"
NUMBER_FORMAT = "%.6g"


def format_cell(value) -> str:
    """One canonical string per value; None marks a saturated metric."""
    if value is None:
        return SATURATED
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    return NUMBER_FORMAT % float(value)


class BenchReport:
    """Rows of formatted cells with a shared header and free-form notes."""

    def __init__(self, columns: list[str] | tuple[str, ...], title: str = "",
                 notes: tuple[str, ...] | list[str] = ()) -> None:
        if not columns:
            raise ValueError("a report needs at least one column")
        self.columns = list(columns)
        self.title = title
        self.notes = list(notes)
        self.rows: list[list[str]] = []

    def add_row(self, values) -> None:
        cells = [format_cell(v) for v in values]
        if len(cells) != len(self.columns):
            raise ValueError(
                f"row has {len(cells)} cells, header has {len(self.columns)}"
            )
        self.rows.append(cells)

    def add_note(self, note: str) -> None:
        self.notes.append(note)

    def _header_lines(self) -> list[str]:
        lines = []
        if self.title:
            lines.append(f"# {self.title}")
        for note in self.notes:
            lines.append(f"# {note}")
        return lines

    def to_text(self) -> str:
        """Aligned, human-readable table with the notes as # lines."""
        table = [self.columns] + self.rows
        widths = [max(len(row[i]) for row in table) for i in range(len(self.columns))]
        lines = self._header_lines()
        for row in table:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        """Tab-separated output with the same cell strings as the text table."""
        lines = self._header_lines()
        lines.append("\t".join(self.columns))
        for row in self.rows:
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def save_tsv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv())
        return path

    def column_values(self, name: str) -> list[str]:
        if name not in self.columns:
            raise ValueError(f"no column {name!r} in {self.columns}")
        i = self.columns.index(name)
        return [row[i] for row in self.rows]


def _numeric(cells: list[str]) -> list[float]:
    out = []
    for cell in cells:
        try:
            out.append(float(cell))
        except ValueError:
            out.append(float("nan"))
    return out


def render_training_curves(history: list[dict[str, float]], path: str | Path) -> Path:
    """Loss and validation-PSNR traces over epochs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [row["epoch"] for row in history]
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    axes[0].plot(epochs, [row["nll"] for row in history], color="tab:blue")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("nll")
    axes[1].plot(epochs, [row["est_loss"] for row in history], color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("estimation loss")
    axes[2].plot(epochs, [row["psnr_val"] for row in history], color="tab:green")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("val PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_estimation_figure(report: BenchReport, path: str | Path) -> Path:
    """True vs estimated noise parameters, one marker per level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = report.column_values("level")
    true_a = _numeric(report.column_values("alpha_true"))
    est_a = _numeric(report.column_values("alpha_hat"))
    true_s = _numeric(report.column_values("sigma_true"))
    est_s = _numeric(report.column_values("sigma_hat"))
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4))
    x = range(len(labels))
    for ax, true_v, est_v, name in (
        (axes[0], true_a, est_a, "alpha"),
        (axes[1], true_s, est_s, "sigma"),
    ):
        ax.plot(x, true_v, "o-", label="true", color="tab:gray")
        ax.plot(x, est_v, "s--", label="estimated", color="tab:red")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=30)
        ax.set_ylabel(name)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_bar_figure(labels: list[str], values: list[float], metric: str,
                      path: str | Path, title: str = "") -> Path:
    """Simple bar chart used by the ablation and evaluation paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels) + 1.5), 3.4))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
