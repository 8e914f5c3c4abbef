"""Pivot evaluation results into a per-model comparison table."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..io import atomic_write_text, read_csv, write_csv


class ReportError(ValueError):
    pass


@dataclass
class ReportTable:
    horizons: list[int]
    rows: list[tuple[str, str, dict[int, float]]]  # (model, variant, {horizon: mae})
    best: dict[tuple[str, int], str]  # (model, horizon) -> best variant


def report(paths) -> ReportTable:
    """Load ``model,variant,horizon,mae`` CSVs and flag the best variant per model and horizon.

    Ties go to the lexicographically smallest variant name.
    """
    cells: dict[tuple[str, str], dict[int, float]] = {}
    for path in paths:
        for r in read_csv(path):
            key = (r["model"], r["variant"])
            h = int(r["horizon"])
            if h in cells.setdefault(key, {}):
                raise ReportError(f"duplicate result for {key} at horizon {h}")
            cells[key][h] = float(r["mae"])
    if not cells:
        raise ReportError("no results to report")
    horizon_sets = {tuple(sorted(v)) for v in cells.values()}
    if len(horizon_sets) != 1:
        raise ReportError(f"inconsistent horizons across runs: {sorted(horizon_sets)}")
    horizons = list(horizon_sets.pop())
    rows = [(m, v, cells[(m, v)]) for m, v in sorted(cells)]
    best = {}
    for model in sorted({m for m, _ in cells}):
        group = [(v, c) for m, v, c in rows if m == model]
        for h in horizons:
            best[(model, h)] = min(group, key=lambda vc: (vc[1][h], vc[0]))[0]
    return ReportTable(horizons, rows, best)


def format_table(table: ReportTable) -> str:
    head = f"{'model':<8}{'variant':<9}" + "".join(f"{'h' + str(h):>11}" for h in table.horizons)
    lines = [head, "-" * len(head)]
    for m, v, c in table.rows:
        cols = "".join(f"{c[h]:>10.4f}" + ("*" if table.best[(m, h)] == v else " ") for h in table.horizons)
        lines.append(f"{m:<8}{v:<9}{cols}")
    lines.append("* best variant per model and horizon (MAE, lower is better)")
    return "\n".join(lines) + "\n"


def render_report(table: ReportTable, path) -> None:
    """MAE against horizon, one panel per model, one line per variant."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    models = sorted({m for m, _, _ in table.rows})
    fig, axes = plt.subplots(1, len(models), figsize=(4.5 * len(models), 3.5), dpi=100, squeeze=False)
    for ax, model in zip(axes[0], models):
        for m, v, c in table.rows:
            if m == model:
                ax.plot(table.horizons, [c[h] for h in table.horizons], marker="o", label=v)
        ax.set_title(model)
        ax.set_xlabel("horizon (h)")
        ax.set_ylabel("MAE")
        ax.set_xticks(table.horizons)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(table: ReportTable, out_dir, render: bool = True) -> None:
    out_dir = Path(out_dir)
    header = ["model", "variant"] + [f"mae_h{h}" for h in table.horizons] + ["best_at"]
    rows = []
    for m, v, c in table.rows:
        best_at = ";".join(str(h) for h in table.horizons if table.best[(m, h)] == v)
        rows.append([m, v, *(repr(c[h]) for h in table.horizons), best_at])
    write_csv(out_dir / "summary.csv", header, rows)
    atomic_write_text(out_dir / "summary.txt", format_table(table))
    if render:
        render_report(table, out_dir / "summary.png")
