"""Figure rendering for the report pipeline.

One PNG per experiment: empirical statistics with error bars over the time
grid, predicted values dashed.  Rendering is file-only (Agg backend), so
reports work on headless boxes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["render_figures"]


def _quantities(rows):
    seen = []
    for row in rows:
        if row["quantity"] not in seen:
            seen.append(row["quantity"])
    return seen


def render_figures(rows_by_experiment: dict[str, list[dict]],
                   out_dir) -> list[Path]:
    """Render one figure per experiment from flat result rows.

    ``rows_by_experiment`` maps an experiment id to dicts with the CSV
    fields (time/empirical/stderr/predicted as floats).  Returns the paths
    written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for experiment, rows in rows_by_experiment.items():
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        for quantity in _quantities(rows):
            sub = sorted((r for r in rows if r["quantity"] == quantity),
                         key=lambda r: r["time"])
            t = [r["time"] for r in sub]
            emp = [r["empirical"] for r in sub]
            se = [r["stderr"] for r in sub]
            pred = [r["predicted"] for r in sub]
            has_se = all(s == s for s in se)
            if has_se:
                line = ax.errorbar(t, emp, yerr=se, marker="o", capsize=3,
                                   label=quantity)
            else:
                line = ax.plot(t, emp, marker="o", label=quantity)[0]
            color = line[0].get_color() if has_se else line.get_color()
            if all(p == p for p in pred):
                ax.plot(t, pred, linestyle="--", marker="x", alpha=0.7,
                        color=color)
        ax.set_xlabel("t")
        ax.set_title(experiment)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{experiment}.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)
    return written
