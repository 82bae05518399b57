"""Aggregate metrics CSVs from experiment runs into report tables and figures.

The report step never recomputes anything: it collects `metrics.csv` files
written by earlier subcommands, merges them into one stable-sorted table,
and renders summary figures next to it.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .train import write_metrics_csv


class ReportError(RuntimeError):
    pass


def find_metrics_files(run_dirs) -> list:
    """All metrics.csv files under the given run directories."""
    found = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        if not run_dir.exists():
            raise ReportError(f"run directory not found: {run_dir}")
        if run_dir.is_file():
            found.append(run_dir)
            continue
        found.extend(sorted(run_dir.rglob("metrics.csv")))
    if not found:
        raise ReportError(
            f"no metrics.csv found under {', '.join(str(d) for d in run_dirs)}"
        )
    return found


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for key, value in row.items():
            if value is None or value == "":
                continue
            try:
                parsed[key] = int(value) if key in ("n_t", "m", "n_samples") else float(value)
            except ValueError:
                parsed[key] = value
        out.append(parsed)
    return out


def aggregate(run_dirs) -> list:
    rows = []
    for path in find_metrics_files(run_dirs):
        rows.extend(read_metrics_csv(path))
    return sorted(rows, key=lambda r: (str(r.get("method")), r.get("n_t", 0), r.get("m", 0)))


def _series(rows, metric):
    """{method: {n_t: sorted [(m, value)]}} for one metric column."""
    table = {}
    for row in rows:
        if metric not in row or "m" not in row or "n_t" not in row:
            continue
        table.setdefault(row.get("method", "?"), {}).setdefault(row["n_t"], []).append(
            (row["m"], row[metric])
        )
    for method in table.values():
        for n_t in method:
            method[n_t] = sorted(method[n_t])
    return table


def plot_metric_vs_mask(rows, metric, path, logy=True):
    """One line per (method, n_t): metric against masked-operator count m."""
    table = _series(rows, metric)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(table):
        for n_t in sorted(table[method]):
            pts = table[method][n_t]
            ax.plot(
                [m for m, _ in pts],
                [v for _, v in pts],
                marker="o",
                label=f"{method}, N_t={n_t}",
            )
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("masked operators m")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_property_mse(rows, path):
    """Grouped bars of per-property MSE columns by method at fixed (n_t, m)."""
    prop_cols = sorted({k for row in rows for k in row if k.startswith("mse_")})
    if not prop_cols:
        return False
    methods = sorted({row.get("method", "?") for row in rows if any(c in row for c in prop_cols)})
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(methods))
    for j, method in enumerate(methods):
        subset = [r for r in rows if r.get("method") == method and any(c in r for c in prop_cols)]
        if not subset:
            continue
        row = subset[-1]
        xs = [i + j * width for i in range(len(prop_cols))]
        ax.bar(xs, [row.get(c, 0.0) for c in prop_cols], width=width, label=method)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(prop_cols))])
    ax.set_xticklabels([c[len("mse_"):] for c in prop_cols], rotation=20, fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("property MSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def write_report(run_dirs, out_dir) -> dict:
    """Merge run metrics into out_dir/report.csv plus PNG figures.

    Returns {artifact name: path} for everything written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = aggregate(run_dirs)
    artifacts = {}
    report_csv = out_dir / "report.csv"
    write_metrics_csv(report_csv, rows)
    artifacts["report.csv"] = report_csv
    for metric in ("mean_infidelity", "mean_log_infidelity"):
        if any(metric in row for row in rows):
            fig_path = out_dir / f"{metric}_vs_mask.png"
            plot_metric_vs_mask(rows, metric, fig_path, logy=(metric == "mean_infidelity"))
            artifacts[fig_path.name] = fig_path
    prop_path = out_dir / "property_mse.png"
    if plot_property_mse(rows, prop_path):
        artifacts[prop_path.name] = prop_path
    return artifacts
