"""Report rendering: human-readable table, JSON document, CSV rows, and
figures (stage budget, glass-to-glass timeline, link throughput) written
next to the trace."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .tracing import BudgetReport, TraceLog  # noqa: E402

STAGE_ORDER = ("inference", "transmission", "analysis", "delivery")


def render_text(report: BudgetReport, title: str = "scenario") -> str:
    lines = [f"Latency / throughput report: {title}", "=" * 64, ""]
    lines.append(f"{'stage':<14}{'mean ms':>10}{'p50 ms':>10}{'p95 ms':>10}{'share':>9}{'n':>6}")
    lines.append("-" * 59)
    for name in STAGE_ORDER:
        stats = report.stage_stats.get(name)
        if stats is None:
            continue
        frac = report.stage_fractions.get(name, 0.0)
        lines.append(
            f"{name:<14}{stats.mean_ms:>10.1f}{stats.p50_ms:>10.1f}"
            f"{stats.p95_ms:>10.1f}{frac:>8.1%}{stats.n:>6}"
        )
    if report.total is not None:
        lines.append("-" * 59)
        lines.append(
            f"{'total':<14}{report.total.mean_ms:>10.1f}{report.total.p50_ms:>10.1f}"
            f"{report.total.p95_ms:>10.1f}{'100.0%':>9}{report.total.n:>6}"
        )
    lines.append("")
    lines.append("Stream delivery")
    lines.append("-" * 59)
    g2g = report.stream.get("glass_to_glass")
    lines.append(f"frames received : {report.stream.get('frames_received', 0)}")
    lines.append(f"effective fps   : {report.stream.get('effective_fps', 0.0)}")
    if g2g:
        lines.append(
            f"glass-to-glass  : mean {g2g['mean_ms'] / 1000:.2f} s, "
            f"p50 {g2g['p50_ms'] / 1000:.2f} s, p95 {g2g['p95_ms'] / 1000:.2f} s"
        )
    lines.append("")
    lines.append("Counters")
    lines.append("-" * 59)
    for key, value in sorted(report.counts.items()):
        lines.append(f"{key:<20}: {value}")
    lines.append("")
    lines.append("Bytes per link")
    lines.append("-" * 59)
    for link, total in sorted(report.bytes_by_link.items()):
        lines.append(f"{link:<28}: {total:>12,d}")
    if report.notes:
        lines.append("")
        lines.append("Notes")
        lines.append("-" * 59)
        lines.extend(report.notes)
    lines.append("")
    return "\n".join(lines)


def write_csv(report: BudgetReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "mean_ms", "p50_ms", "p95_ms", "fraction", "n"])
        for name in STAGE_ORDER:
            stats = report.stage_stats.get(name)
            if stats is None:
                continue
            writer.writerow([
                name, f"{stats.mean_ms:.3f}", f"{stats.p50_ms:.3f}",
                f"{stats.p95_ms:.3f}",
                f"{report.stage_fractions.get(name, 0.0):.6f}", stats.n,
            ])
        if report.total is not None:
            writer.writerow([
                "total", f"{report.total.mean_ms:.3f}", f"{report.total.p50_ms:.3f}",
                f"{report.total.p95_ms:.3f}", "1.000000", report.total.n,
            ])


def _figure_budget(report: BudgetReport, path: Path) -> None:
    names = [n for n in STAGE_ORDER if n in report.stage_stats]
    if not names:
        return
    means = [report.stage_stats[n].mean_ms / 1000.0 for n in names]
    p95s = [report.stage_stats[n].p95_ms / 1000.0 for n in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(names))
    ax.bar(xs, means, width=0.6, label="mean", color="#4878a8")
    ax.plot(xs, p95s, "kv", markersize=7, label="p95")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names)
    ax.set_ylabel("seconds")
    total = report.total.mean_ms / 1000.0 if report.total else sum(means)
    ax.set_title(f"Pipeline stage budget (total {total:.2f} s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _figure_glass_to_glass(trace: TraceLog, path: Path) -> None:
    recs = [r for r in trace.select("frame_received") if "capture_ts_ms" in r]
    if not recs:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    by_consumer: dict[str, list[tuple[float, float]]] = {}
    for r in recs:
        by_consumer.setdefault(r["consumer"], []).append(
            (r["t"] / 1000.0, (r["t"] - r["capture_ts_ms"]) / 1000.0)
        )
    for consumer, points in sorted(by_consumer.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", markersize=3, linewidth=1, label=consumer)
    ax.set_xlabel("receive time (s)")
    ax.set_ylabel("capture-to-receive (s)")
    ax.set_title("Glass-to-glass latency per delivered frame")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _figure_link_throughput(trace: TraceLog, path: Path, bin_ms: float = 1000.0) -> None:
    txs = trace.select("link_tx")
    if not txs:
        return
    end = max(r["t_depart"] for r in txs)
    n_bins = int(end // bin_ms) + 1
    by_link: dict[str, list[float]] = {}
    for r in txs:
        series = by_link.setdefault(r["link"], [0.0] * n_bins)
        a, b = r["t_start"], r["t_depart"]
        if b <= a:
            idx = min(int(a // bin_ms), n_bins - 1)
            series[idx] += r["bytes"]
            continue
        idx = int(a // bin_ms)
        while idx < n_bins and idx * bin_ms < b:
            lo = max(a, idx * bin_ms)
            hi = min(b, (idx + 1) * bin_ms)
            if hi > lo:
                series[idx] += r["bytes"] * (hi - lo) / (b - a)
            idx += 1
    fig, ax = plt.subplots(figsize=(7, 4))
    ts = [i * bin_ms / 1000.0 for i in range(n_bins)]
    for link, series in sorted(by_link.items()):
        if sum(series) == 0:
            continue
        ax.plot(ts, [v * 8 / (bin_ms / 1000.0) / 1e6 for v in series],
                linewidth=1, label=link)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("Mbps")
    ax.set_title("Per-link payload throughput")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_outputs(report: BudgetReport, trace: TraceLog, out_dir: str | Path,
                  title: str = "scenario") -> dict[str, Path]:
    """Write report.txt / report.json / budget.csv / trace.log and figures;
    returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report_txt": out / "report.txt",
        "report_json": out / "report.json",
        "budget_csv": out / "budget.csv",
        "trace_log": out / "trace.log",
    }
    paths["report_txt"].write_text(render_text(report, title))
    paths["report_json"].write_text(json.dumps(report.to_doc(), indent=2, sort_keys=True) + "\n")
    write_csv(report, paths["budget_csv"])
    trace.write(paths["trace_log"])
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    _figure_budget(report, figures / "stage_budget.png")
    _figure_glass_to_glass(trace, figures / "glass_to_glass.png")
    _figure_link_throughput(trace, figures / "link_throughput.png")
    for name in ("stage_budget", "glass_to_glass", "link_throughput"):
        p = figures / f"{name}.png"
        if p.exists():
            paths[f"figure_{name}"] = p
    return paths
