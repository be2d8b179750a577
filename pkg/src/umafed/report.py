"""Figures for simulation reports, rendered headless to image files."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Any, Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402


def _access_counts(transcript: list[dict[str, Any]]) -> tuple[list[int], dict[str, list[int]]]:
    ticks = sorted({e["tick"] for e in transcript if e["event"] == "access"})
    counts: dict[str, list[int]] = {}
    per_tick = Counter((e["tick"], e["status"]) for e in transcript if e["event"] == "access")
    for status in sorted({s for _, s in per_tick}):
        counts[status] = [per_tick[(t, status)] for t in ticks]
    return ticks, counts


def scenario_figure(report: Any, path: str | Path) -> Path:
    """Queue depth per tick and access outcomes per tick for one scenario run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net = report.network
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 5), constrained_layout=True)
    depth = net.queue_depth if net is not None else []
    top.step(range(1, len(depth) + 1), depth, where="post", color="tab:blue")
    top.set_ylabel("queued messages")
    top.set_title(f"{report.name} (seed {report.seed}, {report.route})")
    ticks, counts = _access_counts(report.transcript)
    base = [0] * len(ticks)
    colors = {"granted": "tab:green", "denied": "tab:red", "ticket_needed": "tab:gray"}
    for status, values in counts.items():
        bottom.bar([str(t) for t in ticks], values, bottom=base, label=status, color=colors.get(status))
        base = [b + v for b, v in zip(base, values)]
    for ax in (top, bottom):
        ax.yaxis.set_major_locator(MaxNLocator(integer=True))
    bottom.set_xlabel("tick")
    bottom.set_ylabel("access attempts")
    if counts:
        bottom.legend(frameon=False, fontsize="small")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sweep_figure(records: Iterable[dict[str, Any]], path: str | Path) -> Path:
    """Ticks consumed per scenario, coloured by pass/fail."""
    records = list(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 0.4 * len(records) + 1.2), constrained_layout=True)
    names = [r["scenario"] for r in records]
    colors = ["tab:green" if r["passed"] else "tab:red" for r in records]
    ax.barh(names, [r["ticks"] for r in records], color=colors)
    ax.set_xlabel("ticks")
    ax.invert_yaxis()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
