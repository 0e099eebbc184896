"""Standalone SVG training curves from ``metrics.csv``."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

SERIES = ("mean_reward", "mean_l_att")
COLORS = ("#1f77b4", "#d62728")


def read_metrics(path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return rows


def decile_means(values: list[float]) -> tuple[float, float]:
    """Mean of the first and of the last tenth (at least one value each)."""
    if not values:
        raise ValueError("no values")
    k = max(1, math.ceil(len(values) / 10))
    return sum(values[:k]) / k, sum(values[-k:]) / k


def render_svg(rows: list[dict[str, float]], series=SERIES, width: int = 640, height: int = 360) -> str:
    if not rows:
        raise ValueError("metrics are empty")
    pad = 48
    xs = [r["epoch"] for r in rows]
    ys = [r[s] for s in series for r in rows]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">epoch</text>',
        f'<text x="{pad}" y="{pad - 8}" font-size="11">{y1:.4g}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" font-size="11">{y0:.4g}</text>',
    ]
    for i, (name, color) in enumerate(zip(series, COLORS)):
        pts = [(px(r["epoch"]), py(r[name])) for r in rows]
        d = f"M {pts[0][0]:.2f} {pts[0][1]:.2f} " + " ".join(f"L {x:.2f} {y:.2f}" for x, y in pts[1:])
        parts.append(f'<path d="{d.strip()}" fill="none" stroke="{color}" stroke-width="2" '
                     f'stroke-linecap="round"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 16 * i}" font-size="12" '
                     f'fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_run(run_dir) -> tuple[Path, dict[str, tuple[float, float]]]:
    """Write ``reward_curve.svg`` into ``run_dir``; return it with per-series decile means."""
    run_dir = Path(run_dir)
    rows = read_metrics(run_dir / "metrics.csv")
    if not rows:
        raise ValueError(f"{run_dir / 'metrics.csv'} has no rows")
    out = run_dir / "reward_curve.svg"
    out.write_text(render_svg(rows))
    return out, {s: decile_means([r[s] for r in rows]) for s in SERIES}
