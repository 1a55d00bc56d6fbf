"""Result files: metrics CSV/JSON, ablation tables and SVG timeline charts."""
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from virusnerf.core.evaluation import metrics_frame

CHART_WIDTH = 640
CHART_HEIGHT = 240
CHART_MARGIN = 40
CHART_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (np.floating, np.integer)):
        return _clean(value.item())
    return value


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cleaned = {k: _clean(v) for k, v in payload.items()}
    path.write_text(json.dumps(cleaned, indent=2, sort_keys=True))
    return path


def write_metrics(out_dir, scan_metrics: list, summary: dict, prefix: str = "metrics") -> tuple[Path, Path]:
    """Per-pose zone rows as CSV plus the summary as JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{prefix}.csv"
    metrics_frame(scan_metrics).to_csv(csv_path, index=False)
    return csv_path, write_json(out / f"{prefix}.json", summary)


def write_scans(out_dir, scan_metrics: list) -> list:
    """One CSV (azimuth_deg, depth_m, valid) per evaluated pose."""
    out = Path(out_dir) / "scans"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(scan_metrics):
        scan = m.extra.get("scan")
        if scan is None:
            continue
        path = out / f"scan_{i:04d}.csv"
        scan.to_frame().to_csv(path, index=False)
        paths.append(path)
    return paths


def write_ablation(out_dir, table: pd.DataFrame, orderings: pd.DataFrame) -> dict:
    """Ablation table as CSV and aligned text, orderings as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table_csv": out / "ablation.csv",
        "table_txt": out / "ablation.txt",
        "orderings_csv": out / "orderings.csv",
    }
    table.to_csv(paths["table_csv"])
    paths["table_txt"].write_text(table.to_string(na_rep="-") + "\n")
    orderings.to_csv(paths["orderings_csv"], index=False)
    return paths


def _polyline(xs: np.ndarray, ys: np.ndarray, x_range, y_range) -> str:
    (x0, x1), (y0, y1) = x_range, y_range
    sx = (CHART_WIDTH - 2 * CHART_MARGIN) / ((x1 - x0) or 1.0)
    sy = (CHART_HEIGHT - 2 * CHART_MARGIN) / ((y1 - y0) or 1.0)
    coords = [
        f"{CHART_MARGIN + (x - x0) * sx:.2f},{CHART_HEIGHT - CHART_MARGIN - (y - y0) * sy:.2f}"
        for x, y in zip(xs, ys)
    ]
    return " ".join(coords)


def line_chart_svg(frame: pd.DataFrame, x: str, columns: list, title: Optional[str] = None) -> str:
    """Minimal SVG line chart of `columns` against `x`; NaN points are dropped per series."""
    series = []
    frame = frame.replace([np.inf, -np.inf], np.nan)
    for column in columns:
        values = frame[[x, column]].dropna()
        if len(values):
            series.append((column, values[x].to_numpy(float), values[column].to_numpy(float)))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_WIDTH}" height="{CHART_HEIGHT}">',
        f'<rect width="{CHART_WIDTH}" height="{CHART_HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{CHART_MARGIN}" y="20" font-size="14">{title}</text>')
    if series:
        all_x = np.concatenate([s[1] for s in series])
        all_y = np.concatenate([s[2] for s in series])
        x_range = (float(all_x.min()), float(all_x.max()))
        y_range = (float(all_y.min()), float(all_y.max()))
        parts.append(
            f'<text x="{CHART_MARGIN}" y="{CHART_HEIGHT - 10}" font-size="10">'
            f"{x}: {x_range[0]:g} .. {x_range[1]:g}   y: {y_range[0]:.4g} .. {y_range[1]:.4g}</text>"
        )
        for i, (name, xs, ys) in enumerate(series):
            color = CHART_COLORS[i % len(CHART_COLORS)]
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{_polyline(xs, ys, x_range, y_range)}"/>'
            )
            parts.append(
                f'<text x="{CHART_WIDTH - CHART_MARGIN - 120}" y="{20 + 14 * i}" '
                f'font-size="11" fill="{color}">{name}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_timeline_charts(out_dir, timeline: pd.DataFrame) -> list:
    """Loss, PSNR and NND charts of a metrics timeline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    charts = {
        "losses.svg": (["L_c", "L_IRS", "L_USS", "L_tot"], "Losses"),
        "psnr.svg": (["psnr"], "PSNR [dB]"),
        "nnd.svg": (["nnd_acc_zone3", "nnd_cov_zone3"], "Zone-3 NND [m]"),
    }
    paths = []
    for name, (columns, title) in charts.items():
        path = out / name
        path.write_text(line_chart_svg(timeline, "step", columns, title))
        paths.append(path)
    return paths
