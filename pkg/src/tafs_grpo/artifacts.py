"""Metric CSVs and scatter-plot SVGs."""

from __future__ import annotations

import csv
import os
from typing import Iterable, Sequence

import numpy as np

# Colour-blind friendly palette; sets beyond its length cycle.
PALETTE = ("#0072b2", "#e69f00", "#009e73", "#cc79a7", "#56b4e9", "#d55e00", "#f0e442", "#000000")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def write_metrics(path, records: Sequence[dict], columns: Sequence[str] | None = None, append: bool = False) -> list[str]:
    """Write ``records`` as CSV; returns the column order used.

    With ``append`` and an existing file, rows are added under the existing
    header, which must match. Missing values are written as empty fields.
    """
    records = list(records)
    if columns is None:
        if not records:
            raise ValueError("columns are required when there are no records")
        columns = list(records[0])
    columns = list(columns)
    for rec in records:
        extra = set(rec) - set(columns)
        if extra:
            raise ValueError(f"record has columns outside the header: {sorted(extra)}")
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    if exists:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        if header != columns:
            raise ValueError(f"{path}: existing header {header} does not match {columns}")
    with open(path, "a" if exists else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(columns)
        for rec in records:
            w.writerow(["" if rec.get(c) is None else _fmt(rec[c]) for c in columns])
    return columns


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _nice_step(span: float) -> float:
    raw = span / 5
    mag = 10 ** np.floor(np.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * mag:
            return float(m * mag)
    return float(10 * mag)


def emit_scatter_svg(
    sets: Iterable[tuple[str, np.ndarray]],
    path,
    title: str = "",
    size: int = 480,
    radius: float = 1.6,
) -> None:
    """Standalone SVG scatter plot, one colour per labelled point set.

    Output bytes depend only on the inputs.
    """
    sets = [(str(label), np.asarray(pts, dtype=np.float64).reshape(-1, 2)) for label, pts in sets]
    if not sets or any(len(p) == 0 for _, p in sets):
        raise ValueError("emit_scatter_svg needs nonempty point sets")
    allpts = np.concatenate([p for _, p in sets])
    if not np.all(np.isfinite(allpts)):
        raise ValueError("points must be finite")
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    center = (lo + hi) / 2
    half = max(float(np.max(hi - lo)) / 2, 0.5) * 1.1
    lo, hi = center - half, center + half
    margin = 40
    inner = size - 2 * margin

    def sx(x):
        return margin + (x - lo[0]) / (hi[0] - lo[0]) * inner

    def sy(y):
        return margin + (hi[1] - y) / (hi[1] - lo[1]) * inner

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(sets)}" '
        f'viewBox="0 0 {size} {size + 20 * len(sets)}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="#888"/>',
    ]
    if title:
        out.append(f'<text x="{size / 2:.2f}" y="24" text-anchor="middle" font-size="14">{_escape(title)}</text>')
    step = _nice_step(2 * half)
    for axis in (0, 1):
        start = np.ceil(lo[axis] / step) * step
        for v in np.arange(start, hi[axis] + 1e-9, step):
            v = 0.0 if abs(v) < 1e-12 else v
            label = format(v, "g")
            if axis == 0:
                x = sx(v)
                out.append(f'<line x1="{x:.2f}" y1="{margin + inner}" x2="{x:.2f}" y2="{margin + inner + 4}" stroke="#888"/>')
                out.append(f'<text x="{x:.2f}" y="{margin + inner + 16}" text-anchor="middle" font-size="10">{label}</text>')
            else:
                y = sy(v)
                out.append(f'<line x1="{margin - 4}" y1="{y:.2f}" x2="{margin}" y2="{y:.2f}" stroke="#888"/>')
                out.append(f'<text x="{margin - 6}" y="{y + 3:.2f}" text-anchor="end" font-size="10">{label}</text>')
    # zero axes when visible
    if lo[0] < 0 < hi[0]:
        out.append(f'<line x1="{sx(0):.2f}" y1="{margin}" x2="{sx(0):.2f}" y2="{margin + inner}" stroke="#ccc"/>')
    if lo[1] < 0 < hi[1]:
        out.append(f'<line x1="{margin}" y1="{sy(0):.2f}" x2="{margin + inner}" y2="{sy(0):.2f}" stroke="#ccc"/>')
    for i, (label, pts) in enumerate(sets):
        colour = PALETTE[i % len(PALETTE)]
        out.append(f'<g fill="{colour}" fill-opacity="0.6">')
        out.extend(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="{radius}"/>' for x, y in pts)
        out.append("</g>")
    for i, (label, _) in enumerate(sets):
        y = size + 20 * i
        out.append(f'<rect x="{margin}" y="{y - 9}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{margin + 16}" y="{y}" font-size="12">{_escape(label)}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
