"""Static SVG rendering of the CSV artifacts written by the CLI.

Geometry is emitted directly with fixed number formatting, so identical input
always yields identical bytes.
"""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import SchemaMismatch

SCHEMAS = {
    "rank": ("n_traces", "rank"),
    "corr": ("candidate", "sample", "rho"),
    "tvla": ("sample", "t", "best_shift"),
    "envelope": ("sample", "value"),
}
LABELS = {
    "rank": ("traces", "key rank"),
    "corr": ("sample", "|rho|"),
    "tvla": ("sample", "t"),
    "envelope": ("sample", "magnitude"),
}

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 30, 50


def read_csv(path, kind: str) -> dict[str, np.ndarray]:
    if kind not in SCHEMAS:
        raise SchemaMismatch(f"unknown plot kind {kind!r}")
    cols = SCHEMAS[kind]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header[: len(cols)]) != cols:
            raise SchemaMismatch(f"{path}: expected columns {','.join(cols)}")
        rows = [r for r in reader if r]
    if not rows:
        raise SchemaMismatch(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r[: len(cols)]] for r in rows])
    except (ValueError, IndexError) as exc:
        raise SchemaMismatch(f"{path}: {exc}") from None
    return {c: data[:, i] for i, c in enumerate(cols)}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        fin = np.isfinite(y)
        self.x0, self.x1 = float(x.min()), float(x.max())
        self.y0, self.y1 = (float(y[fin].min()), float(y[fin].max())) if fin.any() else (0.0, 1.0)
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1

    def px(self, x):
        return LEFT + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y):
        return H - BOTTOM - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)


def _polyline(ax: _Axes, x, y, stroke: str, width: float = 1.5, extra: str = "") -> str:
    pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(ax.px(x), ax.py(y)) if np.isfinite(b))
    return f'<polyline fill="none" stroke="{stroke}" stroke-width="{width}"{extra} points="{pts}"/>'


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str) -> list[str]:
    x0, x1 = LEFT, W - RIGHT
    y0, y1 = H - BOTTOM, TOP
    out = [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W // 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) // 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="15" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {(y0 + y1) // 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(ax.x0, ax.x1, 5):
        out.append(f'<text x="{_fmt(ax.px(v))}" y="{y0 + 16}" text-anchor="middle" font-size="10">{v:.4g}</text>')
    for v in np.linspace(ax.y0, ax.y1, 5):
        out.append(f'<text x="{x0 - 6}" y="{_fmt(ax.py(v) + 3)}" text-anchor="end" font-size="10">{v:.4g}</text>')
    return out


def render(data: dict[str, np.ndarray], kind: str, title: str | None = None) -> str:
    xlabel, ylabel = LABELS[kind]
    title = title or kind
    body: list[str] = []
    if kind == "rank":
        order = np.argsort(data["n_traces"], kind="stable")
        x, y = data["n_traces"][order], data["rank"][order]
        ax = _Axes(x, y)
        body.append(_polyline(ax, x, y, "#1f77b4", extra=' class="series"'))
    elif kind == "corr":
        cand, samp, rho = data["candidate"], data["sample"], np.abs(data["rho"])
        ax = _Axes(samp, rho)
        masked = np.where(np.isnan(rho), -np.inf, rho)
        k = int(masked.argmax())
        best = cand[k]
        for c in np.unique(cand):
            sel = cand == c
            order = np.argsort(samp[sel], kind="stable")
            if c == best:
                continue
            body.append(_polyline(ax, samp[sel][order], rho[sel][order], "#bbbbbb", 0.6))
        sel = cand == best
        order = np.argsort(samp[sel], kind="stable")
        body.append(_polyline(ax, samp[sel][order], rho[sel][order], "#d62728", 1.5, ' class="best"'))
        body.append(
            f'<circle id="peak" cx="{_fmt(ax.px(samp[k]))}" cy="{_fmt(ax.py(rho[k]))}" r="4" fill="none" '
            f'stroke="black" data-candidate="{best:g}" data-sample="{samp[k]:g}" data-rho="{data["rho"][k]:.6g}"/>'
        )
        title = f"{title} (peak: candidate {best:g}, sample {samp[k]:g})"
    elif kind == "tvla":
        order = np.argsort(data["sample"], kind="stable")
        x, y = data["sample"][order], data["t"][order]
        ax = _Axes(np.concatenate([x, x[:1]]), np.concatenate([y, [-4.5, 4.5]]))
        body.append(_polyline(ax, x, y, "#1f77b4", 1.0, ' class="series"'))
        for thr in (-4.5, 4.5):
            yy = _fmt(ax.py(thr))
            body.append(f'<line x1="{LEFT}" y1="{yy}" x2="{W - RIGHT}" y2="{yy}" stroke="#d62728" stroke-dasharray="4 3"/>')
    else:
        order = np.argsort(data["sample"], kind="stable")
        x, y = data["sample"][order], data["value"][order]
        ax = _Axes(x, y)
        body.append(_polyline(ax, x, y, "#1f77b4", 1.0, ' class="series"'))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">']
    parts += _frame(ax, title, xlabel, ylabel) + body + ["</svg>", ""]
    return "\n".join(parts)


def plot(csv_path, kind: str, out_path=None, title: str | None = None) -> Path:
    """Render ``csv_path`` as ``kind`` and write the SVG (default: alongside the CSV)."""
    data = read_csv(csv_path, kind)
    svg = render(data, kind, title)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    out.write_text(svg, encoding="utf-8")
    return out
