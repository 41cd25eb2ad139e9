"""Render a run.log as a small static SVG (loss and accuracy per epoch)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from . import runlog

W, H, PAD = 640, 360, 48
SERIES = (("loss_joint", "#1f77b4"), ("loss_rec", "#ff7f0e"), ("loss_cls", "#2ca02c"), ("accuracy", "#d62728"))


def _polyline(xs, ys, x0, x1, y0, y1, color) -> str:
    sx = (W - 2 * PAD) / max(x1 - x0, 1e-12)
    sy = (H - 2 * PAD) / max(y1 - y0, 1e-12)
    pts = " ".join(f"{PAD + (x - x0) * sx:.1f},{H - PAD - (y - y0) * sy:.1f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>'


def render(rows: list[dict], title: str = "") -> str:
    rows = [r for r in rows if r.get("kind") == "metrics"]
    if not rows:
        raise ValueError("run log has no metric records")
    xs = [r["epoch"] for r in rows]
    present = [(k, c) for k, c in SERIES if any(r.get(k) is not None for r in rows)]
    vals = [r[k] for r in rows for k, _ in present if r.get(k) is not None]
    y0, y1 = min(0.0, min(vals)), max(vals)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{PAD}" y="{PAD - 16}">{escape(title)}</text>',
           f'<text x="{W - PAD}" y="{H - PAD + 28}" text-anchor="end">epoch {xs[-1]}</text>',
           f'<text x="{PAD - 6}" y="{PAD + 4}" text-anchor="end">{y1:.3g}</text>',
           f'<text x="{PAD - 6}" y="{H - PAD + 4}" text-anchor="end">{y0:.3g}</text>']
    for i, (k, color) in enumerate(present):
        pts = [(x, r[k]) for x, r in zip(xs, rows) if r.get(k) is not None]
        out.append(_polyline([p[0] for p in pts], [p[1] for p in pts], xs[0], max(xs[-1], xs[0] + 1), y0, y1, color))
        out.append(f'<text x="{W - PAD - 110}" y="{PAD + 16 * i}" fill="{color}">{k}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(log_path, svg_path) -> None:
    Path(svg_path).write_text(render(runlog.read(log_path), Path(log_path).parent.name))
