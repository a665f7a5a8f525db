"""Minimal self-contained SVG charts for the analysis reports.

No timestamps or random ids are emitted, so identical inputs give
identical bytes.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

from .taxonomy import OutcomeClass

CLASS_COLOURS = {OutcomeClass.C0: "#d9d9d9", OutcomeClass.C1: "#f2b134",
                 OutcomeClass.C2: "#d7301f", OutcomeClass.C3: "#3c3c8c"}
W, H, PAD = 480, 360, 48


def _doc(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">')
    parts = [head, f'<title>{escape(title)}</title>',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="13" '
             f'font-family="sans-serif">{escape(title)}</text>']
    return "\n".join(parts + body + ["</svg>", ""])


def _axes(xlabel: str, ylabel: str, xr, yr, ticks: int = 5) -> list[str]:
    x0, y0, x1, y1 = PAD, H - PAD, W - PAD / 2, PAD
    out = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="11" '
           f'font-family="sans-serif">{escape(xlabel)}</text>',
           f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="11" '
           f'font-family="sans-serif" transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">'
           f'{escape(ylabel)}</text>']
    for i in range(ticks + 1):
        fx = xr[0] + (xr[1] - xr[0]) * i / ticks
        fy = yr[0] + (yr[1] - yr[0]) * i / ticks
        px, py = _px(fx, xr), _py(fy, yr)
        out.append(f'<text x="{px:.1f}" y="{y0 + 14}" text-anchor="middle" font-size="9" '
                   f'font-family="sans-serif">{fx:g}</text>')
        out.append(f'<text x="{x0 - 4}" y="{py + 3:.1f}" text-anchor="end" font-size="9" '
                   f'font-family="sans-serif">{fy:g}</text>')
    return out


def _px(v, xr):
    return PAD + (v - xr[0]) / (xr[1] - xr[0]) * (W - 1.5 * PAD)


def _py(v, yr):
    return H - PAD - (v - yr[0]) / (yr[1] - yr[0]) * (H - 2 * PAD)


def histogram_svg(report, baseline_top1: float, title: str = "Top-1 accuracy per trial") -> str:
    edges, counts = report.edges, report.counts
    ymax = max(1, int(counts.max()) if counts.size else 1)
    xr, yr = (0.0, 1.0), (0.0, float(ymax))
    body = _axes("top-1 accuracy", "trials", xr, yr)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        if c == 0:
            continue
        x, x2, y = _px(lo, xr), _px(hi, xr), _py(float(c), yr)
        body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{x2 - x:.2f}" '
                    f'height="{_py(0, yr) - y:.2f}" fill="#4a7ab5"/>')
    bx = _px(baseline_top1, xr)
    body.append(f'<line x1="{bx:.2f}" y1="{PAD}" x2="{bx:.2f}" y2="{H - PAD}" '
                f'stroke="black" stroke-dasharray="4 3"/>')
    return _doc(body, title)


def spatial_svg(smap, bounds=((113.0, 127.0), (148.0, 160.0)),
                title: str = "Outcome classes by probe position") -> str:
    xr, yr = bounds
    body = _axes("x (mm)", "y (mm)", xr, yr)
    for cls, cell in smap.layers():
        cx, cy = smap.center(cell)
        n = smap.cells[cell][cls.index]
        r = 2.0 + min(6.0, n ** 0.5)
        body.append(f'<circle cx="{_px(cx, xr):.2f}" cy="{_py(cy, yr):.2f}" r="{r:.2f}" '
                    f'fill="{CLASS_COLOURS[cls]}" fill-opacity="0.85"><title>{cls.value}: {n}'
                    f'</title></circle>')
    for i, cls in enumerate((OutcomeClass.C0, OutcomeClass.C1, OutcomeClass.C2, OutcomeClass.C3)):
        y = PAD + 12 * i
        body.append(f'<circle cx="{W - 60}" cy="{y}" r="4" fill="{CLASS_COLOURS[cls]}"/>'
                    f'<text x="{W - 52}" y="{y + 3}" font-size="9" '
                    f'font-family="sans-serif">{cls.value}</text>')
    return _doc(body, title)


def rate_plane_svg(points, title: str = "Persistence vs failure rate") -> str:
    """``points``: iterable of (label, r_persist, r_fail)."""
    xr, yr = (0.0, 0.5), (0.0, 0.5)
    body = _axes("persistent-corruption rate", "device-failure rate", xr, yr)
    for label, rp, rf in points:
        x, y = _px(float(rp), xr), _py(float(rf), yr)
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="#d7301f"/>')
        body.append(f'<text x="{x + 6:.2f}" y="{y - 4:.2f}" font-size="9" '
                    f'font-family="sans-serif">{escape(label)}</text>')
    return _doc(body, title)
