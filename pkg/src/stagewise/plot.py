"""Dependency-free SVG line plots (smoothed loss vs log learning rate)."""

from __future__ import annotations

import math

from .optim import LrCurve

WIDTH, HEIGHT = 640, 400
MARGIN = 50


def _path(points: list[tuple[float, float]]) -> str:
    return " ".join(f"{'M' if i == 0 else 'L'}{x:.2f},{y:.2f}"
                    for i, (x, y) in enumerate(points))


def lr_curve_svg(curve: LrCurve) -> str:
    """Smoothed loss against log10(lr) with the suggestion marked."""
    samples = curve.samples
    if not samples:
        return ('<svg xmlns="http://www.w3.org/2000/svg" width="640" '
                'height="400"><text x="20" y="30">empty curve</text></svg>')
    xs = [math.log10(s.lr) for s in samples]
    ys = [s.smoothed for s in samples]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x: float, y: float) -> tuple[float, float]:
        px = MARGIN + (x - x_lo) / x_span * (WIDTH - 2 * MARGIN)
        py = HEIGHT - MARGIN - (y - y_lo) / y_span * (HEIGHT - 2 * MARGIN)
        return px, py

    line = _path([to_px(x, y) for x, y in zip(xs, ys)])
    sx, sy = to_px(math.log10(curve.suggested_lr),
                   next(s.smoothed for s in samples
                        if s.lr == curve.suggested_lr))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<path d="{line}" fill="none" stroke="#2563eb" stroke-width="2"/>',
        f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="5" fill="#dc2626"/>',
        f'<text x="{MARGIN}" y="{HEIGHT - 12}" font-size="12">'
        f'log10(lr) from {x_lo:.2f} to {x_hi:.2f}; '
        f'suggested lr = {curve.suggested_lr:.3g} ({curve.stop_reason})</text>',
        "</svg>",
    ]
    return "\n".join(parts)
