"""Static SVG charts for aggregate curves, built by plain string assembly.

Every coordinate is formatted through the same fixed-width helper, so the
output bytes are a pure function of the input curves: rendering the same CSV
twice yields identical files, which keeps plots diffable in git.
"""

import math

from .autodiff import ContractError

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 74, 24, 42, 56

PALETTE = ("#1b6ca8", "#c84b31", "#2d8f4e", "#8d5fb0", "#b8860b", "#3aa6a6")
DASHES = ("", "7 4", "2 3", "9 3 2 3")


def _f(x) -> str:
    return "%.2f" % float(x)


def _nice_ticks(lo: float, hi: float, target: int = 5):
    """Round tick positions covering [lo, hi]; plain multiples of 1/2/2.5/5."""
    span = hi - lo
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if span / step <= target:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * span:
        ticks.append(0.0 if abs(t) < 1e-12 * span else t)
        t += step
    return ticks


def _ranges(curves):
    xs_lo = min(float(c["env_step"].min()) for c in curves)
    xs_hi = max(float(c["env_step"].max()) for c in curves)
    ys_lo = min(float(c["ci_lower"].min()) for c in curves)
    ys_hi = max(float(c["ci_upper"].max()) for c in curves)
    if xs_hi == xs_lo:
        xs_lo, xs_hi = xs_lo - 1.0, xs_hi + 1.0
    if ys_hi == ys_lo:
        pad = max(1.0, abs(ys_hi) * 0.1)
        ys_lo, ys_hi = ys_lo - pad, ys_hi + pad
    else:
        pad = 0.05 * (ys_hi - ys_lo)
        ys_lo, ys_hi = ys_lo - pad, ys_hi + pad
    return xs_lo, xs_hi, ys_lo, ys_hi


def render_curves(curves, labels, title="") -> str:
    """Curves are dicts with env_step / iqm_return / ci_lower / ci_upper.

    One polyline + translucent CI band per curve, cycling color and dash
    style; legend entries follow label order.
    """
    if not curves:
        raise ContractError("render_curves needs at least one curve")
    if len(labels) != len(curves):
        raise ContractError(
            f"got {len(curves)} curves but {len(labels)} labels")
    for c in curves:
        if len(c["env_step"]) == 0:
            raise ContractError("cannot plot an empty curve")

    x0, x1, y0, y1 = _ranges(curves)
    px0, px1 = MARGIN_L, WIDTH - MARGIN_R
    py0, py1 = HEIGHT - MARGIN_B, MARGIN_T

    def fx(v):
        return px0 + (v - x0) / (x1 - x0) * (px1 - px0)

    def fy(v):
        return py0 + (v - y0) / (y1 - y0) * (py1 - py0)

    out = []
    out.append('<?xml version="1.0" encoding="UTF-8"?>')
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
               f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">')
    out.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>')
    out.append('<g font-family="monospace" font-size="12" fill="#222222">')
    if title:
        out.append(f'<text x="{_f(WIDTH / 2)}" y="24" text-anchor="middle" '
                   f'font-size="14">{_escape(title)}</text>')

    # axes and ticks
    out.append(f'<line x1="{_f(px0)}" y1="{_f(py0)}" x2="{_f(px1)}" '
               f'y2="{_f(py0)}" stroke="#222222" stroke-width="1"/>')
    out.append(f'<line x1="{_f(px0)}" y1="{_f(py0)}" x2="{_f(px0)}" '
               f'y2="{_f(py1)}" stroke="#222222" stroke-width="1"/>')
    for t in _nice_ticks(x0, x1):
        x = fx(t)
        out.append(f'<line x1="{_f(x)}" y1="{_f(py0)}" x2="{_f(x)}" '
                   f'y2="{_f(py0 + 5)}" stroke="#222222" stroke-width="1"/>')
        out.append(f'<text x="{_f(x)}" y="{_f(py0 + 19)}" '
                   f'text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y0, y1):
        y = fy(t)
        out.append(f'<line x1="{_f(px0 - 5)}" y1="{_f(y)}" x2="{_f(px0)}" '
                   f'y2="{_f(y)}" stroke="#222222" stroke-width="1"/>')
        out.append(f'<text x="{_f(px0 - 9)}" y="{_f(y + 4)}" '
                   f'text-anchor="end">{t:g}</text>')
        out.append(f'<line x1="{_f(px0)}" y1="{_f(y)}" x2="{_f(px1)}" '
                   f'y2="{_f(y)}" stroke="#dddddd" stroke-width="0.5"/>')
    out.append(f'<text x="{_f((px0 + px1) / 2)}" y="{_f(HEIGHT - 14)}" '
               f'text-anchor="middle">env step</text>')
    out.append(f'<text x="18" y="{_f((py0 + py1) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_f((py0 + py1) / 2)})">'
               f'IQM return</text>')

    # bands first so every line draws on top of every band
    for i, c in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        xs = [fx(v) for v in c["env_step"]]
        upper = [fy(v) for v in c["ci_upper"]]
        lower = [fy(v) for v in c["ci_lower"]]
        pts = [f"{_f(x)},{_f(y)}" for x, y in zip(xs, upper)]
        pts += [f"{_f(x)},{_f(y)}" for x, y in zip(reversed(xs), reversed(lower))]
        out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" '
                   f'fill-opacity="0.18" stroke="none"/>')
    for i, c in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        dash = DASHES[i % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        pts = " ".join(f"{_f(fx(x))},{_f(fy(y))}"
                       for x, y in zip(c["env_step"], c["iqm_return"]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.6"{dash_attr}/>')

    # legend, upper right inside the plot area
    lx, ly = px1 - 150, py1 + 10
    out.append(f'<rect x="{_f(lx - 8)}" y="{_f(ly - 12)}" width="158" '
               f'height="{18 * len(curves) + 8}" fill="#ffffff" '
               f'fill-opacity="0.85" stroke="#bbbbbb" stroke-width="0.5"/>')
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        dash = DASHES[i % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        y = ly + 18 * i
        out.append(f'<line x1="{_f(lx)}" y1="{_f(y)}" x2="{_f(lx + 26)}" '
                   f'y2="{_f(y)}" stroke="{color}" stroke-width="1.6"'
                   f'{dash_attr}/>')
        out.append(f'<text x="{_f(lx + 32)}" y="{_f(y + 4)}">'
                   f'{_escape(label)}</text>')

    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))
