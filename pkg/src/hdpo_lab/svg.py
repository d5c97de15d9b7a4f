"""Minimal dependency-free SVG writers (heatmap with a star marker, line plots)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

# viridis anchor colours, interpolated linearly
_ANCHORS = np.array(
    [
        [68, 1, 84],
        [59, 82, 139],
        [33, 145, 140],
        [94, 201, 98],
        [253, 231, 37],
    ],
    dtype=float,
)
N_BINS = 64
_PALETTE = ["#ffffff", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def palette(n_bins: int = N_BINS) -> list[str]:
    t = np.linspace(0.0, 1.0, n_bins) * (len(_ANCHORS) - 1)
    lo = np.floor(t).astype(int).clip(max=len(_ANCHORS) - 2)
    frac = (t - lo)[:, None]
    rgb = np.rint(_ANCHORS[lo] * (1 - frac) + _ANCHORS[lo + 1] * frac).astype(int)
    return ["#%02x%02x%02x" % tuple(c) for c in rgb]


def color_bin(value: float, vmin: float, vmax: float, n_bins: int = N_BINS) -> int:
    """Colour bin index; vmax lands in the top bin, anything <= vmin in bin 0."""
    t = (value - vmin) / (vmax - vmin)
    return int(min(max(int(np.floor(t * n_bins)), 0), n_bins - 1))


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def heatmap_svg(
    matrix,
    x_values,
    y_values,
    star: tuple[float, float] | None,
    path,
    vmin: float = 0.0,
    vmax: float = 3.0,
    xlabel: str = "μ",
    ylabel: str = "σ",
    title: str = "",
) -> Path:
    """Write a heatmap; ``matrix[i, j]`` is drawn at (x_values[j], y_values[i])."""
    m = np.asarray(matrix, dtype=float)
    xs = np.asarray(x_values, dtype=float)
    ys = np.asarray(y_values, dtype=float)
    if m.shape != (len(ys), len(xs)):
        raise ValueError(f"matrix shape {m.shape} does not match axes ({len(ys)}, {len(xs)})")
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap matrix must be finite")
    for name, ax in (("x", xs), ("y", ys)):
        if len(ax) < 2 or not (np.all(np.diff(ax) > 0) or np.all(np.diff(ax) < 0)):
            raise ValueError(f"{name} axis must be strictly monotone with >= 2 points")
    colors = palette()
    W, H, pad_l, pad_b, pad_t, bar = 480, 400, 60, 50, 30, 50
    pw, ph = W - pad_l - bar - 20, H - pad_b - pad_t
    cw, ch = pw / len(xs), ph / len(ys)

    def px(x):
        return pad_l + (x - xs[0]) / (xs[-1] - xs[0]) * (pw - cw) + cw / 2

    def py(y):
        return pad_t + ph - ((y - ys[0]) / (ys[-1] - ys[0]) * (ph - ch) + ch / 2)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<title>{escape(title)}</title>',
        '<g id="cells" shape-rendering="crispEdges">',
    ]
    for i in range(len(ys)):
        y0 = pad_t + ph - (i + 1) * ch
        for j in range(len(xs)):
            b = color_bin(m[i, j], vmin, vmax)
            out.append(
                f'<rect x="{_fmt(pad_l + j * cw)}" y="{_fmt(y0)}" width="{_fmt(cw + 0.01)}" '
                f'height="{_fmt(ch + 0.01)}" fill="{colors[b]}" data-bin="{b}"/>'
            )
    out.append("</g>")
    for k in range(N_BINS):
        yk = pad_t + ph - (k + 1) * ph / N_BINS
        out.append(
            f'<rect x="{W - bar}" y="{_fmt(yk)}" width="15" height="{_fmt(ph / N_BINS + 0.01)}" fill="{colors[k]}"/>'
        )
    out.append(f'<text x="{W - bar + 18}" y="{pad_t + 10}" font-size="11">{_fmt(vmax)}</text>')
    out.append(f'<text x="{W - bar + 18}" y="{pad_t + ph}" font-size="11">{_fmt(vmin)}</text>')
    if star is not None:
        sx, sy = px(star[0]), py(star[1])
        pts = []
        for k in range(10):
            r = 9.0 if k % 2 == 0 else 3.6
            a = np.pi / 2 + k * np.pi / 5
            pts.append(f"{_fmt(sx + r * np.cos(a))},{_fmt(sy - r * np.sin(a))}")
        out.append(f'<polygon id="star" points="{" ".join(pts)}" fill="red" stroke="black" stroke-width="0.5"/>')
    out += _axes(pad_l, pad_t, pw, ph, xs, ys, xlabel, ylabel)
    out.append("</svg>")
    return _write(path, out)


def _axes(pad_l, pad_t, pw, ph, xs, ys, xlabel, ylabel) -> list[str]:
    out = [
        f'<rect x="{pad_l}" y="{pad_t}" width="{_fmt(pw)}" height="{_fmt(ph)}" fill="none" stroke="black"/>',
        f'<text x="{_fmt(pad_l + pw / 2)}" y="{_fmt(pad_t + ph + 40)}" font-size="14" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{_fmt(pad_t + ph / 2)}" font-size="14" text-anchor="middle" '
        f'transform="rotate(-90 15 {_fmt(pad_t + ph / 2)})">{escape(ylabel)}</text>',
    ]
    for v, x in ((xs[0], pad_l), (xs[-1], pad_l + pw)):
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(pad_t + ph + 16)}" font-size="11" text-anchor="middle">{_fmt(v)}</text>')
    for v, y in ((ys[0], pad_t + ph), (ys[-1], pad_t + 10)):
        out.append(f'<text x="{pad_l - 5}" y="{_fmt(y)}" font-size="11" text-anchor="end">{_fmt(v)}</text>')
    return out


def line_plot_svg(series: dict[str, tuple], path, xlabel: str = "x", ylabel: str = "y", title: str = "") -> Path:
    """``series`` maps a label to (xs, ys); each series gets its own colour."""
    if not series:
        raise ValueError("nothing to plot")
    all_x = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    all_y = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if not (np.all(np.isfinite(all_x)) and np.all(np.isfinite(all_y))):
        raise ValueError("line plot data must be finite")
    x0, x1 = float(all_x.min()), float(all_x.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    W, H, pad_l, pad_b, pad_t = 480, 360, 60, 50, 30
    pw, ph = W - pad_l - 20, H - pad_b - pad_t
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<title>{escape(title)}</title>',
    ]
    for k, (label, (xs, ys)) in enumerate(series.items()):
        pts = " ".join(
            f"{_fmt(pad_l + (x - x0) / (x1 - x0) * pw)},{_fmt(pad_t + ph - (y - y0) / (y1 - y0) * ph)}"
            for x, y in zip(xs, ys)
        )
        color = _PALETTE[1 + k % (len(_PALETTE) - 1)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{pad_l + 8}" y="{pad_t + 14 + 14 * k}" font-size="11" fill="{color}">{escape(label)}</text>')
    out += _axes(pad_l, pad_t, pw, ph, np.array([x0, x1]), np.array([y0, y1]), xlabel, ylabel)
    out.append("</svg>")
    return _write(path, out)


def _write(path, lines) -> Path:
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path
