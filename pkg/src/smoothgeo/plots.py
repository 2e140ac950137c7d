"""Static figures: PGM heatmaps of attributions and SVG score fields for 2-D models."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import quoteattr

import numpy as np

from .attribution import AttributionConfig, AttributionMap, attribute
from .metrics import GridGeometry
from .nn import Network, QuantityOfInterest, predict, quantity


def heatmap_pixels(scores, geom: GridGeometry) -> np.ndarray:
    """|scores| min-max scaled to 0..255 as a (height, width) u8 array."""
    a = np.abs(np.asarray(scores, dtype=np.float64))
    if geom.height is None:
        raise ValueError("heatmaps need a grid geometry")
    if geom.height * geom.width != a.size:
        raise ValueError(f"grid {geom.height}x{geom.width} does not match {a.size} scores")
    lo, hi = a.min(), a.max()
    if hi == lo:
        # a constant map carries no ranking information
        warnings.warn("degenerate attribution map; writing uniform mid-gray", RuntimeWarning, stacklevel=3)
        pix = np.full(a.shape, 128, dtype=np.uint8)
    else:
        pix = np.round(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)
    return pix.reshape(geom.height, geom.width)


def emit_heatmap(amap: AttributionMap | np.ndarray, geom: GridGeometry, path) -> Path:
    """Write a binary PGM (P5) of the attribution magnitudes."""
    scores = amap.scores if isinstance(amap, AttributionMap) else amap
    pix = heatmap_pixels(scores, geom)
    path = Path(path)
    path.write_bytes(f"P5\n{geom.width} {geom.height}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Parse a P5 file written by emit_heatmap."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError("PGM payload size does not match its header")
    return pix.reshape(h, w)


@dataclass
class ContourField:
    """What emit_contour_field drew, in data coordinates."""

    levels: list[float]
    contours: list[np.ndarray] = field(default_factory=list)  # (m, 2) polylines
    arrows: dict = field(default_factory=dict)  # method -> list of (point, unit vector)


def _score_grid(net, xs, ys, qoi, cls):
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    vals = quantity(net, pts, qoi, cls).value
    return vals.reshape(len(ys), len(xs)), predict(net, pts).reshape(len(ys), len(xs))


def contour_field(net: Network, region, methods=("SM", "IG", "SG"), resolution: int = 60,
                  arrows_per_side: int = 7, n_levels: int = 9,
                  qoi: QuantityOfInterest = QuantityOfInterest("pre", 0),
                  cfg: AttributionConfig | None = None) -> tuple[ContourField, np.ndarray]:
    if net.input_dim != 2:
        raise ValueError(f"contour fields need a 2-D input, network has d={net.input_dim}")
    from skimage.measure import find_contours

    (x0, x1), (y0, y1) = region
    xs, ys = np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)
    cls = qoi.class_index if qoi.class_index is not None else 0
    scores, regions = _score_grid(net, xs, ys, qoi, cls)
    levels = list(np.linspace(scores.min(), scores.max(), n_levels + 2)[1:-1])
    out = ContourField(levels=[float(v) for v in levels])
    if scores.max() > scores.min():
        for level in levels:
            for c in find_contours(scores, level):
                # find_contours returns (row, col) in index units
                out.contours.append(np.stack([np.interp(c[:, 1], np.arange(resolution), xs),
                                              np.interp(c[:, 0], np.arange(resolution), ys)], axis=1))
    acfg = cfg if cfg is not None else AttributionConfig(qoi=QuantityOfInterest(qoi.stage, cls))
    ax = np.linspace(x0, x1, arrows_per_side + 2)[1:-1]
    ay = np.linspace(y0, y1, arrows_per_side + 2)[1:-1]
    for method in methods:
        items = []
        for px in ax:
            for py in ay:
                p = np.array([px, py])
                g = attribute(net, p, method, acfg).scores
                n = np.linalg.norm(g)
                if n > 0:
                    items.append((p, g / n))
        out.arrows[method] = items
    return out, regions


_PALETTE = ("#dbe9f6", "#fde2cf", "#d9f0d3", "#eadcf3", "#fff5bf", "#f3d9e1")
_ARROW_COLORS = {"SM": "#c0392b", "IG": "#2471a3", "SG": "#1e8449", "UG": "#7d3c98"}


def emit_contour_field(net: Network, region, methods=("SM", "IG", "SG"), path="field.svg",
                       size: int = 480, **kwargs) -> ContourField:
    """SVG of score contours, decision regions and unit attribution arrows.

    Arrows are drawn in a local frame where they have unit length; the
    frame's scale converts to pixels.
    """
    fld, regions = contour_field(net, region, methods, **kwargs)
    (x0, x1), (y0, y1) = region
    sx, sy = size / (x1 - x0), size / (y1 - y0)

    def px(p):
        return (p[0] - x0) * sx, size - (p[1] - y0) * sy

    rows, cols = regions.shape
    cw, ch = size / cols, size / rows
    body = []
    for i in range(rows):
        for j in range(cols):
            color = _PALETTE[int(regions[i, j]) % len(_PALETTE)]
            body.append(f'<rect x="{j * cw:.3f}" y="{size - (i + 1) * ch:.3f}" width="{cw:.3f}" '
                        f'height="{ch:.3f}" fill="{color}" stroke="none"/>')
    for c in fld.contours:
        pts = " ".join(f"{a:.3f},{b:.3f}" for a, b in (px(p) for p in c))
        body.append(f'<polyline points="{pts}" fill="none" stroke="#555" stroke-width="1"/>')
    arrow_px = 0.6 * size / 9
    for method, items in fld.arrows.items():
        color = _ARROW_COLORS.get(method, "#000")
        for p, u in items:
            cx, cy = px(p)
            body.append(
                f'<g class="arrow" data-method={quoteattr(method)} '
                f'transform="translate({cx:.3f},{cy:.3f}) scale({arrow_px:.3f},{-arrow_px:.3f})">'
                f'<line x1="0" y1="0" x2="{float(u[0])!r}" y2="{float(u[1])!r}" stroke="{color}" '
                f'stroke-width="{1.5 / arrow_px:.5f}"/></g>')
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">\n' + "\n".join(body) + "\n</svg>\n")
    Path(path).write_text(svg)
    return fld
