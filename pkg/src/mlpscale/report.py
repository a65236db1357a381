"""First-layer filter pictures and log-log scaling charts."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

MID_GRAY = 128


def filter_grid(w_emb, h: int, w: int, tiles: int = 5, channels: int = 3) -> np.ndarray:
    """Grayscale mosaic of the first ``tiles**2`` embedding rows.

    Each row is reshaped to h x w x channels (the flattening order of the
    model input), reduced by a max over channels and min-max scaled to
    [0, 255] on its own. Constant rows become uniform mid-gray. If the layer
    has fewer rows than requested, the unused grid cells stay black.
    """
    w_emb = np.asarray(w_emb, dtype=np.float64)
    if w_emb.ndim != 2 or w_emb.shape[1] != h * w * channels:
        raise ValueError(f"embedding of shape {w_emb.shape} does not hold {h}x{w}x{channels} inputs")
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    want = tiles * tiles
    count = min(want, w_emb.shape[0])
    if count < want:
        warnings.warn(f"requested {want} filters but the layer has only {count}; showing {count}", stacklevel=2)
    out = np.zeros((tiles * h, tiles * w), dtype=np.uint8)
    for t in range(count):
        tile = w_emb[t].reshape(h, w, channels).max(axis=2)
        lo, hi = tile.min(), tile.max()
        if hi > lo:
            scaled = np.rint((tile - lo) / (hi - lo) * 255.0)
        else:
            scaled = np.full_like(tile, MID_GRAY)
        r, c = divmod(t, tiles)
        out[r * h:(r + 1) * h, c * w:(c + 1) * w] = scaled
    return out


def export_pgm(image, path) -> None:
    """Binary PGM (P5) with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if img.size and (img.min() < 0 or img.max() > 255):
        raise ValueError("PGM pixel values must lie in [0, 255]")
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# SVG charts

_W, _H = 640, 480
_MARGIN = dict(left=70, right=20, top=30, bottom=55)


def _color(frac: float) -> str:
    # blue for the smallest model, red for the largest
    r = int(round(40 + 200 * frac))
    b = int(round(240 - 200 * frac))
    return f"#{r:02x}40{b:02x}"


def _log_ticks(lo: float, hi: float):
    return [10.0 ** k for k in range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1)
            if lo <= 10.0 ** k <= hi]


def scaling_plot_svg(runs, fit=None, error_field: str = "upstream_err", title: str = "",
                     n_curve: int = 100) -> str:
    """Log-log chart of error against compute.

    Colour encodes model size (blue small, red large), radius encodes dataset
    size, and runs sharing (model, N) are joined across epochs. ``fit`` (any
    object with ``predict``, ``c_min``, ``c_max``) is overlaid as a dashed
    curve sampled at ``n_curve`` log-spaced points over its domain.
    """
    pts = [(r.compute_flops, r.error(error_field), r) for r in runs if not math.isnan(r.error(error_field))]
    if not pts:
        raise ValueError("no runs with a value for " + error_field)
    if any(c <= 0 or e <= 0 for c, e, _ in pts):
        raise ValueError("log axes need positive compute and error")

    cs = [c for c, _, _ in pts]
    es = [e for _, e, _ in pts]
    curve = None
    if fit is not None and not getattr(fit, "degenerate", False):
        cc = np.geomspace(fit.c_min, fit.c_max, n_curve)
        ee = fit.predict(cc)
        keep = ee > 0
        curve = (cc[keep], ee[keep])
        cs += list(cc[keep])
        es += list(ee[keep])
    x0, x1 = math.log10(min(cs)), math.log10(max(cs))
    y0, y1 = math.log10(min(es)), math.log10(max(es))
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = _W - _MARGIN["left"] - _MARGIN["right"]
    ph = _H - _MARGIN["top"] - _MARGIN["bottom"]

    def sx(c):
        return _MARGIN["left"] + (math.log10(c) - x0) / (x1 - x0) * pw

    def sy(e):
        return _MARGIN["top"] + (1.0 - (math.log10(e) - y0) / (y1 - y0)) * ph

    sizes = sorted({r.params for _, _, r in pts})
    ns = sorted({r.dataset_size for _, _, r in pts})

    def frac(v, vals):
        return 0.0 if len(vals) == 1 else vals.index(v) / (len(vals) - 1)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_MARGIN["left"]}" y="{_MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _log_ticks(10 ** x0, 10 ** x1):
        out.append(f'<text class="xtick" x="{sx(t):.2f}" y="{_H - 35}" font-size="11" '
                   f'text-anchor="middle">{t:.0e}</text>')
    for t in _log_ticks(10 ** y0, 10 ** y1):
        out.append(f'<text class="ytick" x="{_MARGIN["left"] - 6}" y="{sy(t):.2f}" font-size="11" '
                   f'text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{_MARGIN["left"] + pw / 2:.1f}" y="{_H - 12}" font-size="13" '
               'text-anchor="middle">compute (FLOPs)</text>')
    out.append(f'<text x="16" y="{_MARGIN["top"] + ph / 2:.1f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {_MARGIN["top"] + ph / 2:.1f})">{escape(error_field)}</text>')
    if title:
        out.append(f'<text x="{_W / 2}" y="18" font-size="14" text-anchor="middle">{escape(title)}</text>')

    groups = defaultdict(list)
    for c, e, r in pts:
        groups[(r.params, r.depth, r.width, r.dataset_size)].append((r.epochs, c, e))
    for key in sorted(groups):
        seq = sorted(groups[key])
        if len(seq) > 1:
            coords = " ".join(f"{sx(c):.2f},{sy(e):.2f}" for _, c, e in seq)
            out.append(f'<polyline class="run-line" points="{coords}" fill="none" '
                       f'stroke="{_color(frac(key[0], sizes))}" stroke-width="1.2"/>')
    for c, e, r in sorted(pts, key=lambda p: (p[0], p[1])):
        radius = 3.0 + 5.0 * frac(r.dataset_size, ns)
        out.append(f'<circle class="run" cx="{sx(c):.2f}" cy="{sy(e):.2f}" r="{radius:.2f}" '
                   f'fill="{_color(frac(r.params, sizes))}"><title>{escape(r.notation)} N={r.dataset_size} '
                   f'T={r.epochs}</title></circle>')
    if curve is not None:
        coords = " ".join(f"{sx(c):.2f},{sy(e):.2f}" for c, e in zip(*curve))
        out.append(f'<polyline class="fit" points="{coords}" fill="none" stroke="black" '
                   'stroke-dasharray="5,4" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(svg: str, path) -> None:
    Path(path).write_text(svg, encoding="utf-8")
