"""Displacement-field rasters and effective scan-path polylines.

Outputs are dependency-free: a P2 graymap of displacement magnitude, a P6
pixmap coloured by direction (hue) and magnitude (value), and an SVG
polyline through the expected positions in raster order.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .graphscan import (ProjectionSet, TokenGrid, compute_affinities, displacement_field,
                        expected_positions, window_offsets, window_size)
from .tensor import make_rng

PATTERNS = ("checker", "gradient", "impulse")
WEIGHT_MODES = ("random", "zero", "spike")


def synthetic_pattern(name: str, height: int, width: int, channels: int) -> TokenGrid:
    """Analytic test inputs.

    checker:  ``+-(c+1)/D`` on 2x2 blocks; gradient: row coordinate on even
    channels, column coordinate on odd ones; impulse: ones at the centre
    token, zeros elsewhere.
    """
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ch = np.arange(channels)
    if name == "checker":
        sign = np.where((rows // 2 + cols // 2) % 2 == 0, 1.0, -1.0)
        f = sign[:, :, None] * ((ch + 1) / channels)[None, None, :]
    elif name == "gradient":
        pr = np.zeros(height) if height == 1 else -1 + 2 * np.arange(height) / (height - 1)
        pc = np.zeros(width) if width == 1 else -1 + 2 * np.arange(width) / (width - 1)
        f = np.where(ch % 2 == 0, pr[rows][:, :, None], pc[cols][:, :, None])
    elif name == "impulse":
        f = np.zeros((height, width, channels))
        f[height // 2, width // 2, :] = 1.0
    else:
        raise ParameterError(f"unknown pattern {name!r}; valid: {list(PATTERNS)}")
    return TokenGrid(np.asarray(f, dtype=np.float64))


def field_projections(mode: str, dim: int, radius: int, seed: int, heads: int = 1,
                      scale: float = 3.0) -> ProjectionSet:
    """Projections that drive a figure.

    ``random`` draws seeded q/k weights (scaled up so affinities are peaked),
    ``zero`` gives uniform affinities, ``spike`` puts a large bias on the
    right-neighbour slot so every token routes one column to the right.
    """
    S = window_size(radius)
    zeros = np.zeros((dim, dim))
    if mode == "random":
        p = ProjectionSet.init(make_rng(seed), dim, radius, heads=heads, zero_output=False)
        return ProjectionSet(p.w_q * scale, p.w_k * scale, p.w_v, p.w_o, p.b_rel, heads)
    if mode == "zero":
        return ProjectionSet(zeros, zeros, zeros, zeros, np.zeros(S), heads)
    if mode == "spike":
        if radius < 1:
            raise ParameterError("spike weights need radius >= 1")
        b = np.zeros(S)
        offs = window_offsets(radius)
        b[np.flatnonzero((offs[:, 0] == 0) & (offs[:, 1] == 1))] = 50.0
        return ProjectionSet(zeros, zeros, zeros, zeros, b, heads)
    raise ParameterError(f"unknown weight mode {mode!r}; valid: {list(WEIGHT_MODES)}")


@dataclass(frozen=True)
class FieldFigure:
    displacement: np.ndarray  # (L, 2) (row, col)
    expected: np.ndarray  # (L, 2)
    height: int
    width: int

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.displacement[:, 0], self.displacement[:, 1]).reshape(
            self.height, self.width)


def compute_field(grid: TokenGrid, proj: ProjectionSet, radius: int) -> FieldFigure:
    f = compute_affinities(grid, proj, radius)
    return FieldFigure(displacement_field(f, grid), expected_positions(f, grid),
                       grid.height, grid.width)


def quantize(values: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Scale to 0..255 by the maximum; values below ``floor`` count as zero."""
    v = np.where(np.abs(values) < floor, 0.0, values)
    top = float(np.max(v)) if v.size else 0.0
    if top <= 0.0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(v / top * 255.0).astype(np.uint8)


def _upscale(img: np.ndarray, cell: int) -> np.ndarray:
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def magnitude_pgm(fig: FieldFigure, cell: int = 8) -> bytes:
    """ASCII graymap (P2) of displacement magnitude."""
    q = _upscale(quantize(fig.magnitude()), cell)
    lines = [f"P2\n{q.shape[1]} {q.shape[0]}\n255\n"]
    lines.extend(" ".join(str(int(v)) for v in row) + "\n" for row in q)
    return "".join(lines).encode("ascii")


def direction_ppm(fig: FieldFigure, cell: int = 8) -> bytes:
    """Binary pixmap (P6): hue from direction, value from magnitude."""
    mag = quantize(fig.magnitude()).astype(np.float64) / 255.0
    ang = np.arctan2(-fig.displacement[:, 0], fig.displacement[:, 1]).reshape(fig.height, fig.width)
    hue = (ang / (2 * np.pi)) % 1.0
    rgb = np.zeros((fig.height, fig.width, 3), dtype=np.uint8)
    for i in range(fig.height):
        for j in range(fig.width):
            r, g, b = colorsys.hsv_to_rgb(float(hue[i, j]), 1.0, float(mag[i, j]))
            rgb[i, j] = [int(round(255 * r)), int(round(255 * g)), int(round(255 * b))]
    img = _upscale(rgb, cell)
    return f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + img.tobytes()


def scan_path_svg(fig: FieldFigure, size: int = 400, margin: int = 20) -> bytes:
    """Polyline through expected positions in raster order, with start/end markers."""
    span = size - 2 * margin

    def xy(p):
        return margin + (p[1] + 1.0) * 0.5 * span, margin + (p[0] + 1.0) * 0.5 * span

    pts = [xy(p) for p in fig.expected]
    coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in pts)
    sx, sy = pts[0]
    ex, ey = pts[-1]
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>\n'
        f'<polyline points="{coords}" fill="none" stroke="#5b02a3" stroke-width="1.5"/>\n'
        f'<circle cx="{sx:.3f}" cy="{sy:.3f}" r="5" fill="green"/>\n'
        f'<rect x="{ex - 5:.3f}" y="{ey - 5:.3f}" width="10" height="10" fill="red"/>\n'
        "</svg>\n"
    )
    return svg.encode("ascii")
