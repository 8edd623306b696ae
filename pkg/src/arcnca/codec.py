"""Grid <-> lattice conversion.

Cell colors become an HSL-spaced RGBA quadruple (channels 0-3), four binary
color bits, least significant first (channels 4-7), and hidden channels
filled with ones (8 onward). Lattices are ``(H, W, C)`` arrays scaled to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

N_CHANNELS = 50
N_BITS = 4
RGBA = slice(0, 4)
BINARY = slice(4, 4 + N_BITS)
HIDDEN_START = 4 + N_BITS
ALPHA = 3

LIGHTNESS = 0.5
SATURATION = 0.8


def color_to_rgba(v: int, n: int) -> tuple[float, float, float, float]:
    """Map color index ``v`` of an ``n``-color palette to normalized RGBA."""
    if not 0 <= v < n:
        raise ValueError(f"color {v} outside 0..{n - 1}")
    live = float(v > 0)
    h = v / n * 360.0
    chroma = (1.0 - abs(2.0 * LIGHTNESS - 1.0)) * SATURATION * live
    m = (LIGHTNESS - chroma / 2.0) * live
    x = chroma * (1.0 - abs((h / 60.0) % 2.0 - 1.0))

    # standard hexcone sectors; G' is the chroma term on 120-180 degrees
    if h < 60:
        rp, gp, bp = chroma, x, 0.0
    elif h < 120:
        rp, gp, bp = x, chroma, 0.0
    elif h < 180:
        rp, gp, bp = 0.0, chroma, x
    elif h < 240:
        rp, gp, bp = 0.0, x, chroma
    elif h < 300:
        rp, gp, bp = x, 0.0, chroma
    else:
        rp, gp, bp = chroma, 0.0, x

    r, g, b = (rp + m) * 255.0, (gp + m) * 255.0, (bp + m) * 255.0
    a = 255.0 * live
    return (r / 255.0, g / 255.0, b / 255.0, a / 255.0)


@dataclass(frozen=True)
class Palette:
    n: int
    entries: np.ndarray  # (n, 4) RGBA in [0, 1]

    @classmethod
    def for_colors(cls, n: int) -> "Palette":
        return _palette(n)

    def min_rgb_distance(self) -> float:
        """Smallest RGB distance between two distinct live colors (1..n-1)."""
        rgb = self.entries[1:, :3]
        d = np.linalg.norm(rgb[:, None, :] - rgb[None, :, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        return float(d.min())


@lru_cache(maxsize=None)
def _palette(n: int) -> Palette:
    entries = np.array([color_to_rgba(v, n) for v in range(n)], dtype=np.float64)
    entries.setflags(write=False)
    return Palette(n, entries)


def encode_grid(grid: np.ndarray, palette: Palette | int = 10, channels: int = N_CHANNELS, dtype=np.float32) -> np.ndarray:
    grid = np.asarray(grid)
    if isinstance(palette, int):
        palette = Palette.for_colors(palette)
    if grid.min() < 0 or grid.max() >= palette.n:
        raise ValueError(f"grid values must lie in 0..{palette.n - 1}")
    if channels < HIDDEN_START:
        raise ValueError(f"need at least {HIDDEN_START} channels")
    h, w = grid.shape
    out = np.ones((h, w, channels), dtype=dtype)
    out[..., RGBA] = palette.entries[grid]
    for k in range(N_BITS):
        out[..., 4 + k] = (grid >> k) & 1
    return out


def decode_lattice(lattice: np.ndarray, palette: Palette | int = 10) -> np.ndarray:
    """Nearest-palette decode on RGB, gated by alpha < 0.5 meaning color 0."""
    if isinstance(palette, int):
        palette = Palette.for_colors(palette)
    lattice = np.asarray(lattice, dtype=np.float64)
    rgb = lattice[..., :3]
    live_rgb = palette.entries[1:, :3]
    d = ((rgb[..., None, :] - live_rgb) ** 2).sum(-1)
    # argmin returns the first minimum, i.e. the smallest color index on ties
    grid = d.argmin(-1) + 1
    grid[lattice[..., ALPHA] < 0.5] = 0
    return grid.astype(np.int64)


def decode_binary(lattice: np.ndarray) -> np.ndarray:
    """Diagnostic decode from the thresholded binary color channels."""
    bits = np.asarray(lattice)[..., BINARY] >= 0.5
    return sum(bits[..., k].astype(np.int64) << k for k in range(N_BITS))


def lattice_to_rgba8(lattice: np.ndarray, scale: int = 1) -> np.ndarray:
    """RGBA channels as uint8 with straight alpha, upscaled by pixel replication."""
    rgba = np.clip(np.asarray(lattice)[..., RGBA], 0.0, 1.0)
    img = np.round(rgba * 255.0).astype(np.uint8)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return img


def save_png(lattice: np.ndarray, path: str | Path, scale: int = 1) -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(lattice_to_rgba8(lattice, scale)).save(path)
    return path
