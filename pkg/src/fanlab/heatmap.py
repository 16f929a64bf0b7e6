"""Landmark <-> Gaussian heatmap conversion.

A heatmap pixel (i, j) of a stack with ``scale`` s covers image pixels
s*i .. s*i+s-1, so heatmap coordinate u maps to image coordinate
(u + 0.5) * s - 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .landmarks import INVISIBLE, LandmarkSet


@dataclass
class HeatmapStack:
    maps: np.ndarray  # (N, H, W)
    scale: float = 1.0
    visible: np.ndarray | None = None

    def __post_init__(self):
        if self.visible is None:
            self.visible = np.any(self.maps != 0, axis=(1, 2))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]

    def __len__(self) -> int:
        return self.maps.shape[0]


def image_to_heatmap(xy: np.ndarray, scale: float) -> np.ndarray:
    return (np.asarray(xy, dtype=np.float64) + 0.5) / scale - 0.5


def heatmap_to_image(uv: np.ndarray, scale: float) -> np.ndarray:
    return (np.asarray(uv, dtype=np.float64) + 0.5) * scale - 0.5


def _nearest(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def encode_array(xy: np.ndarray, resolution: tuple[int, int], sigma: float = 1.0,
                 visible: np.ndarray | None = None, subpixel: bool = False,
                 dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Core encoder on heatmap-frame coordinates ``xy`` (N, 2).

    Returns (maps, inside) where ``inside`` marks landmarks that produced a
    non-empty map.  The Gaussian is evaluated on a (2r+1)^2 window, r = ceil(3
    sigma), around the nearest pixel; it is centred on that pixel, or on the
    exact location when ``subpixel`` is set.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    H, W = resolution
    xy = np.asarray(xy, dtype=np.float64)
    n = len(xy)
    maps = np.zeros((n, H, W), dtype=dtype)
    inside = np.zeros(n, dtype=bool)
    r = int(math.ceil(3 * sigma))
    offs = np.arange(-r, r + 1)
    for k in range(n):
        if visible is not None and not visible[k]:
            continue
        x, y = xy[k]
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        cx, cy = int(_nearest(x)), int(_nearest(y))
        if not (0 <= cx < W and 0 <= cy < H):
            continue
        inside[k] = True
        xs = cx + offs
        ys = cy + offs
        xs = xs[(xs >= 0) & (xs < W)]
        ys = ys[(ys >= 0) & (ys < H)]
        mx, my = (x, y) if subpixel else (cx, cy)
        gx = np.exp(-((xs - mx) ** 2) / (2 * sigma ** 2))
        gy = np.exp(-((ys - my) ** 2) / (2 * sigma ** 2))
        maps[k, ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = np.outer(gy, gx)
    return maps, inside


def encode(landmarks: LandmarkSet, resolution: tuple[int, int], sigma: float = 1.0,
           scale: float = 1.0, subpixel: bool = False) -> HeatmapStack:
    """Encode landmarks given in an image ``scale`` times larger than the maps.

    With the default ``scale=1`` the landmark coordinates are heatmap pixels.
    Landmarks outside the map produce an all-zero channel flagged invisible.
    """
    uv = image_to_heatmap(landmarks.xy, scale)
    maps, inside = encode_array(uv, resolution, sigma, landmarks.visible, subpixel)
    return HeatmapStack(maps, scale, inside)


def decode_array(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decode (..., N, H, W) maps to heatmap-frame coordinates (..., N, 2).

    Argmax pixel (first in row-major order) then a quarter-pixel step towards
    the larger neighbour along each axis; no step at borders or on ties.
    All-zero maps decode to (-1, -1) and are reported invisible.
    """
    maps = np.asarray(maps)
    *lead, H, W = maps.shape
    flat = maps.reshape(-1, H * W)
    idx = flat.argmax(axis=1)
    py, px = np.divmod(idx, W)
    rows = np.arange(len(flat))
    grid = flat.reshape(-1, H, W)
    dx = np.zeros(len(flat))
    dy = np.zeros(len(flat))
    okx = (px > 0) & (px < W - 1)
    oky = (py > 0) & (py < H - 1)
    r = rows[okx]
    dx[okx] = np.sign(grid[r, py[okx], px[okx] + 1].astype(np.float64) - grid[r, py[okx], px[okx] - 1])
    r = rows[oky]
    dy[oky] = np.sign(grid[r, py[oky] + 1, px[oky]].astype(np.float64) - grid[r, py[oky] - 1, px[oky]])
    coords = np.stack([px + 0.25 * dx, py + 0.25 * dy], axis=1)
    visible = np.any(flat != 0, axis=1)
    coords[~visible] = INVISIBLE
    return coords.reshape(*lead, 2), visible.reshape(lead)


def decode(stack: HeatmapStack) -> LandmarkSet:
    """Decode to landmarks in the image frame of ``stack.scale``."""
    uv, visible = decode_array(stack.maps)
    xy = heatmap_to_image(uv, stack.scale)
    xy[~visible] = INVISIBLE
    return LandmarkSet(xy, visible)


def guide_channels(landmarks: LandmarkSet, resolution: tuple[int, int]) -> np.ndarray:
    """One sigma=1 Gaussian channel per landmark, in landmark order, at the
    resolution of the image the landmarks live in."""
    return encode(landmarks, resolution, sigma=1.0).maps
