"""Window partitioning, cyclic shifts and the shifted-window attention mask.

Feature maps are channels-last, ``(..., h, w, C)``; any leading dims are
treated as a batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, reshape, roll, transpose

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowGrid:
    height: int
    width: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ShapeError(f"window size must be positive, got {self.window}")
        if self.height % self.window or self.width % self.window:
            raise ShapeError(
                f"{self.height}x{self.width} token grid is not divisible by window {self.window}"
            )
        if not 0 <= self.shift < self.window:
            raise ShapeError(f"shift {self.shift} outside [0, {self.window})")

    @property
    def num_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)


def window_partition(x: Tensor, window: int) -> Tensor:
    """``(..., h, w, C) -> (..., nw, window*window, C)``; windows and tokens row-major."""
    *lead, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"{h}x{w} map is not divisible by window {window}")
    k = len(lead)
    t = reshape(x, (*lead, h // window, window, w // window, window, c))
    t = transpose(t, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return reshape(t, (*lead, (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    *lead, nw, n, c = windows.shape
    if h % window or w % window or nw != (h // window) * (w // window) or n != window * window:
        raise ShapeError(
            f"windows of shape {windows.shape} do not tile a {h}x{w} map with window {window}"
        )
    k = len(lead)
    t = reshape(windows, (*lead, h // window, w // window, window, window, c))
    t = transpose(t, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return reshape(t, (*lead, h, w, c))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """``out[i, j] = x[(i + dy) % h, (j + dx) % w]`` over the two spatial axes."""
    return roll(x, (-dy, -dx), (-3, -2))


def region_ids(grid: WindowGrid) -> np.ndarray:
    """Region label of every token of the shifted map, shape ``(h, w)``."""
    h, w, m, s = grid.height, grid.width, grid.window, grid.shift

    def bands(n):
        ids = np.zeros(n, dtype=np.int64)
        if s:
            ids[n - m:n - s] = 1
            ids[n - s:] = 2
        return ids

    return bands(h)[:, None] * 3 + bands(w)[None, :]


@lru_cache(maxsize=64)
def _mask_array(grid: WindowGrid) -> np.ndarray:
    ids = region_ids(grid).astype(np.float64)[..., None]
    win = window_partition(Tensor(ids), grid.window).data[..., 0]
    same = win[:, :, None] == win[:, None, :]
    mask = np.where(same, 0.0, MASK_VALUE)
    mask.setflags(write=False)
    return mask


def build_shift_mask(grid: WindowGrid) -> np.ndarray:
    """Additive mask ``(num_windows, M*M, M*M)``: 0 within a region, ``MASK_VALUE`` across."""
    return _mask_array(grid)
