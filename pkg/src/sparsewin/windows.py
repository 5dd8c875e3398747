"""Window partitioning for batched feature maps.

A feature map [B, h, w, C] is tiled into non-overlapping M x M token
windows, flattened to [B * nw, M*M, C] with windows row-major over the
window grid and tokens row-major within each window. Partition and
reverse are exact inverses; the shifted partition is produced by a
toroidal roll of the map before partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass
class WindowBatch:
    """Windows of one partition of a (batched) feature map."""

    tensor: Tensor            # [num_images * windows_per_image, M*M, C]
    windows_per_row: int
    windows_per_col: int
    window_size: int
    num_images: int
    shifted: bool = False

    @property
    def windows_per_image(self) -> int:
        return self.windows_per_row * self.windows_per_col

    @property
    def num_windows(self) -> int:
        return self.num_images * self.windows_per_image


def window_partition(fmap: Tensor, window_size: int, shifted: bool = False) -> WindowBatch:
    """Split [B, h, w, C] into a WindowBatch of M x M windows."""
    b, h, w, c = fmap.shape
    m = window_size
    if h % m != 0 or w % m != 0:
        raise ValueError(f"feature map {h}x{w} not divisible by window size {m}")
    x = T.reshape(fmap, (b, h // m, m, w // m, m, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b * (h // m) * (w // m), m * m, c))
    return WindowBatch(tensor=x, windows_per_row=w // m, windows_per_col=h // m,
                       window_size=m, num_images=b, shifted=shifted)


def window_reverse(wb: WindowBatch, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition back to [B, h, w, C]."""
    m = wb.window_size
    if wb.windows_per_col * m != h or wb.windows_per_row * m != w:
        raise ValueError(
            f"window metadata ({wb.windows_per_col}x{wb.windows_per_row} windows of {m}) "
            f"does not reassemble a {h}x{w} map")
    b = wb.num_images
    c = wb.tensor.shape[-1]
    x = T.reshape(wb.tensor, (b, h // m, w // m, m, m, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def cyclic_shift(fmap: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of a [B, h, w, C] map by (dy, dx)."""
    if dy == 0 and dx == 0:
        return fmap
    return T.roll(fmap, (dy, dx), (1, 2))
