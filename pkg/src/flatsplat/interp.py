"""Bilinear sampling on pixel grids, with exact adjoints.

Continuous coordinate (u, v) lies on the grid position (u - 0.5, v - 0.5)
in array index space, matching the pixel-center convention.  A sample is
valid when all four surrounding pixel centers exist.
"""

from __future__ import annotations

import numpy as np


class BilinearSampler:
    """Precomputed corner indices/weights for a batch of sample points.

    Points with out-of-range coordinates are flagged invalid and clamped to
    pixel (0, 0); callers must mask their results.
    """

    def __init__(self, pts: np.ndarray, height: int, width: int):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        x = pts[:, 0] - 0.5
        y = pts[:, 1] - 0.5
        self.valid = (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
        x = np.clip(np.where(self.valid, x, 0.0), 0, width - 1)
        y = np.clip(np.where(self.valid, y, 0.0), 0, height - 1)
        self.x0 = np.minimum(np.floor(x).astype(np.int64), width - 2)
        self.y0 = np.minimum(np.floor(y).astype(np.int64), height - 2)
        self.wx = x - self.x0
        self.wy = y - self.y0
        self.height = height
        self.width = width

    def corners(self, grid: np.ndarray):
        """The four corner values: (v00, v01, v10, v11), each (M, ...)."""
        y0, x0 = self.y0, self.x0
        return grid[y0, x0], grid[y0, x0 + 1], grid[y0 + 1, x0], grid[y0 + 1, x0 + 1]

    def sample(self, grid: np.ndarray) -> np.ndarray:
        v00, v01, v10, v11 = self.corners(grid)
        wx = self.wx if grid.ndim == 2 else self.wx[:, None]
        wy = self.wy if grid.ndim == 2 else self.wy[:, None]
        top = v00 + wx * (v01 - v00)
        bot = v10 + wx * (v11 - v10)
        return top + wy * (bot - top)

    def sample_spatial_grad(self, grid: np.ndarray):
        """d(sample)/d(u, v): two arrays shaped like a sample each."""
        v00, v01, v10, v11 = self.corners(grid)
        wx = self.wx if grid.ndim == 2 else self.wx[:, None]
        wy = self.wy if grid.ndim == 2 else self.wy[:, None]
        du = (v01 - v00) + wy * ((v11 - v10) - (v01 - v00))
        dv = (v10 - v00) + wx * ((v11 - v01) - (v10 - v00))
        return du, dv

    def scatter(self, target: np.ndarray, values: np.ndarray):
        """Adjoint of ``sample``: distribute values onto the four corners."""
        wx = self.wx if target.ndim == 2 else self.wx[:, None]
        wy = self.wy if target.ndim == 2 else self.wy[:, None]
        np.add.at(target, (self.y0, self.x0), values * (1 - wx) * (1 - wy))
        np.add.at(target, (self.y0, self.x0 + 1), values * wx * (1 - wy))
        np.add.at(target, (self.y0 + 1, self.x0), values * (1 - wx) * wy)
        np.add.at(target, (self.y0 + 1, self.x0 + 1), values * wx * wy)

    def corners_all_true(self, mask: np.ndarray) -> np.ndarray:
        """True where every surrounding corner satisfies ``mask``."""
        m00, m01, m10, m11 = self.corners(mask)
        return self.valid & m00 & m01 & m10 & m11
