"""Small image-processing primitives shared by losses and metrics."""

from __future__ import annotations

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) image; (H, W) images pass through."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ LUMA_WEIGHTS


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    """Centered-difference gradient magnitude, normalized to [0, 1].

    Normalization divides by the image maximum; a constant image maps to
    all zeros.
    """
    gy, gx = np.gradient(np.asarray(gray, dtype=np.float64))
    mag = np.sqrt(gx**2 + gy**2)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return np.clip(mag, 0.0, 1.0)


def gaussian_taps(radius: int, sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian kernel with ``2 * radius + 1`` taps."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _sym_pad_indices(n: int, r: int) -> np.ndarray:
    """Index map realizing symmetric ('reflect' in scipy.ndimage) padding."""
    if n < r:
        raise ValueError(f"cannot symmetric-pad length {n} by {r}")
    left = np.arange(r - 1, -1, -1)
    mid = np.arange(n)
    right = np.arange(n - 1, n - r - 1, -1)
    return np.concatenate([left, mid, right])


class GaussianFilter2D:
    """Separable Gaussian blur with symmetric padding and an exact adjoint.

    Matches scipy.ndimage.gaussian_filter(..., mode='reflect') up to
    summation order.
    """

    def __init__(self, height: int, width: int, radius: int, sigma: float):
        self.h, self.w, self.r = height, width, radius
        self.k = gaussian_taps(radius, sigma)
        self.rows = _sym_pad_indices(height, radius)
        self.cols = _sym_pad_indices(width, radius)

    def apply(self, x: np.ndarray) -> np.ndarray:
        r, k = self.r, self.k
        xp = x[self.rows][:, self.cols]
        tmp = np.zeros((self.h, self.w + 2 * r))
        for t in range(2 * r + 1):
            tmp += k[t] * xp[t : t + self.h, :]
        out = np.zeros((self.h, self.w))
        for t in range(2 * r + 1):
            out += k[t] * tmp[:, t : t + self.w]
        return out

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        r, k = self.r, self.k
        g_tmp = np.zeros((self.h, self.w + 2 * r))
        for t in range(2 * r + 1):
            g_tmp[:, t : t + self.w] += k[t] * g
        g_xp = np.zeros((self.h + 2 * r, self.w + 2 * r))
        for t in range(2 * r + 1):
            g_xp[t : t + self.h, :] += k[t] * g_tmp
        folded_rows = np.zeros((self.h, self.w + 2 * r))
        np.add.at(folded_rows, self.rows, g_xp)
        out = np.zeros((self.w, self.h))
        np.add.at(out, self.cols, folded_rows.T)
        return out.T
