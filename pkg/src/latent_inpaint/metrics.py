"""MSE, PSNR and SSIM on the 8-bit intensity scale.

All three metrics compare images whose values live on [0, 255]; callers
holding [-1, 1] images convert with `from_unit` first.  PSNR uses the
255 peak.  SSIM follows the canonical single-scale definition: an 11x11
Gaussian window (sigma 1.5) slid over the valid region of the
channel-mean luminance, K1 = 0.01, K2 = 0.03, C3 = C2 / 2.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

PEAK = 255.0
K1 = 0.01
K2 = 0.03
C1 = (K1 * PEAK) ** 2
C2 = (K2 * PEAK) ** 2
C3 = C2 / 2.0


def from_unit(img):
    """Map a [-1,1] image onto the [0,255] intensity scale (no rounding)."""
    return (np.asarray(img, dtype=np.float64) + 1.0) * (PEAK / 2.0)


def mse(x, y):
    """Mean squared difference over all pixels and channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(mse_value):
    """Peak signal-to-noise ratio in dB for the 255 peak; inf at mse 0."""
    if mse_value < 0:
        raise ValueError("mse must be non-negative")
    if mse_value == 0:
        return float("inf")
    return float(10.0 * np.log10(PEAK**2 / mse_value))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim != 2:
        raise ShapeError(f"expected [H,W] or [C,H,W] image, got shape {img.shape}")
    return img


def ssim(x, y, window=None):
    """Structural similarity averaged over all fully-interior windows.

    `window` may be an odd size (Gaussian, sigma 1.5), a custom kernel
    array, or None for the default 11x11.
    """
    lx = _luminance(x)
    ly = _luminance(y)
    if lx.shape != ly.shape:
        raise ShapeError(f"image shapes differ: {lx.shape} vs {ly.shape}")
    if window is None:
        kernel = gaussian_window()
    elif np.isscalar(window):
        kernel = gaussian_window(int(window))
    else:
        kernel = np.asarray(window, dtype=np.float64)
        kernel = kernel / kernel.sum()
    kh, kw = kernel.shape
    if lx.shape[0] < kh or lx.shape[1] < kw:
        raise ShapeError(f"image {lx.shape} is smaller than the {kernel.shape} window")

    wx = np.lib.stride_tricks.sliding_window_view(lx, (kh, kw))
    wy = np.lib.stride_tricks.sliding_window_view(ly, (kh, kw))
    axes = ([2, 3], [0, 1])
    mu_x = np.tensordot(wx, kernel, axes=axes)
    mu_y = np.tensordot(wy, kernel, axes=axes)
    var_x = np.tensordot(wx * wx, kernel, axes=axes) - mu_x**2
    var_y = np.tensordot(wy * wy, kernel, axes=axes) - mu_y**2
    cov = np.tensordot(wx * wy, kernel, axes=axes) - mu_x * mu_y

    # with C3 = C2/2 the contrast and structure factors combine into one
    # quotient, which needs no zero-variance convention and is exactly 1
    # for identical windows
    lum = (2 * mu_x * mu_y + C1) / (mu_x**2 + mu_y**2 + C1)
    cs = (2 * cov + C2) / (var_x + var_y + C2)
    return float(np.mean(lum * cs))


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float


def _load_8bit(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64)


def evaluate_pair_set(result_dir, truth_dir, csv_path=None):
    """Per-image metrics for same-named files plus their means.

    Returns (aggregate MetricReport, per-image rows); rows are ordered by
    filename and optionally written to `csv_path` with an appended
    "aggregate" row.
    """
    result_dir = Path(result_dir)
    truth_dir = Path(truth_dir)
    results = sorted(p.name for p in result_dir.glob("*.png"))
    if not results:
        raise DataError(f"no PNG results found in {result_dir}")
    rows = []
    for name in results:
        truth_path = truth_dir / name
        if not truth_path.is_file():
            raise DataError(f"no ground-truth counterpart for {name} in {truth_dir}")
        a = _load_8bit(result_dir / name)
        b = _load_8bit(truth_path)
        m = mse(a, b)
        rows.append((name, m, psnr(m), ssim(a, b)))
    agg = MetricReport(
        mse=float(np.mean([r[1] for r in rows])),
        psnr=float(np.mean([r[2] for r in rows])),
        ssim=float(np.mean([r[3] for r in rows])),
    )
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("filename", "mse", "psnr_db", "ssim"))
            writer.writerows(rows)
            writer.writerow(("aggregate", agg.mse, agg.psnr, agg.ssim))
    return agg, rows
