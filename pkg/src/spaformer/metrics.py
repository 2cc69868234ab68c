"""Region-aware RMSE / SSIM / PSNR evaluation of restored images.

Images are channel-first RGB arrays in [0, 255] shaped (3, H, W); masks are
(H, W) or (1, H, W) with 1 marking shadow pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import correlate

from .errors import ContractError, EmptyRegionError

REGIONS = ("all", "nonshadow", "shadow")
PSNR_IDENTICAL = 99.0

# sRGB (D65) linear RGB -> XYZ
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0


def _check_rgb(image: np.ndarray, what: str = "image") -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim < 3 or a.shape[-3] != 3:
        raise ContractError(f"{what} must be channel-first RGB (..., 3, H, W), got {a.shape}")
    if a.size and (a.min() < 0 or a.max() > 255 or not np.all(np.isfinite(a))):
        raise ContractError(f"{what} values must lie in [0, 255]; got range [{a.min()}, {a.max()}]")
    return a


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB in [0, 255] -> CIELAB (D65), channel-first in and out."""
    rgb = _check_rgb(image) / 255.0
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,...jhw->...ihw", _RGB_TO_XYZ, linear)
    t = xyz / _WHITE_D65.reshape(3, 1, 1)
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0, :, :], f[..., 1, :, :], f[..., 2, :, :]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-3)


def _mask2d(mask, shape_hw) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.shape != tuple(shape_hw):
        raise ContractError(f"mask shape {np.asarray(mask).shape} does not match image size {shape_hw}")
    return m >= 0.5


def region_selector(mask, shape_hw, region: str) -> np.ndarray:
    if region not in REGIONS:
        raise ContractError(f"unknown region {region!r}; expected one of {REGIONS}")
    m = _mask2d(mask, shape_hw)
    if region == "all":
        return np.ones_like(m)
    return m if region == "shadow" else ~m


def _region_values(a: np.ndarray, b: np.ndarray, mask, region: str) -> np.ndarray:
    """Per-pixel differences inside the region, shaped (channels, n_pixels)."""
    if a.shape != b.shape:
        raise ContractError(f"prediction {a.shape} and ground truth {b.shape} differ")
    sel = region_selector(mask, a.shape[-2:], region)
    if not sel.any():
        raise EmptyRegionError(f"region {region!r} contains no pixels")
    return (a - b)[:, sel]


def region_rmse(a: np.ndarray, b: np.ndarray, mask, region: str = "all") -> float:
    """Root mean square over region pixels and all channels of two (C, H, W) arrays."""
    d = _region_values(np.asarray(a, np.float64), np.asarray(b, np.float64), mask, region)
    return float(np.sqrt(np.mean(d * d)))


def rmse_lab(pred, gt, mask, region: str = "all") -> float:
    return region_rmse(rgb_to_lab(pred), rgb_to_lab(gt), mask, region)


def mae_lab(pred, gt, mask, region: str = "all") -> float:
    """Mean over region pixels of the per-pixel L1 distance in LAB (the usual shadow-removal 'RMSE')."""
    d = _region_values(rgb_to_lab(pred), rgb_to_lab(gt), mask, region)
    return float(np.mean(np.abs(d).sum(axis=0)))


def psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def psnr(pred, gt, mask, region: str = "all") -> float:
    d = _region_values(_check_rgb(pred, "prediction"), _check_rgb(gt, "ground truth"), mask, region)
    return psnr_from_mse(float(np.mean(d * d)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def luma(image: np.ndarray) -> np.ndarray:
    return np.einsum("c,chw->hw", _LUMA, _check_rgb(image))


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """SSIM at every window centre where the full window fits (valid filtering), for 2-D inputs."""
    win = gaussian_window()
    if x.shape != y.shape:
        raise ContractError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ContractError(f"images of size {x.shape} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    def filt(a):
        return correlate(a, win, mode="valid", method="direct")

    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x, mu_y = filt(x), filt(y)
    s_xx = filt(x * x) - mu_x * mu_x
    s_yy = filt(y * y) - mu_y * mu_y
    s_xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * s_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (s_xx + s_yy + c2)
    return num / den


def _ssim_region(smap: np.ndarray, mask, shape_hw, region: str) -> np.ndarray:
    sel = region_selector(mask, shape_hw, region)
    r = SSIM_WINDOW // 2
    centres = sel[r : shape_hw[0] - r, r : shape_hw[1] - r]
    values = smap[centres]
    if values.size == 0:
        raise EmptyRegionError(f"region {region!r} has no SSIM window centres")
    return values


def ssim(pred, gt, mask, region: str = "all") -> float:
    """Gaussian-window SSIM on luma, averaged over window centres whose mask matches ``region``."""
    x, y = luma(pred), luma(gt)
    return float(np.mean(_ssim_region(ssim_map(x, y), mask, x.shape, region)))


# ---------------------------------------------------------------------------
# reports

COLUMNS = ("RMSE", "RMSE-N", "RMSE-S", "SSIM", "SSIM-N", "SSIM-S", "PSNR", "PSNR-N", "PSNR-S")
EXTRA_COLUMNS = ("MAE", "MAE-N", "MAE-S")


@dataclass
class RegionSums:
    """Sufficient statistics for pooling one region across images."""

    pixels: int = 0
    lab_sq: float = 0.0
    lab_abs: float = 0.0
    rgb_sq: float = 0.0
    ssim_sum: float = 0.0
    ssim_count: int = 0


@dataclass
class MetricsReport:
    rmse_all: float
    rmse_nonshadow: float
    rmse_shadow: float
    ssim_all: float
    ssim_nonshadow: float
    ssim_shadow: float
    psnr_all: float
    psnr_nonshadow: float
    psnr_shadow: float
    mae_all: float = float("nan")
    mae_nonshadow: float = float("nan")
    mae_shadow: float = float("nan")
    n_shadow: int = 0
    n_nonshadow: int = 0
    sums: dict[str, RegionSums] = field(default_factory=dict, repr=False, compare=False)

    def column(self, name: str) -> float:
        metric, _, tag = name.partition("-")
        region = {"": "all", "N": "nonshadow", "S": "shadow"}[tag]
        return getattr(self, f"{metric.lower()}_{region}")

    def row(self, with_mae: bool = True) -> list[float]:
        cols = COLUMNS + (EXTRA_COLUMNS if with_mae else ())
        return [self.column(c) for c in cols]

    def as_dict(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("sums")
        return d


def evaluate_pair(pred, gt, mask, on_empty: str = "raise") -> MetricsReport:
    """RMSE, SSIM and PSNR for each region (plus LAB MAE) for one aligned triple.

    ``on_empty="nan"`` records NaN for an empty region instead of raising.
    """
    pred = _check_rgb(pred, "prediction")
    gt = _check_rgb(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    hw = pred.shape[-2:]
    m = _mask2d(mask, hw)
    lab_d = rgb_to_lab(pred) - rgb_to_lab(gt)
    rgb_d = pred - gt
    smap = ssim_map(luma(pred), luma(gt))
    values: dict[str, float] = {}
    sums: dict[str, RegionSums] = {}
    for region in REGIONS:
        sel = region_selector(m, hw, region)
        n = int(sel.sum())
        try:
            if n == 0:
                raise EmptyRegionError(f"region {region!r} contains no pixels")
            ld = lab_d[:, sel]
            rd = rgb_d[:, sel]
            svals = _ssim_region(smap, m, hw, region)
        except EmptyRegionError:
            if on_empty != "nan":
                raise
            for metric in ("rmse", "ssim", "psnr", "mae"):
                values[f"{metric}_{region}"] = float("nan")
            sums[region] = RegionSums(pixels=n)
            continue
        s = RegionSums(
            pixels=n,
            lab_sq=float(np.sum(ld * ld)),
            lab_abs=float(np.sum(np.abs(ld))),
            rgb_sq=float(np.sum(rd * rd)),
            ssim_sum=float(np.sum(svals)),
            ssim_count=int(svals.size),
        )
        sums[region] = s
        values[f"rmse_{region}"] = math.sqrt(s.lab_sq / (3 * n))
        values[f"mae_{region}"] = s.lab_abs / n
        values[f"psnr_{region}"] = psnr_from_mse(s.rgb_sq / (3 * n))
        values[f"ssim_{region}"] = s.ssim_sum / s.ssim_count
    return MetricsReport(**values, n_shadow=int(m.sum()), n_nonshadow=int((~m).sum()), sums=sums)


def aggregate_reports(reports: Sequence[MetricsReport], mode: str = "per_image") -> MetricsReport:
    """Dataset-level report: mean of per-image values (NaNs skipped), or pixel-pooled statistics."""
    if not reports:
        raise ContractError("no reports to aggregate")
    names = [f"{m}_{r}" for m in ("rmse", "ssim", "psnr", "mae") for r in REGIONS]
    n_shadow = sum(r.n_shadow for r in reports)
    n_non = sum(r.n_nonshadow for r in reports)
    if mode == "per_image":
        values = {}
        for name in names:
            col = np.array([getattr(r, name) for r in reports], dtype=np.float64)
            col = col[~np.isnan(col)]
            values[name] = float(np.sum(col) / col.size) if col.size else float("nan")
        return MetricsReport(**values, n_shadow=n_shadow, n_nonshadow=n_non)
    if mode != "pooled":
        raise ContractError(f"unknown aggregation mode {mode!r}")
    values = {}
    for region in REGIONS:
        tot = RegionSums()
        for r in reports:
            s = r.sums.get(region)
            if s is None or s.ssim_count == 0:
                continue
            tot.pixels += s.pixels
            tot.lab_sq += s.lab_sq
            tot.lab_abs += s.lab_abs
            tot.rgb_sq += s.rgb_sq
            tot.ssim_sum += s.ssim_sum
            tot.ssim_count += s.ssim_count
        if tot.pixels == 0:
            for metric in ("rmse", "ssim", "psnr", "mae"):
                values[f"{metric}_{region}"] = float("nan")
            continue
        values[f"rmse_{region}"] = math.sqrt(tot.lab_sq / (3 * tot.pixels))
        values[f"mae_{region}"] = tot.lab_abs / tot.pixels
        values[f"psnr_{region}"] = psnr_from_mse(tot.rgb_sq / (3 * tot.pixels))
        values[f"ssim_{region}"] = tot.ssim_sum / tot.ssim_count
    return MetricsReport(**values, n_shadow=n_shadow, n_nonshadow=n_non)


def format_table(rows: Iterable[tuple[str, MetricsReport]], with_mae: bool = True) -> str:
    cols = COLUMNS + (EXTRA_COLUMNS if with_mae else ())
    lines = [",".join(("image",) + cols)]
    for name, report in rows:
        lines.append(",".join([name] + [f"{v:.6f}" for v in report.row(with_mae)]))
    return "\n".join(lines) + "\n"


def format_key_values(report: MetricsReport, prefix: str = "") -> str:
    return "".join(f"{prefix}{k}={v}\n" for k, v in report.as_dict().items())
