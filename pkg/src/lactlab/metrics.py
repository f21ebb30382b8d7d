"""Image-quality metrics: MAE, windowed SSIM and their central-ROI variants.

Metrics are computed in HU. SSIM follows the usual defaults of a 7x7
uniform window, K1=0.01, K2=0.03, sample (N-1) covariance and averaging
only over window positions fully inside the image, with a data range of
2000 HU (the clipped [-1000, 1000] range).
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .tomo import HU_MAX, HU_MIN

DATA_RANGE_HU = HU_MAX - HU_MIN
WINDOW = 7
K1, K2 = 0.01, 0.03

CSV_FIELDS = ("case_id", "theta_r", "mae", "ssim", "mae_roi", "ssim_roi")


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgument(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def mae(x, y):
    """Mean absolute difference. For a stack of slices, the mean over slices."""
    x, y = _check_pair(x, y)
    return float(np.abs(x - y).mean())


def _box_means(img, win):
    v = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return v.mean(axis=(-2, -1))


def ssim(x, y, data_range=DATA_RANGE_HU, win=WINDOW):
    x, y = _check_pair(x, y)
    if x.ndim != 2:
        raise InvalidArgument("ssim expects 2-D images")
    if min(x.shape) < win:
        raise InvalidArgument(f"image {x.shape} smaller than the {win}x{win} window")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    n = win * win
    cov_norm = n / (n - 1.0)
    ux, uy = _box_means(x, win), _box_means(y, win)
    uxx, uyy, uxy = _box_means(x * x, win), _box_means(y * y, win), _box_means(x * y, win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float((num / den).mean())


def roi_crop(x, size=None):
    """Central ``size`` x ``size`` window of the last two axes.

    Defaults to half the image (512 -> 256, 64 -> 32).
    """
    x = np.asarray(x)
    H, W = x.shape[-2:]
    if size is None:
        if H % 2 or W % 2:
            raise InvalidArgument("roi_crop needs even image sizes")
        size = H // 2
    if size > min(H, W) or (H - size) % 2 or (W - size) % 2:
        raise InvalidArgument(f"cannot centre a {size} crop in {H}x{W}")
    r, c = (H - size) // 2, (W - size) // 2
    return x[..., r:r + size, c:c + size]


@dataclass
class MetricReport:
    mae_hu: float
    ssim: float
    mae_roi_hu: float
    ssim_roi: float
    per_slice: dict = field(default_factory=dict)

    def row(self, case_id, theta_r):
        return {"case_id": case_id, "theta_r": theta_r, "mae": self.mae_hu,
                "ssim": self.ssim, "mae_roi": self.mae_roi_hu, "ssim_roi": self.ssim_roi}


def evaluate_case(sct, ref):
    """Per-slice metrics in HU for two normalized volumes, median-aggregated."""
    if sct.shape != ref.shape:
        raise InvalidArgument(f"shape mismatch {sct.shape} vs {ref.shape}")
    for v in (sct, ref):
        if v.value_domain != "normalized":
            raise InvalidArgument("evaluate_case expects normalized volumes")
    a = sct.voxels.astype(np.float64) * HU_MAX
    b = ref.voxels.astype(np.float64) * HU_MAX
    per = {"mae": [], "ssim": [], "mae_roi": [], "ssim_roi": []}
    for sa, sb in zip(a, b):
        per["mae"].append(mae(sa, sb))
        per["ssim"].append(ssim(sa, sb))
        ra, rb = roi_crop(sa), roi_crop(sb)
        per["mae_roi"].append(mae(ra, rb))
        per["ssim_roi"].append(ssim(ra, rb))
    per = {k: np.asarray(v) for k, v in per.items()}
    return MetricReport(float(np.median(per["mae"])), float(np.median(per["ssim"])),
                        float(np.median(per["mae_roi"])), float(np.median(per["ssim_roi"])), per)


def write_report_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
