"""Plane evaluation measures: centre distance, rotation angles, PSNR, SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .transforms import RigidTransform, geodesic_angle, quat_rotate
from .volume import Volume, extract_plane

PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass(frozen=True)
class PlaneEvalResult:
    """Errors of a predicted plane against ground truth.

    dx is in voxels (=mm), angles in degrees; dtheta is the geodesic angle of
    the relative rotation, normal_angle the angle between the plane normals
    only.  psnr/ssim compare the two extracted images after joint min-max
    normalization.
    """

    dx: float
    dtheta: float
    normal_angle: float
    psnr: float
    ssim: float


def normalize_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jointly min-max normalize two images to [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = min(float(a.min()), float(b.min()))
    hi = max(float(a.max()), float(b.max()))
    if hi <= lo:
        return np.zeros_like(a), np.zeros_like(b)
    return (a - lo) / (hi - lo), (b - lo) / (hi - lo)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of img with a (w, w) kernel."""
    w = kernel.shape[0]
    s = img.strides
    h = img.shape[0] - w + 1
    wd = img.shape[1] - w + 1
    patches = np.lib.stride_tricks.as_strided(img, (h, wd, w, w), (s[0], s[1], s[0], s[1]))
    return np.tensordot(patches, kernel, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Uses the standard constants K1=0.01, K2=0.03 with dynamic range 1, so
    inputs should be normalized to [0, 1] first.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW} pixels per side for SSIM")
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _windowed(a, kernel)
    mu_b = _windowed(b, kernel)
    var_a = _windowed(a * a, kernel) - mu_a**2
    var_b = _windowed(b * b, kernel) - mu_b**2
    cov = _windowed(a * b, kernel) - mu_a * mu_b
    c1 = (_SSIM_K1) ** 2
    c2 = (_SSIM_K2) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def normal_angle_deg(q1: np.ndarray, q2: np.ndarray) -> float:
    """Angle between the two planes' normals (rotated local z axes)."""
    z = np.array([0.0, 0.0, 1.0])
    n1 = quat_rotate(q1, z)
    n2 = quat_rotate(q2, z)
    d = max(-1.0, min(1.0, float(np.dot(n1, n2))))
    return math.degrees(math.acos(d))


def evaluate_plane(
    t_pred: RigidTransform,
    t_gt: RigidTransform,
    volume: Volume,
    size: int,
) -> PlaneEvalResult:
    """All evaluation measures of a predicted pose against the ground truth."""
    dx = float(np.linalg.norm(t_pred.translation - t_gt.translation))
    dtheta = geodesic_angle(t_pred.rotation, t_gt.rotation)
    n_angle = normal_angle_deg(t_pred.rotation, t_gt.rotation)
    img_pred = extract_plane(volume, t_pred, size)
    img_gt = extract_plane(volume, t_gt, size)
    a, b = normalize_pair(img_pred, img_gt)
    return PlaneEvalResult(dx, dtheta, n_angle, psnr(a, b), ssim(a, b))


METRIC_FIELDS = ("dx", "dtheta", "psnr", "ssim")
REPORT_COLUMNS = (
    "model_id",
    "plane_class",
    "n",
    "dx_mean",
    "dx_std",
    "dtheta_mean",
    "dtheta_std",
    "psnr_mean",
    "psnr_std",
    "ssim_mean",
    "ssim_std",
)


def aggregate(results: list[PlaneEvalResult]) -> dict[str, float]:
    """Mean and population standard deviation of each reported metric."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    out = {"n": len(results)}
    for name in METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in results], dtype=float)
        out[f"{name}_mean"] = float(values.mean())
        out[f"{name}_std"] = float(values.std())  # population std
    return out


def report_row(model_id: str, plane_class: str, results: list[PlaneEvalResult]) -> dict:
    row = {"model_id": model_id, "plane_class": plane_class}
    row.update(aggregate(results))
    return row


def write_report_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in REPORT_COLUMNS:
                value = row[col]
                cells.append(f"{value:.9g}" if isinstance(value, float) else str(value))
            fh.write(",".join(cells) + "\n")
