"""Isotropic scalar volumes and oblique-plane extraction by trilinear sampling.

The world frame has its origin at the volume centre, axes aligned with the
voxel grid, and 1 voxel = 1 mm.  A plane pose maps plane-local (u, v, 0)
coordinates into that frame; the identity pose is the axis-aligned plane
through the volume centre with u along world x and v along world y.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transforms import RigidTransform, compose, quat_from_axis_angle

_X90 = quat_from_axis_angle([1.0, 0.0, 0.0], 90.0)
_Y90 = quat_from_axis_angle([0.0, 1.0, 0.0], 90.0)


@dataclass(frozen=True)
class Volume:
    """3D scalar grid, indexed data[x, y, z], with isotropic spacing."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {arr.ndim} dims")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def centre_offset(self) -> np.ndarray:
        """Index-space position of the world origin: (dims - 1) / 2."""
        return (np.asarray(self.dims, dtype=float) - 1.0) / 2.0


def identity_plane(volume: Volume) -> RigidTransform:
    """Pose of the axis-aligned plane through the volume centre."""
    return RigidTransform.identity()


def plane_pixel_to_world(transform: RigidTransform, size: int, i: int, j: int) -> np.ndarray:
    """World position of pixel (row i, col j) of an s x s plane at the pose.

    The plane-local point is (u, v, 0) with u = j - (s-1)/2 and
    v = (s-1)/2 - i, so row s-1 is the bottom of the image and the corners
    match the anchor-point convention.
    """
    half = (size - 1) / 2.0
    return transform.apply(np.array([j - half, half - i, 0.0]))


def _plane_grid_world(transform: RigidTransform, size: int) -> np.ndarray:
    """(s, s, 3) world coordinates of every pixel centre."""
    half = (size - 1) / 2.0
    u = np.arange(size) - half
    v = half - np.arange(size)
    local = np.zeros((size, size, 3))
    local[:, :, 0] = u[None, :]
    local[:, :, 1] = v[:, None]
    return local @ transform.matrix().T + transform.translation


def trilinear_sample(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``data`` at index-space ``points`` (..., 3).

    Points outside [0, n-1] on any axis return 0.0.
    """
    pts = np.asarray(points, dtype=float)
    dims = np.asarray(data.shape)
    inside = np.all((pts >= 0.0) & (pts <= dims - 1.0), axis=-1)

    base = np.clip(np.floor(pts).astype(np.intp), 0, np.maximum(dims - 2, 0))
    frac = np.clip(pts - base, 0.0, 1.0)

    x0, y0, z0 = base[..., 0], base[..., 1], base[..., 2]
    x1 = np.minimum(x0 + 1, dims[0] - 1)
    y1 = np.minimum(y0 + 1, dims[1] - 1)
    z1 = np.minimum(z0 + 1, dims[2] - 1)
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]

    c00 = data[x0, y0, z0] * (1 - fx) + data[x1, y0, z0] * fx
    c10 = data[x0, y1, z0] * (1 - fx) + data[x1, y1, z0] * fx
    c01 = data[x0, y0, z1] * (1 - fx) + data[x1, y0, z1] * fx
    c11 = data[x0, y1, z1] * (1 - fx) + data[x1, y1, z1] * fx
    values = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz
    return np.where(inside, values, 0.0)


def extract_plane(volume: Volume, transform: RigidTransform, size: int) -> np.ndarray:
    """Resample the s x s plane image at the given pose (out-of-volume -> 0)."""
    if size < 2:
        raise ValueError("plane size must be at least 2")
    world = _plane_grid_world(transform, size)
    return trilinear_sample(volume.data, world + volume.centre_offset)


def extract_orthogonal_triplet(volume: Volume, transform: RigidTransform, size: int) -> np.ndarray:
    """Stack (3, s, s): the plane plus its 90-degree tilts about local u and v."""
    poses = (
        transform,
        compose(transform, RigidTransform(np.zeros(3), _X90)),
        compose(transform, RigidTransform(np.zeros(3), _Y90)),
    )
    return np.stack([extract_plane(volume, p, size) for p in poses])


# --- VOL1 file format -----------------------------------------------------
# <name>.vol holds raw little-endian float32, x-fastest; <name>.vol.json is
# the sidecar {"dims": [nx, ny, nz], "spacing": 1.0, "dtype": "f32le"}.

def write_volume(path, volume: Volume) -> None:
    path = Path(path)
    sidecar = {"dims": list(volume.dims), "spacing": volume.spacing, "dtype": "f32le"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar) + "\n")
    # x-fastest layout: transpose so x is the last (fastest) C axis
    volume.data.astype("<f4").transpose(2, 1, 0).tofile(path)


def read_volume(path) -> Volume:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("dtype") != "f32le":
        raise ValueError(f"unsupported volume dtype {sidecar.get('dtype')!r}")
    nx, ny, nz = (int(d) for d in sidecar["dims"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != nx * ny * nz:
        raise ValueError(f"volume payload has {raw.size} values, expected {nx * ny * nz}")
    data = raw.reshape(nz, ny, nx).transpose(2, 1, 0).astype(float)
    return Volume(data, spacing=float(sidecar.get("spacing", 1.0)))


# --- plane image export ----------------------------------------------------

def write_plane_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM of a min-max normalized plane image (for inspection)."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_plane_raw(path, image: np.ndarray) -> None:
    """Raw little-endian float32 dump of a plane image (row-major)."""
    np.asarray(image, dtype="<f4").tofile(path)


def read_plane_raw(path, size: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != size * size:
        raise ValueError(f"plane payload has {raw.size} values, expected {size * size}")
    return raw.reshape(size, size).astype(float)
