"""Synthetic blob phantoms with an exactly known target-plane pose.

A phantom is a sum of Gaussian blobs whose positions are fixed in the target
plane's coordinate frame, masked by an ellipsoid inscribed in the volume, with
optional additive noise.  Because the blob constellation is asymmetric, the
map from plane pose to extracted image is injective enough to regress poses
from single slices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .transforms import (
    RigidTransform,
    euler_to_quat,
    inverse_compose,
    quat_to_euler,
)
from .volume import Volume, extract_orthogonal_triplet, extract_plane

# class index order: (x+, x-, y+, y-, z+, z-) for both translation (c) and
# rotation (k) labels.
CLASS_NAMES_TRANSLATION = ("c1+", "c1-", "c2+", "c2-", "c3+", "c3-")
CLASS_NAMES_ROTATION = ("k1+", "k1-", "k2+", "k2-", "k3+", "k3-")

# per-axis convention whose first-applied rotation is that axis; used both for
# the rotation class labels and for the confidence-weighted update.
AXIS_CONVENTIONS = ("xyz", "yxz", "zxy")


@dataclass(frozen=True)
class Blob:
    """One Gaussian blob: offset in the target plane's frame, amplitude, width."""

    offset: tuple[float, float, float]
    amplitude: float
    width: float


# An asymmetric 9-blob constellation: no nontrivial rotation maps the
# attributed offset set to itself. Four narrow blobs in the target plane act
# as landmarks; five broad off-plane blobs fill the head ellipsoid so every
# sampled slice sees pose-dependent structure (slices of a sparse narrow-blob
# constellation are mostly empty, which starves pose regression of signal).
_DEFAULT_BLOBS = (
    Blob((0.0, 0.0, 0.0), 1.0, 3.0),
    Blob((10.0, 3.0, 0.0), 0.8, 2.5),
    Blob((-7.0, 9.0, 0.0), 0.6, 12.0),
    Blob((4.0, -11.0, 0.0), 0.9, 4.0),
    Blob((-13.0, -5.0, 0.0), 0.5, 10.0),
    Blob((6.0, 7.0, 8.0), 0.7, 12.0),
    Blob((-9.0, 2.0, -12.0), 0.45, 10.0),
    Blob((2.0, -14.0, 6.0), 0.35, 14.0),
    Blob((-3.0, 12.0, -7.0), 0.85, 8.0),
)

# A second constellation so experiments can model two distinct target-plane
# classes as independent phantom families.
_COMPACT_BLOBS = (
    Blob((0.0, 0.0, 0.0), 1.0, 2.5),
    Blob((6.0, -2.0, 0.0), 0.75, 2.0),
    Blob((-4.0, 7.0, 0.0), 0.55, 3.0),
    Blob((-8.0, -6.0, 0.0), 0.9, 9.0),
    Blob((3.0, 9.0, 5.0), 0.65, 11.0),
    Blob((-2.0, -9.0, -4.0), 0.4, 13.0),
    Blob((9.0, 4.0, -6.0), 0.8, 10.0),
)

BLOB_LAYOUTS = {"default": _DEFAULT_BLOBS, "compact": _COMPACT_BLOBS}


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom volume; fully determines it together with seed."""

    dims: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    layout: str = "default"
    noise_sigma: float = 0.01
    blobs: tuple[Blob, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 32 for d in self.dims):
            raise ValueError("invalid phantom spec: dims must each be >= 32")
        if self.noise_sigma < 0:
            raise ValueError("invalid phantom spec: noise_sigma must be >= 0")
        if not self.blobs:
            if self.layout not in BLOB_LAYOUTS:
                raise ValueError(f"invalid phantom spec: unknown layout {self.layout!r}")
            object.__setattr__(self, "blobs", BLOB_LAYOUTS[self.layout])
        else:
            object.__setattr__(
                self, "blobs", tuple(Blob(tuple(b.offset), b.amplitude, b.width) for b in self.blobs)
            )
        if any(b.width <= 0 for b in self.blobs):
            raise ValueError("invalid phantom spec: blob widths must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        raw = json.loads(text)
        blobs = tuple(Blob(tuple(b["offset"]), b["amplitude"], b["width"]) for b in raw.get("blobs", []))
        return cls(
            dims=tuple(raw.get("dims", (64, 64, 64))),
            seed=int(raw.get("seed", 0)),
            layout=raw.get("layout", "default"),
            noise_sigma=float(raw.get("noise_sigma", 0.01)),
            blobs=blobs,
        )

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        return cls.from_json(Path(path).read_text())


def sample_random_transform(volume: Volume, rng: np.random.Generator) -> RigidTransform:
    """Draw a plane pose with centre in the middle 60% of the volume and
    rotation within +/-45 degrees about each axis (xyz Euler convention)."""
    return _sample_pose_for_dims(np.asarray(volume.dims, dtype=float), rng)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, RigidTransform]:
    """Build the phantom volume and its ground-truth plane pose.

    Deterministic given the spec: the seed drives first the pose draw, then
    the noise field.  Raises if every blob centre lands outside the ellipsoid
    mask (such a phantom would carry no pose information).
    """
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=float)
    t_gt = _sample_pose_for_dims(dims, rng)

    centre = (dims - 1.0) / 2.0
    frame = t_gt.matrix()
    centres_world = np.array([frame @ np.asarray(b.offset) + t_gt.translation for b in spec.blobs])
    centres_index = centres_world + centre

    semi = 0.95 * (dims - 1.0) / 2.0
    if not np.any(np.sum(((centres_index - centre) / semi) ** 2, axis=1) <= 1.0):
        raise ValueError("invalid phantom spec: blob constellation lies entirely outside the head ellipsoid")

    x = np.arange(spec.dims[0], dtype=float)
    y = np.arange(spec.dims[1], dtype=float)
    z = np.arange(spec.dims[2], dtype=float)
    gx, gy, gz = np.meshgrid(x, y, z, indexing="ij")
    data = np.zeros(spec.dims)
    for blob, c in zip(spec.blobs, centres_index):
        r2 = (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2
        data += blob.amplitude * np.exp(-r2 / (2.0 * blob.width**2))

    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=spec.dims)

    mask = (
        ((gx - centre[0]) / semi[0]) ** 2
        + ((gy - centre[1]) / semi[1]) ** 2
        + ((gz - centre[2]) / semi[2]) ** 2
    ) <= 1.0
    data[~mask] = 0.0
    return Volume(data), t_gt


def _sample_pose_for_dims(dims: np.ndarray, rng: np.random.Generator) -> RigidTransform:
    translation = rng.uniform(-0.3 * dims, 0.3 * dims)
    angles = rng.uniform(-45.0, 45.0, size=3)
    return RigidTransform(translation, euler_to_quat(angles, "xyz"))


@dataclass(frozen=True)
class ClassLabels:
    """Dominant signed translation axis and rotation axis of a pose delta."""

    c: int  # index into CLASS_NAMES_TRANSLATION
    k: int  # index into CLASS_NAMES_ROTATION
    degenerate: bool = False


def _dominant_signed_axis(values: np.ndarray) -> tuple[int, bool]:
    """Class index of the largest-|value| axis; ties go x->y->z, + before -."""
    mags = np.abs(values)
    axis = int(np.argmax(mags))  # first occurrence wins the tie
    if mags[axis] == 0.0:
        return 0, True
    sign_neg = values[axis] < 0.0
    return 2 * axis + int(sign_neg), False


def compute_class_labels(delta: RigidTransform) -> ClassLabels:
    """Classification targets for a relative transform.

    The translation class is the axis of largest absolute displacement.  The
    rotation class comes from decomposing the rotation under each per-axis
    Euler convention and comparing the first-applied angles, mirroring how the
    confidence-weighted update later consumes the prediction.
    """
    c, c_degen = _dominant_signed_axis(delta.translation)
    first_angles = np.array([
        quat_to_euler(delta.rotation, conv).angles[axis]
        for axis, conv in enumerate(AXIS_CONVENTIONS)
    ])
    k, k_degen = _dominant_signed_axis(first_angles)
    return ClassLabels(c, k, degenerate=c_degen or k_degen)


@dataclass(frozen=True)
class TrainingSample:
    """One supervised example: image(s), pose delta to the target, labels."""

    image: np.ndarray  # (s, s) or (3, s, s) in triplet mode
    delta_gt: RigidTransform
    c_gt: int
    k_gt: int
    degenerate: bool = False


def make_training_sample(
    volume: Volume,
    t_gt: RigidTransform,
    size: int,
    rng: np.random.Generator,
    triplet: bool = False,
) -> TrainingSample:
    """Sample a random plane, extract its image and label the delta to GT."""
    t = sample_random_transform(volume, rng)
    image = (
        extract_orthogonal_triplet(volume, t, size) if triplet else extract_plane(volume, t, size)
    )
    delta = inverse_compose(t_gt, t)
    labels = compute_class_labels(delta)
    return TrainingSample(image, delta, labels.c, labels.k, labels.degenerate)
