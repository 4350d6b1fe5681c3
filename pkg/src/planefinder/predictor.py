"""Pose predictors: exact/capped/noisy oracles and the trained-network wrapper.

Every predictor is a callable ``predictor(volume, pose) -> PredictorOutput``
estimating the relative transform that moves the given plane pose onto the
target plane, expressed in the plane's own frame.  Oracles compute it from
the known ground truth and exist to exercise the inference machinery
independently of any learning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import compute_class_labels
from .transforms import (
    RigidTransform,
    inverse_compose,
    normalize_quat,
    quat_from_axis_angle,
    quat_multiply,
    rotation_angle_deg,
)
from .volume import Volume, extract_orthogonal_triplet, extract_plane

REPRESENTATION_MODES = ("quat", "euler", "matrix", "anchors")


@dataclass
class PredictorOutput:
    """Raw regression heads plus optional 6-way confidence vectors.

    Exactly one representation payload is set, matching ``mode``.  ``quat``,
    ``matrix`` and ``anchors`` are raw (pre-projection) values; the inference
    engine is responsible for projecting them back to valid rotations.
    ``trans_probs`` / ``rot_probs`` are the softmax confidence vectors over
    the signed translation / rotation axes, in class-index order.
    """

    mode: str = "quat"
    t: np.ndarray | None = None
    quat: np.ndarray | None = None
    euler: np.ndarray | None = None
    matrix: np.ndarray | None = None
    anchors: np.ndarray | None = None
    trans_probs: np.ndarray | None = None
    rot_probs: np.ndarray | None = None


def _one_hot(index: int) -> np.ndarray:
    v = np.zeros(6)
    v[index] = 1.0
    return v


def _cap_translation(t: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return t
    n = float(np.linalg.norm(t))
    if n <= max_norm or n == 0.0:
        return t
    return t * (max_norm / n)


def _cap_rotation(q: np.ndarray, max_angle_deg: float | None) -> np.ndarray:
    if max_angle_deg is None:
        return q
    angle = rotation_angle_deg(q)
    if angle <= max_angle_deg or angle == 0.0:
        return q
    axis = q[1:] / np.linalg.norm(q[1:])
    return quat_from_axis_angle(axis, max_angle_deg)


class ExactOracle:
    """Ground-truth predictor, optionally step-capped.

    With ``with_probs`` the output carries one-hot confidence vectors that
    match the class labels of its own (capped) delta, which routes inference
    through the confidence-weighted update; without, inference applies the
    plain normalize-and-compose update and a single uncapped step lands
    exactly on the target.
    """

    def __init__(
        self,
        t_gt: RigidTransform,
        cap_translation: float | None = None,
        cap_rotation_deg: float | None = None,
        with_probs: bool = False,
    ):
        self.t_gt = t_gt
        self.cap_translation = cap_translation
        self.cap_rotation_deg = cap_rotation_deg
        self.with_probs = with_probs

    def __call__(self, volume: Volume, current: RigidTransform) -> PredictorOutput:
        delta = inverse_compose(self.t_gt, current)
        t = _cap_translation(delta.translation, self.cap_translation)
        q = _cap_rotation(delta.rotation, self.cap_rotation_deg)
        out = PredictorOutput(mode="quat", t=t, quat=q)
        if self.with_probs:
            labels = compute_class_labels(RigidTransform(t, q))
            out.trans_probs = _one_hot(labels.c)
            out.rot_probs = _one_hot(labels.k)
        return out


class NoisyOracle:
    """Exact oracle perturbed by Gaussian translation and rotation noise.

    Rotation noise is a rotation about a uniformly random axis with
    N(0, sigma_theta) magnitude, composed after the exact delta.  Confidence
    vectors (when enabled) put mass 1 - eps on the class labels of the noisy
    output and spread eps uniformly over the remaining five classes.
    """

    def __init__(
        self,
        t_gt: RigidTransform,
        sigma_t: float,
        sigma_theta_deg: float,
        rng: np.random.Generator,
        label_eps: float = 0.0,
        cap_translation: float | None = None,
        cap_rotation_deg: float | None = None,
        with_probs: bool = False,
    ):
        if sigma_t < 0 or sigma_theta_deg < 0:
            raise ValueError("noise magnitudes must be >= 0")
        self.exact = ExactOracle(t_gt, cap_translation, cap_rotation_deg, with_probs=False)
        self.sigma_t = sigma_t
        self.sigma_theta_deg = sigma_theta_deg
        self.rng = rng
        self.label_eps = label_eps
        self.with_probs = with_probs

    def __call__(self, volume: Volume, current: RigidTransform) -> PredictorOutput:
        base = self.exact(volume, current)
        t = base.t + self.rng.normal(0.0, self.sigma_t, size=3) if self.sigma_t > 0 else base.t
        q = base.quat
        if self.sigma_theta_deg > 0:
            axis = self.rng.normal(size=3)
            while np.linalg.norm(axis) < 1e-12:
                axis = self.rng.normal(size=3)
            angle = self.rng.normal(0.0, self.sigma_theta_deg)
            q = normalize_quat(quat_multiply(q, quat_from_axis_angle(axis, angle)))
        out = PredictorOutput(mode="quat", t=t, quat=q)
        if self.with_probs:
            labels = compute_class_labels(RigidTransform(t, normalize_quat(q)))
            eps = self.label_eps
            out.trans_probs = np.full(6, eps / 5.0)
            out.trans_probs[labels.c] = 1.0 - eps
            out.rot_probs = np.full(6, eps / 5.0)
            out.rot_probs[labels.k] = 1.0 - eps
        return out


class NetworkPredictor:
    """Adapts a trained regressor to the predictor protocol.

    Extracts the plane image (or orthogonal triplet) at the queried pose and
    runs the network forward pass.
    """

    def __init__(self, model):
        self.model = model

    def __call__(self, volume: Volume, current: RigidTransform) -> PredictorOutput:
        if self.model.triplet:
            image = extract_orthogonal_triplet(volume, current, self.model.input_size)
        else:
            image = extract_plane(volume, current, self.model.input_size)
        return self.model.forward(image)
