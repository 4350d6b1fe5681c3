"""Iterative plane inference: refinement loop, confidence-weighted updates,
and multi-initialization averaging.

Each iteration asks the predictor for a relative transform at the current
pose and composes it on in the plane's own frame.  When the prediction
carries 6-way confidence vectors, the update is reweighted: translation
components are scaled by the larger of each axis' two signed-class
probabilities, and rotation is collapsed to a single rotation about the most
confident axis, with magnitude taken from the matching Euler decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantom import AXIS_CONVENTIONS, sample_random_transform
from .predictor import PredictorOutput
from .transforms import (
    RigidTransform,
    anchors_to_transform,
    compose,
    euler_to_quat,
    geodesic_angle,
    inverse_compose,
    matrix_to_quat,
    normalize_quat,
    orthogonalize_matrix,
    quat_from_axis_angle,
    quat_to_euler,
    rotation_angle_deg,
)
from .volume import Volume

_AXIS_UNITS = (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))


class PredictorFailure(RuntimeError):
    """Predictor raised during the refinement loop; carries the iteration."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"predictor failed at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class InferenceConfig:
    iterations: int = 10  # refinement steps per run
    plane_size: int = 32
    init_count: int = 5  # independent random initializations to average
    seed: int = 0
    log_trajectory: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.init_count < 1:
            raise ValueError("iterations and init_count must be >= 1")


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    transform: RigidTransform
    dx: float | None = None
    dtheta: float | None = None


def weighted_translation(t: np.ndarray, trans_probs: np.ndarray) -> np.ndarray:
    """Scale each translation component by its axis' larger class probability."""
    p = np.asarray(trans_probs, dtype=float)
    scale = np.maximum(p[0::2], p[1::2])
    return np.asarray(t, dtype=float) * scale


def confidence_rotation(q: np.ndarray, rot_probs: np.ndarray) -> np.ndarray:
    """Single-axis rotation about the most confident axis.

    The winning axis selects the Euler convention that applies that axis
    first; the rotation magnitude is the winning probability times the
    first-applied angle.  Ties resolve in class-index order (x before y
    before z, positive before negative).
    """
    probs = np.asarray(rot_probs, dtype=float)
    winner = int(np.argmax(probs))
    q_max = float(probs[winner])
    axis = winner // 2
    angles = quat_to_euler(q, AXIS_CONVENTIONS[axis]).angles
    return quat_from_axis_angle(_AXIS_UNITS[axis], q_max * float(angles[axis]))


def confidence_update(
    t: np.ndarray,
    q: np.ndarray,
    trans_probs: np.ndarray,
    rot_probs: np.ndarray,
) -> RigidTransform:
    """Confidence-weighted relative transform from (t, q, P, Q)."""
    return RigidTransform(
        weighted_translation(t, trans_probs),
        confidence_rotation(q, rot_probs),
    )


def delta_from_output(output: PredictorOutput, plane_size: int) -> RigidTransform:
    """Turn a raw prediction into a valid relative transform.

    Routes through the confidence-weighted update when probability vectors
    are present, otherwise projects the representation back onto a valid
    rotation (normalize / orthogonalize / anchor-frame reconstruction).
    """
    if output.mode == "anchors":
        return anchors_to_transform(np.asarray(output.anchors, dtype=float).reshape(3, 3), plane_size)
    t = np.asarray(output.t, dtype=float)
    if output.mode == "quat":
        q = normalize_quat(output.quat)
        if output.trans_probs is not None:
            t = weighted_translation(t, output.trans_probs)
        if output.rot_probs is not None:
            q = confidence_rotation(q, output.rot_probs)
        return RigidTransform(t, q)
    if output.mode == "euler":
        return RigidTransform(t, euler_to_quat(output.euler, "xyz"))
    if output.mode == "matrix":
        m = orthogonalize_matrix(np.asarray(output.matrix, dtype=float).reshape(3, 3))
        return RigidTransform(t, matrix_to_quat(m))
    raise ValueError(f"unknown representation mode {output.mode!r}")


def _errors_to(transform: RigidTransform, t_gt: RigidTransform | None):
    if t_gt is None:
        return None, None
    dx = float(np.linalg.norm(transform.translation - t_gt.translation))
    return dx, geodesic_angle(transform.rotation, t_gt.rotation)


def infer_plane(
    volume: Volume,
    predictor,
    cfg: InferenceConfig,
    t_init: RigidTransform,
    t_gt: RigidTransform | None = None,
) -> tuple[RigidTransform, list[TrajectoryPoint]]:
    """Run the fixed-length refinement loop from one initial pose.

    ``t_gt`` is used only to annotate the trajectory with per-iteration
    errors; the update path never sees it.
    """
    current = t_init
    trajectory = [TrajectoryPoint(0, current, *_errors_to(current, t_gt))]
    for i in range(1, cfg.iterations + 1):
        try:
            output = predictor(volume, current)
        except Exception as exc:
            raise PredictorFailure(i, exc) from exc
        delta = delta_from_output(output, cfg.plane_size)
        current = compose(current, delta)
        trajectory.append(TrajectoryPoint(i, current, *_errors_to(current, t_gt)))
    return current, trajectory


def average_transforms(transforms: list[RigidTransform]) -> RigidTransform:
    """Mean pose: arithmetic translation mean, sign-aligned quaternion mean."""
    if not transforms:
        raise ValueError("cannot average an empty list of transforms")
    t_mean = np.mean([t.translation for t in transforms], axis=0)
    ref = transforms[0].rotation
    quats = np.array([
        t.rotation if np.dot(t.rotation, ref) >= 0 else -t.rotation for t in transforms
    ])
    return RigidTransform(t_mean, normalize_quat(quats.sum(axis=0)))


def _last_step_size(trajectory: list[TrajectoryPoint]) -> float:
    """Translation-plus-angle norm of the final predicted step."""
    if len(trajectory) < 2:
        return 0.0
    delta = inverse_compose(trajectory[-1].transform, trajectory[-2].transform)
    return float(np.linalg.norm(delta.translation)) + rotation_angle_deg(delta.rotation)


@dataclass(frozen=True)
class MultiInitResult:
    transform: RigidTransform
    trajectories: list[list[TrajectoryPoint]] = field(repr=False)
    low_confidence: bool = False


# a run that has settled onto the target keeps predicting near-zero steps;
# runs still wandering at the last iteration predict much larger ones
_SETTLED_STEP = 1.0  # voxels-plus-degrees; below this a run counts as settled


def multi_init_infer(
    volume: Volume,
    predictor,
    cfg: InferenceConfig,
    t_gt: RigidTransform | None = None,
) -> MultiInitResult:
    """Average the refinement loop over cfg.init_count random initial poses.

    Runs whose final plane centre drifts outside the volume bounding box are
    dropped from the average, as are runs that were still taking large
    predicted steps at the end when other runs had settled (their final step
    size gives a ground-truth-free convergence signal).  If every run is
    dropped, the run that ended with the smallest predicted step is
    returned, flagged low-confidence.
    """
    rng = np.random.default_rng(cfg.seed)
    inits = [sample_random_transform(volume, rng) for _ in range(cfg.init_count)]
    finals = []
    trajectories = []
    for t_init in inits:
        final, traj = infer_plane(volume, predictor, cfg, t_init, t_gt)
        finals.append(final)
        trajectories.append(traj)

    half = (np.asarray(volume.dims, dtype=float) - 1.0) / 2.0
    steps = [_last_step_size(traj) for traj in trajectories]
    in_box = [bool(np.all(np.abs(t.translation) <= half)) for t in finals]
    boxed_steps = [s for s, ib in zip(steps, in_box) if ib]
    if boxed_steps:
        cutoff = max(_SETTLED_STEP, 3.0 * min(boxed_steps))
        kept = [t for t, s, ib in zip(finals, steps, in_box) if ib and s <= cutoff]
        if kept:
            return MultiInitResult(average_transforms(kept), trajectories)
    steadiest = int(np.argmin(steps))
    return MultiInitResult(finals[steadiest], trajectories, low_confidence=True)


def write_trajectories_csv(path, trajectories: list[list[TrajectoryPoint]]) -> None:
    """CSV export: one row per (run, iteration), errors blank without GT."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("run_id,iter,tx,ty,tz,qw,qx,qy,qz,dx,dtheta\n")
        for run_id, traj in enumerate(trajectories):
            for point in traj:
                t, q = point.transform.translation, point.transform.rotation
                dx = "" if point.dx is None else f"{point.dx:.9g}"
                dth = "" if point.dtheta is None else f"{point.dtheta:.9g}"
                values = ",".join(f"{v:.17g}" for v in (*t, *q))
                fh.write(f"{run_id},{point.iteration},{values},{dx},{dth}\n")
