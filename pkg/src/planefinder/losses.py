"""Multi-task training losses and their gradients.

The regression part is a squared L2 error in whichever representation the
model regresses (the quaternion is normalized inside the loss); with the
classification heads enabled, cross-entropy terms over the dominant-axis
labels are added.  Gradients are returned with respect to the raw head
outputs (pre-normalization values, pre-softmax logits) so the network
backward pass can consume them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import softmax
from .phantom import TrainingSample
from .predictor import PredictorOutput
from .transforms import quat_to_euler, quat_to_matrix, transform_to_anchors

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossTerms:
    """Loss value split by term (classification terms zero when disabled)."""

    total: float
    translation: float
    rotation: float
    cls_t: float
    cls_r: float


def regression_targets(sample: TrainingSample, mode: str) -> dict[str, np.ndarray]:
    """Target vectors for one sample's raw heads, per representation mode."""
    delta = sample.delta_gt
    if mode == "anchors":
        size = sample.image.shape[-1]
        return {"anchors": transform_to_anchors(delta, size).ravel()}
    targets = {"t": delta.translation}
    if mode == "quat":
        targets["rot"] = delta.rotation
    elif mode == "euler":
        targets["rot"] = quat_to_euler(delta.rotation, "xyz").angles
    elif mode == "matrix":
        targets["rot"] = quat_to_matrix(delta.rotation).ravel()
    else:
        raise ValueError(f"unknown representation mode {mode!r}")
    return targets


def stack_targets(samples: list[TrainingSample], mode: str) -> dict[str, np.ndarray]:
    per = [regression_targets(s, mode) for s in samples]
    stacked = {key: np.stack([p[key] for p in per]) for key in per[0]}
    stacked["c"] = np.array([s.c_gt for s in samples], dtype=int)
    stacked["k"] = np.array([s.k_gt for s in samples], dtype=int)
    return stacked


def _l2_term(pred: np.ndarray, target: np.ndarray, weight: float):
    diff = pred - target
    per_sample = np.sum(diff * diff, axis=-1)
    return weight * per_sample, 2.0 * weight * diff


def _quat_term(raw_q: np.ndarray, target: np.ndarray, weight: float):
    norms = np.linalg.norm(raw_q, axis=-1, keepdims=True)
    unit = raw_q / norms
    err = unit - target
    per_sample = weight * np.sum(err * err, axis=-1)
    # d(unit)/d(raw) = (I - unit unit^T) / norm, applied to the error
    proj = err - unit * np.sum(unit * err, axis=-1, keepdims=True)
    return per_sample, 2.0 * weight * proj / norms


def _cross_entropy_term(probs: np.ndarray, labels: np.ndarray, weight: float):
    picked = np.maximum(probs[np.arange(len(labels)), labels], _PROB_FLOOR)
    per_sample = -weight * np.log(picked)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return per_sample, weight * dlogits


def batch_loss(
    raw: dict[str, np.ndarray],
    targets: dict[str, np.ndarray],
    weights: tuple[float, float, float, float],
    mode: str,
):
    """Mean loss over a batch of raw head outputs, plus d(mean)/d(raw).

    ``raw`` maps head name to (B, dim) arrays; classification heads carry
    logits.  Returns (LossTerms, gradients keyed like ``raw``).
    """
    alpha, beta, gamma, delta = weights
    batch = next(iter(raw.values())).shape[0]
    draw: dict[str, np.ndarray] = {}
    t_term = np.zeros(batch)
    r_term = np.zeros(batch)
    ct_term = np.zeros(batch)
    cr_term = np.zeros(batch)

    if mode == "anchors":
        r_term, draw["anchors"] = _l2_term(raw["anchors"], targets["anchors"], 1.0)
    else:
        t_term, draw["t"] = _l2_term(raw["t"], targets["t"], alpha)
        if mode == "quat":
            r_term, draw["rot"] = _quat_term(raw["rot"], targets["rot"], beta)
        else:
            r_term, draw["rot"] = _l2_term(raw["rot"], targets["rot"], beta)

    if "cls_t" in raw:
        ct_term, draw["cls_t"] = _cross_entropy_term(softmax(raw["cls_t"]), targets["c"], gamma)
    if "cls_r" in raw:
        cr_term, draw["cls_r"] = _cross_entropy_term(softmax(raw["cls_r"]), targets["k"], delta)

    for key in draw:
        draw[key] = draw[key] / batch
    terms = LossTerms(
        total=float(np.mean(t_term + r_term + ct_term + cr_term)),
        translation=float(np.mean(t_term)),
        rotation=float(np.mean(r_term)),
        cls_t=float(np.mean(ct_term)),
        cls_r=float(np.mean(cr_term)),
    )
    return terms, draw


def _output_raw(output: PredictorOutput) -> dict[str, np.ndarray]:
    if output.mode == "anchors":
        return {"anchors": np.asarray(output.anchors, dtype=float).reshape(1, 9)}
    raw = {"t": np.asarray(output.t, dtype=float)[None]}
    payload = {"quat": output.quat, "euler": output.euler, "matrix": output.matrix}[output.mode]
    raw["rot"] = np.asarray(payload, dtype=float).reshape(1, -1)
    return raw


def loss(output: PredictorOutput, sample: TrainingSample, cfg, mode: str | None = None):
    """Single-sample multi-task loss and gradients w.r.t. the raw outputs.

    ``cfg`` provides the term weights (alpha, beta, gamma, delta).  When the
    output carries confidence vectors, the classification gradients are
    reported with respect to the underlying logits.
    """
    mode = mode or output.mode
    raw = _output_raw(output)
    targets = stack_targets([sample], mode)
    weights = (cfg.alpha, cfg.beta, cfg.gamma, cfg.delta)

    alpha, beta, gamma, delta = weights
    terms, draw = batch_loss(raw, targets, weights, mode)
    total = terms.total
    grads = {k: v[0] for k, v in draw.items()}

    if output.trans_probs is not None:
        p = np.asarray(output.trans_probs, dtype=float)
        total += -gamma * float(np.log(max(p[sample.c_gt], _PROB_FLOOR)))
        g = p.copy()
        g[sample.c_gt] -= 1.0
        grads["cls_t"] = gamma * g
    if output.rot_probs is not None:
        q = np.asarray(output.rot_probs, dtype=float)
        total += -delta * float(np.log(max(q[sample.k_gt], _PROB_FLOOR)))
        g = q.copy()
        g[sample.k_gt] -= 1.0
        grads["cls_r"] = delta * g
    return total, grads
