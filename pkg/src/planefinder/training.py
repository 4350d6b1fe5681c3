"""Deterministic single-threaded training loop with the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .losses import batch_loss, stack_targets
from .nets import RegressorModel
from .phantom import TrainingSample, compute_class_labels, make_training_sample
from .transforms import RigidTransform, compose, inverse_compose, quat_from_axis_angle
from .volume import Volume, extract_orthogonal_triplet, extract_plane


class TrainingDivergedError(RuntimeError):
    """Raised when the loss turns non-finite; carries the offending step."""

    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights and optimizer settings.

    ``lr_decay`` is the final learning-rate fraction reached by exponential
    decay over the run; 1.0 keeps the rate constant.
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    learning_rate: float = 0.001
    lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)

    def rate_at(self, step: int) -> float:
        if self.lr_decay >= 1.0 or self.steps <= 1:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (step / (self.steps - 1))


class Adam:
    """Standard Adam with bias correction; state keyed like the param dict."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        rate = c.rate_at(self.t)
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for key, g in grads.items():
            self.m[key] = c.beta1 * self.m[key] + (1.0 - c.beta1) * g
            self.v[key] = c.beta2 * self.v[key] + (1.0 - c.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            params[key] -= rate * m_hat / (np.sqrt(v_hat) + c.eps)


def phantom_stream(
    volumes: list[tuple[Volume, RigidTransform]],
    size: int,
    seed: int,
    triplet: bool = False,
    near_fraction: float = 0.5,
) -> Iterator[TrainingSample]:
    """Endless stream of fresh training samples from a pool of volumes.

    Each sample picks a volume and a plane pose from one seeded generator, so
    the sequence is fully reproducible.  A ``near_fraction`` share of samples
    perturbs the target pose directly (log-uniform step scale) instead of
    sampling the volume globally: the refinement loop spends most of its
    iterations near the target, and a small network trained only on global
    poses is badly out of distribution there.
    """
    rng = np.random.default_rng(seed)
    while True:
        volume, t_gt = volumes[int(rng.integers(len(volumes)))]
        if rng.random() >= near_fraction:
            yield make_training_sample(volume, t_gt, size, rng, triplet=triplet)
            continue
        # pose = target composed with a random step whose scale spans the
        # whole convergence range
        t_scale = float(np.exp(rng.uniform(np.log(0.5), np.log(16.0))))
        r_scale = float(np.exp(rng.uniform(np.log(1.0), np.log(45.0))))
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-12:
            axis = rng.normal(size=3)
        step = RigidTransform(
            rng.normal(0.0, t_scale, size=3),
            quat_from_axis_angle(axis, rng.normal(0.0, r_scale)),
        )
        pose = compose(t_gt, step)
        image = (
            extract_orthogonal_triplet(volume, pose, size)
            if triplet
            else extract_plane(volume, pose, size)
        )
        delta = inverse_compose(t_gt, pose)
        labels = compute_class_labels(delta)
        yield TrainingSample(image, delta, labels.c, labels.k, labels.degenerate)


def train(
    samples: Iterator[TrainingSample],
    model: RegressorModel,
    cfg: TrainConfig,
    loss_csv=None,
) -> tuple[RegressorModel, list]:
    """Run cfg.steps Adam steps over batches pulled from the sample stream.

    Returns the trained model and the per-step loss history; optionally
    writes the history as CSV (step, total, per-term columns).
    """
    optimizer = Adam(model.params, cfg)
    history = []
    for step in range(cfg.steps):
        batch = [next(samples) for _ in range(cfg.batch_size)]
        x = np.stack([s.image for s in batch]).astype(float)
        if x.ndim == 3:
            x = x[:, None]
        targets = stack_targets(batch, model.mode)
        raw, cache = model.forward_batch(x)
        terms, draw = batch_loss(raw, targets, cfg.weights, model.mode)
        if not np.isfinite(terms.total):
            raise TrainingDivergedError(step)
        grads = model.backward(cache, draw)
        optimizer.step(model.params, grads)
        history.append(terms)

    if loss_csv is not None:
        with open(loss_csv, "w", encoding="ascii") as fh:
            fh.write("step,total,translation,rotation,cls_t,cls_r\n")
            for i, t in enumerate(history):
                fh.write(f"{i},{t.total:.9g},{t.translation:.9g},{t.rotation:.9g},{t.cls_t:.9g},{t.cls_r:.9g}\n")
    return model, history
