"""Adam optimisation, mirror augmentation and the minibatch training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import LossWeights, batch_loss
from .geometry import RelativePose
from .net import LvoConfig, LvoModel, _forward, backward


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 1e-4
    lr_decay: float = 0.95
    epochs: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be non-negative")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_model(cls, model: LvoModel) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()})


def adam_step(model: LvoModel, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig,
              epoch: int = 0) -> tuple[LvoModel, AdamState]:
    """One bias-corrected Adam update, in place. The step size is ``lr * lr_decay**epoch``."""
    b1, b2 = cfg.betas
    state.t += 1
    lr = cfg.learning_rate * cfg.lr_decay**epoch
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return model, state


def mirror_augment(raster: np.ndarray, pose: RelativePose) -> tuple[np.ndarray, RelativePose]:
    """Left-right mirror of a 3D-flow sample with the matching pose correction."""
    out = raster[:, ::-1].copy()
    out[..., 0] = -out[..., 0]
    t = pose.translation * np.array([-1.0, 1.0, 1.0])
    e = pose.euler * np.array([-1.0, -1.0, 1.0])
    return out, RelativePose(t, e)


def _targets(poses) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([p.translation for p in poses]), np.stack([p.euler for p in poses]))


def loss_and_grads(model: LvoModel, batch: np.ndarray, gt_t: np.ndarray, gt_e: np.ndarray,
                   weights: LossWeights) -> tuple[float, dict[str, np.ndarray]]:
    """Full objective (data terms + weight decay) and its parameter gradients."""
    t, r, cache = _forward(model, batch)
    loss, g_t, g_r = batch_loss(t, r, gt_t, gt_e, weights)
    grads = backward(model, batch, g_t, g_r, cache)
    if weights.lambda3:
        loss += weights.lambda3 * model.weight_sq_norm()
        for k in model.weight_names():
            grads[k] = grads[k] + 2.0 * weights.lambda3 * model.params[k]
    return loss, grads


def train(dataset, cfg: TrainConfig, weights: LossWeights, model: LvoModel | None = None,
          net_config: LvoConfig | None = None) -> tuple[LvoModel, list[float]]:
    """Train on ``(raster, RelativePose)`` pairs.

    Each epoch shuffles the data, optionally mirrors each sample with
    probability 1/2, and takes one Adam step per minibatch. The returned
    history holds the mean per-sample objective of every epoch. Everything
    random is drawn from a generator seeded with ``cfg.seed``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        if net_config is None:
            h, w = dataset[0][0].shape[:2]
            net_config = LvoConfig(input_width=w, input_height=h)
        model = LvoModel.init(net_config, seed=cfg.seed)
    else:
        model = model.copy()
    rasters = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    poses = [p for _, p in dataset]
    state = AdamState.for_model(model)
    n = len(dataset)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.augment else np.zeros(n, dtype=bool)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            xb = rasters[idx].copy()
            pb = [poses[i] for i in idx]
            for j, i in enumerate(idx):
                if flips[i]:
                    xb[j], pb[j] = mirror_augment(xb[j], pb[j])
            gt_t, gt_e = _targets(pb)
            loss, grads = loss_and_grads(model, xb, gt_t, gt_e, weights)
            adam_step(model, grads, state, cfg, epoch)
            total += loss
        history.append(total / n)
        if not math.isfinite(history[-1]):
            raise FloatingPointError(f"loss diverged at epoch {epoch}")
    return model, history
