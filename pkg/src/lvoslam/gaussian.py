"""Bivariate Gaussian likelihood over horizontal translation and the training loss.

The translation head emits six unconstrained numbers laid out as
``(mu_x, mu_z, log_sigma_x, log_sigma_z, atanh-ish rho, y)``; the rotation head
emits the Euler triple ``(e_z, e_y, e_x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_MIN = 1e-4
SIGMA_MAX = 1e3
RHO_SCALE = 0.999

_LOG_SMIN = math.log(SIGMA_MIN)
_LOG_SMAX = math.log(SIGMA_MAX)


@dataclass(frozen=True)
class GaussianPose2D:
    mu_x: float
    mu_z: float
    sigma_x: float
    sigma_z: float
    rho: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_z > 0):
            raise ValueError("standard deviations must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("correlation must lie in (-1, 1)")

    @property
    def covariance(self) -> np.ndarray:
        c = self.rho * self.sigma_x * self.sigma_z
        return np.array([[self.sigma_x**2, c], [c, self.sigma_z**2]])


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0   # |y_p - y_gt|
    lambda2: float = 10.0  # ||euler_p - euler_gt||
    lambda3: float = 1e-4  # squared norm of the weights

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class PredictConfig:
    n_samples: int = 10000
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _transform(raw: np.ndarray):
    """Unconstrained head outputs -> (mu_x, mu_z, sx, sz, rho, y) plus local derivatives."""
    ls = raw[..., 2:4]
    inside = (ls > _LOG_SMIN) & (ls < _LOG_SMAX)
    sig = np.exp(np.clip(ls, _LOG_SMIN, _LOG_SMAX))
    th = np.tanh(raw[..., 4])
    rho = RHO_SCALE * th
    dsig = np.where(inside, sig, 0.0)
    drho = RHO_SCALE * (1.0 - th * th)
    return sig, rho, dsig, drho


def raw_to_gaussian(raw) -> tuple[GaussianPose2D, float]:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (6,) or not np.all(np.isfinite(raw)):
        raise ValueError("expected a finite 6-vector")
    sig, rho, _, _ = _transform(raw)
    return GaussianPose2D(raw[0], raw[1], float(sig[0]), float(sig[1]), float(rho)), float(raw[5])


def _nll_terms(mu_x, mu_z, sx, sz, rho, x, z):
    a = (x - mu_x) / sx
    b = (z - mu_z) / sz
    one_m = 1.0 - rho * rho
    q = a * a - 2.0 * rho * a * b + b * b
    nll = LOG_2PI + np.log(sx) + np.log(sz) + 0.5 * np.log(one_m) + q / (2.0 * one_m)
    return nll, a, b, one_m, q


def bivariate_nll(g: GaussianPose2D, x_gt: float, z_gt: float) -> float:
    """Negative log of the bivariate normal density at ``(x_gt, z_gt)``."""
    nll, *_ = _nll_terms(g.mu_x, g.mu_z, g.sigma_x, g.sigma_z, g.rho, x_gt, z_gt)
    return float(nll)


def batch_loss(raw_t: np.ndarray, raw_r: np.ndarray, gt_t: np.ndarray, gt_e: np.ndarray,
               w: LossWeights, with_grad: bool = True):
    """Summed data loss of a batch and its gradient w.r.t. the raw head outputs.

    Args:
        raw_t: ``(N, 6)`` translation-head outputs.
        raw_r: ``(N, 3)`` rotation-head outputs (Euler angles).
        gt_t: ``(N, 3)`` ground-truth translations ``(x, y, z)``.
        gt_e: ``(N, 3)`` ground-truth Euler angles.

    Returns:
        ``(loss, grad_t, grad_r)``; the weight-decay term is not included.
    """
    raw_t = np.asarray(raw_t, dtype=np.float64)
    raw_r = np.asarray(raw_r, dtype=np.float64)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    gt_e = np.asarray(gt_e, dtype=np.float64)
    sig, rho, dsig, drho = _transform(raw_t)
    sx, sz = sig[:, 0], sig[:, 1]
    nll, a, b, one_m, q = _nll_terms(raw_t[:, 0], raw_t[:, 1], sx, sz, rho, gt_t[:, 0], gt_t[:, 2])

    dy = raw_t[:, 5] - gt_t[:, 1]
    de = raw_r - gt_e
    en = np.sqrt(np.sum(de * de, axis=1))
    loss = float(np.sum(nll) + w.lambda1 * np.sum(np.abs(dy)) + w.lambda2 * np.sum(en))
    if not with_grad:
        return loss, None, None

    g_t = np.zeros_like(raw_t)
    ga = (a - rho * b) / one_m  # dq/da / 2 over (1 - rho^2)
    gb = (b - rho * a) / one_m
    g_t[:, 0] = -ga / sx
    g_t[:, 1] = -gb / sz
    g_t[:, 2] = (1.0 / sx - a * ga / sx) * dsig[:, 0]
    g_t[:, 3] = (1.0 / sz - b * gb / sz) * dsig[:, 1]
    g_t[:, 4] = (-rho / one_m - a * b / one_m + q * rho / one_m**2) * drho
    g_t[:, 5] = w.lambda1 * np.sign(dy)
    safe = np.where(en > 0, en, 1.0)
    g_r = w.lambda2 * de / safe[:, None] * (en > 0)[:, None]
    return loss, g_t, g_r


def total_loss(outputs, gts, w: LossWeights, params_sq_norm: float = 0.0) -> float:
    """Loss over a list of predictions.

    Args:
        outputs: sequence of ``(GaussianPose2D, y_p, euler_p)``.
        gts: sequence of :class:`~lvoslam.geometry.RelativePose`.
    """
    if len(outputs) != len(gts):
        raise ValueError(f"{len(outputs)} predictions but {len(gts)} targets")
    total = 0.0
    for (g, y_p, e_p), gt in zip(outputs, gts):
        total += bivariate_nll(g, gt.translation[0], gt.translation[2])
        total += w.lambda1 * abs(y_p - gt.translation[1])
        total += w.lambda2 * float(np.linalg.norm(np.asarray(e_p, dtype=np.float64) - gt.euler))
    return total + w.lambda3 * params_sq_norm


def loss_gradients(raw_t, raw_r, gt, w: LossWeights) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of one sample's data loss w.r.t. its 6 + 3 raw outputs."""
    _, g_t, g_r = batch_loss(np.asarray(raw_t)[None], np.asarray(raw_r)[None],
                             gt.translation[None], gt.euler[None], w)
    return g_t[0], g_r[0]


def predict_translation(g: GaussianPose2D, cfg: PredictConfig,
                        rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Sample-mean estimate of the horizontal translation.

    Draws ``cfg.n_samples`` points from the Gaussian through its 2x2 Cholesky
    factor. ``rng`` defaults to a fresh generator seeded with ``cfg.seed``.
    """
    if cfg.deterministic:
        return g.mu_x, g.mu_z
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = rng.standard_normal((cfg.n_samples, 2))
    xs = g.mu_x + g.sigma_x * n[:, 0]
    zs = g.mu_z + g.sigma_z * (g.rho * n[:, 0] + math.sqrt(1.0 - g.rho**2) * n[:, 1])
    return float(xs.mean()), float(zs.mean())
