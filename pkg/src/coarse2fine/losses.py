"""Training objectives for the coarse and refinement stages."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .camrender import project
from .meshkit import laplacian_operator

log = logging.getLogger(__name__)

SMOOTH = 1e-8


@dataclass(frozen=True)
class LossWeights:
    kp1: float = 1.0
    silh1: float = 5.0
    shape: float = 1e-3
    pose: float = 1e-3
    limit: float = 1e-2
    kp2: float = 1.0
    silh2: float = 5.0
    lap: float = 10.0
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")
        if not (0 < self.tversky_alpha < 1 and 0 < self.tversky_beta < 1):
            raise ValueError("Tversky weights must lie in (0, 1)")
        if abs(self.tversky_alpha + self.tversky_beta - 1.0) > 1e-12:
            raise ValueError("Tversky weights must sum to 1")

    def scaled(self, **factors):
        return replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})


def _batched(x, ndim):
    x = ad.as_tensor(x)
    while x.ndim < ndim:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def keypoint_loss(kp_gt, visibility, joints_3d, camera, focal=None, per_sample=False):
    """Mean squared pixel error over visible joints, averaged over the batch.

    Samples without visible joints contribute 0 (and are logged).
    """
    joints_3d = _batched(joints_3d, 3)
    kp_gt = np.asarray(kp_gt, dtype=np.float64).reshape(joints_3d.shape[:-1] + (2,))
    vis = np.asarray(visibility, dtype=np.float64).reshape(joints_3d.shape[:-1])
    pred = project(joints_3d, camera, focal)
    sq = ((pred - kp_gt) ** 2).sum(axis=-1)  # (Bt, N)
    count = vis.sum(axis=-1)
    if np.any(count == 0):
        log.warning("keypoint loss: %d sample(s) with no visible joints", int((count == 0).sum()))
    per = (sq * vis).sum(axis=-1) * (1.0 / np.maximum(count, 1.0))
    return per if per_sample else per.mean()


def tversky(P, G, alpha, beta):
    """Soft Tversky index per batch item (the last two axes are pixels)."""
    P = ad.as_tensor(P)
    G = np.asarray(G, dtype=np.float64)
    axes = (-2, -1)
    tp = (P * G).sum(axis=axes)
    fp = (P * (1.0 - G)).sum(axis=axes)
    fn = ((1.0 - P) * G).sum(axis=axes)
    return (tp + SMOOTH) / (tp + fp * alpha + fn * beta + SMOOTH)


def silhouette_loss(S, soft_mask, alpha, beta, per_sample=False):
    """1 - Tversky with the rendered mask as prediction (alpha weighs false positives)."""
    per = 1.0 - tversky(soft_mask, S, alpha, beta)
    if per_sample or per.ndim == 0:
        return per
    return per.mean()


def mahalanobis_prior(x, mean, cov=None, chol=None):
    """(x - mean)^T cov^-1 (x - mean) per batch row via a triangular solve."""
    x = _batched(x, 2)
    if chol is None:
        chol = np.linalg.cholesky(cov)
    inv_l = scipy.linalg.solve_triangular(chol, np.eye(len(chol)), lower=True)
    # z = L^-1 (x - mean) so that the quadratic form is |z|^2
    z = ad.matmul(x - np.asarray(mean), inv_l.T)
    return (z * z).sum(axis=-1)


def pose_limit_prior(theta, lower, upper):
    """Squared hinge outside [lower, upper], summed per batch row."""
    theta = _batched(theta, 2)
    over = ad.relu(theta - np.asarray(upper))
    under = ad.relu(np.asarray(lower) - theta)
    return (over * over + under * under).sum(axis=-1)


def laplacian_loss(V_f, V_c, A, per_sample=False):
    """Sum over vertices of |delta v_f - delta v_c|^2, batch-averaged."""
    L = laplacian_operator(A)
    diff = ad.sparse_dense_matmul(L, _batched(V_f, 3) - _batched(V_c, 3))
    per = (diff * diff).sum(axis=(-2, -1))
    return per if per_sample else per.mean()


@dataclass
class StageOnePrediction:
    """What the coarse loss needs from a forward pass."""

    joints: ad.Tensor  # (Bt, N, 3)
    betas: ad.Tensor
    pose: ad.Tensor  # (Bt, 3N)
    focal: ad.Tensor
    mask: ad.Tensor | None = None  # soft render, needed when the silhouette term is on


def stage1_terms(batch, pred, model, camera, weights, include_silhouette=True, include_limit=True):
    """Unweighted stage-1 terms as a dict of scalars."""
    terms = {
        "kp1": keypoint_loss(batch.keypoints, batch.visibility, pred.joints, camera, pred.focal),
        "shape": mahalanobis_prior(pred.betas, model.shape_mean, chol=model.shape_chol).mean(),
        "pose": mahalanobis_prior(ad.reshape(pred.pose, (pred.pose.shape[0], -1)), model.pose_mean, chol=model.pose_chol).mean(),
    }
    if include_limit:
        terms["limit"] = pose_limit_prior(ad.reshape(pred.pose, (pred.pose.shape[0], -1)), model.pose_min, model.pose_max).mean()
    if include_silhouette:
        terms["silh1"] = silhouette_loss(batch.silhouettes, pred.mask, weights.tversky_alpha, weights.tversky_beta)
    return terms


def weighted_sum(terms, weights):
    total = ad.Tensor(0.0)
    for name in sorted(terms):
        w = getattr(weights, name)
        if w:
            total = total + terms[name] * w
    return total


def stage1_loss(batch, pred, model, camera, weights, include_silhouette=True, include_limit=True):
    """lambda_kp1 L_kp1 + lambda_silh1 L_silh1 + lambda_shape L_shape + lambda_pose L_pose + lambda_lim L_lim."""
    terms = stage1_terms(batch, pred, model, camera, weights, include_silhouette, include_limit)
    return weighted_sum(terms, weights)


def stage2_terms(batch, V_f, V_c, joints_f, camera, focal, adjacency, weights, mask_f=None, include_silhouette=True):
    terms = {
        "kp2": keypoint_loss(batch.keypoints, batch.visibility, joints_f, camera, focal),
        "lap": laplacian_loss(V_f, V_c, adjacency),
    }
    if include_silhouette:
        terms["silh2"] = silhouette_loss(batch.silhouettes, mask_f, weights.tversky_alpha, weights.tversky_beta)
    return terms


def stage2_loss(batch, V_f, V_c, joints_f, camera, focal, adjacency, weights, mask_f=None, include_silhouette=True):
    """lambda_kp2 L_kp2 + lambda_silh2 L_silh2 + lambda_lap L_lap on the refined mesh."""
    terms = stage2_terms(batch, V_f, V_c, joints_f, camera, focal, adjacency, weights, mask_f, include_silhouette)
    return weighted_sum(terms, weights)
