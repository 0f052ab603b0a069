"""Registered gradient checks: every loss, the model forward pass, projection,
the soft rasterizer and the graph layers against central differences.

Each suite builds a small random problem from a seed and returns the maximum
relative error; rasterizer paths get the looser tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import artmodel as am
from . import autodiff as ad
from . import camrender as cr
from . import losses as L
from . import meshkit as mk
from . import neural as nn

SMOOTH_TOL = 1e-4
RASTER_TOL = 1e-3

SUITES = {}


def suite(name, tol=SMOOTH_TOL):
    def register(fn):
        SUITES[name] = (fn, tol)
        return fn

    return register


@dataclass
class SuiteResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return bool(self.error < self.tolerance)


class _Shared:
    """Toy model and hierarchy built once per process."""

    model = None
    hierarchy = None

    @classmethod
    def get(cls):
        if cls.model is None:
            cls.model = am.make_toy_model()
            cls.hierarchy = mk.build_hierarchy(cls.model.mesh(), n_levels=3, factor=4)
        return cls.model, cls.hierarchy


def _subset(rng, arrays, per_input):
    return [(k, int(i)) for k, a in enumerate(arrays)
            for i in rng.choice(np.size(a), min(per_input, np.size(a)), replace=False)]


# ------------------------------------------------------------------- losses


@suite("loss.keypoint")
def _kp(rng):
    cam = cr.Camera(100.0, 0.0, 0.0, 32, 32)
    J = rng.normal(size=(2, 9, 3)) + [0, 0, 6]
    gt = rng.normal(size=(2, 9, 2)) * 20
    vis = (rng.uniform(size=(2, 9)) > 0.3).astype(float)
    return ad.gradcheck(lambda t: L.keypoint_loss(gt, vis, t[0], cam, t[1]), [J, np.array([90.0, 110.0])])


@suite("loss.silhouette")
def _silh(rng):
    G = (rng.uniform(size=(2, 8, 8)) > 0.5).astype(float)
    return ad.gradcheck(lambda t: L.silhouette_loss(G, ad.sigmoid(t[0]), 0.7, 0.3), [rng.normal(size=(2, 8, 8))])


@suite("loss.shape_prior")
def _shape(rng):
    model, _ = _Shared.get()
    return ad.gradcheck(lambda t: L.mahalanobis_prior(t[0], model.shape_mean, model.shape_cov).sum(),
                        [rng.normal(size=(2, model.n_shape))])


@suite("loss.pose_prior")
def _pose(rng):
    model, _ = _Shared.get()
    return ad.gradcheck(lambda t: L.mahalanobis_prior(t[0], model.pose_mean, model.pose_cov).sum(),
                        [rng.normal(size=(2, 3 * model.n_joints)) * 0.3])


@suite("loss.pose_limit")
def _limit(rng):
    x = rng.uniform(-2, 2, size=(2, 6))
    x[np.abs(np.abs(x) - 1) < 1e-3] = 0.0  # keep away from the hinge kink
    return ad.gradcheck(lambda t: L.pose_limit_prior(t[0], -np.ones(6), np.ones(6)).sum(), [x])


@suite("loss.laplacian")
def _lap(rng):
    _, hier = _Shared.get()
    A = hier.levels[0].adjacency
    Vc = rng.normal(size=(1, A.shape[0], 3))
    point = Vc + rng.normal(size=Vc.shape) * 0.1
    return ad.gradcheck(lambda t: L.laplacian_loss(t[0], Vc, A), [point], indices=_subset(rng, [point], 40))


@suite("loss.stage1_through_raster", tol=RASTER_TOL)
def _stage1(rng):
    model, _ = _Shared.get()
    cam = cr.Camera.centered(60.0, 16, 16)
    betas, pose = rng.normal(size=(1, 4)) * 0.5, rng.normal(size=(1, 27)) * 0.2
    trans, focal = np.array([[0.013, 0.107, 7.0]]), np.array([61.3])
    kp = rng.uniform(0, 16, size=(1, 9, 2))
    sil = (rng.uniform(size=(1, 16, 16)) > 0.7).astype(float)

    class B:
        keypoints, visibility, silhouettes = kp, np.ones((1, 9)), sil

    w = L.LossWeights()

    def fn(t):
        V = am.forward(model, t[0], t[1], t[2])
        mask = cr.rasterize_soft(V, model.faces, cam, 8.0, focal=t[3])
        pred = L.StageOnePrediction(am.regress_joints(model, V), t[0], t[1], t[3], mask)
        return L.weighted_sum(L.stage1_terms(B, pred, model, cam, w), w)

    pts = [betas, pose, trans, focal]
    return ad.gradcheck(fn, pts, indices=_subset(rng, pts, 4))


# ------------------------------------------------------- model and camera


@suite("model.forward")
def _forward(rng):
    model, _ = _Shared.get()
    pts = [rng.normal(size=(1, model.n_shape)), rng.normal(scale=0.3, size=(1, 3 * model.n_joints)),
           rng.normal(size=(1, 3)) + [0, 0, 5]]
    w = rng.normal(size=(1, model.n_vertices, 3))
    return ad.gradcheck(lambda t: (am.forward(model, t[0], t[1], t[2]) * w).sum(), pts)


@suite("camera.project")
def _project(rng):
    cam = cr.Camera(80.0, 16.0, 16.0, 32, 32)
    pts = rng.normal(size=(2, 7, 3)) + [0, 0, 5]
    w = rng.normal(size=(2, 7, 2))
    return ad.gradcheck(lambda t: (cr.project(t[0], cam, t[1]) * w).sum(), [pts, np.array([70.0, 90.0])])


@suite("raster.soft_2d", tol=RASTER_TOL)
def _raster2d(rng):
    uv = np.array([[1.2, 1.3], [6.7, 2.1], [3.1, 6.6], [6.2, 6.9]])
    faces = np.array([[0, 1, 2], [1, 3, 2]])
    w = rng.normal(size=(8, 8))
    return ad.gradcheck(lambda t: (cr.soft_silhouette(t[0], faces, 8, 8, 3.0) * w).sum(), [uv])


@suite("raster.soft_3d", tol=RASTER_TOL)
def _raster3d(rng):
    model, _ = _Shared.get()
    cam = cr.Camera.centered(30.0, 12, 12)
    V = model.template[None] + [0.0123, -0.0311, 6.0]
    w = rng.normal(size=(1, 12, 12))
    return ad.gradcheck(lambda t: (cr.rasterize_soft(t[0], model.faces, cam, 4.0) * w).sum(), [V],
                        indices=_subset(rng, [V], 20))


# ------------------------------------------------------------------- graph


@suite("graph.gcn_layer")
def _gcn(rng):
    _, hier = _Shared.get()
    A = hier.levels[1].norm_adjacency
    x, W = rng.normal(size=(1, A.shape[0], 4)), rng.normal(size=(4, 3))
    g = rng.normal(size=(1, A.shape[0], 3))
    return ad.gradcheck(lambda t: (nn.gcn_layer(A, t[0], t[1]) * g).sum(), [x, W], indices=_subset(rng, [x, W], 12))


@suite("graph.bottleneck")
def _bottleneck(rng):
    _, hier = _Shared.get()
    A = hier.levels[2].norm_adjacency
    blk = nn.Bottleneck(rng, 4, 6, 2)
    x, w = rng.normal(size=(1, A.shape[0], 4)), rng.normal(size=(1, A.shape[0], 6))
    graph = blk.params["graph"]

    def fn(t):
        blk.params["graph"] = t[1]
        return (blk(A, t[0]) * w).sum()

    try:
        return ad.gradcheck(fn, [x, graph.data.copy()])
    finally:
        blk.params["graph"] = graph


@suite("graph.mrgcn")
def _mrgcn(rng):
    _, hier = _Shared.get()
    mr = nn.MRGCN(rng, 5, hier, nn.MRGCNConfig(widths=(4, 4, 4), groups=2))
    mr.params["head"].params["weight"].data = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(1, hier.levels[0].adjacency.shape[0], 5))
    blk = mr.params["down"][1].params["blocks"][0]
    graph = blk.params["graph"]

    def fn(t):
        blk.params["graph"] = t[0]
        return mr(ad.Tensor(x0))[0, 17, 1]

    try:
        return ad.gradcheck(fn, [graph.data.copy()])
    finally:
        blk.params["graph"] = graph


def run_all(seed=0, names=None):
    """Run the selected (default: all) suites; returns a list of SuiteResult."""
    out = []
    for name, (fn, tol) in SUITES.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        err = float(fn(np.random.default_rng(seed)))
        out.append(SuiteResult(name, err, tol, time.perf_counter() - t0))
    return out
