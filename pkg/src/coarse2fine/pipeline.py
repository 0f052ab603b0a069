"""One forward pass through the coarse branch and the refinement branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import artmodel as am
from . import autodiff as ad
from .camrender import Camera, rasterize_soft
from .neural import CoarseParams, assemble_node_features, refine


@dataclass
class Prediction:
    params: CoarseParams
    V_c: ad.Tensor
    joints_c: ad.Tensor
    V_f: ad.Tensor | None = None
    joints_f: ad.Tensor | None = None
    mask_c: ad.Tensor | None = None
    mask_f: ad.Tensor | None = None


def base_camera(image_size, focal=110.0):
    H, W = image_size
    return Camera.centered(focal, H, W)


def coarse_mesh(model, params):
    V_c = am.forward(model, params.betas, params.pose, params.trans)
    return V_c, am.regress_joints(model, V_c)


def predict(net, images, refine_mesh=True, masks=(), sharpness=60.0):
    """Run the network on a batch of images (Bt, H, W, 3).

    ``masks`` lists which soft silhouettes to render: any of "coarse", "fine".
    """
    model = net.model
    camera = base_camera(net.image_size)
    enc = net.params["encoder"](images)
    params = net.params["heads"](enc.h_g)
    V_c, joints_c = coarse_mesh(model, params)
    pred = Prediction(params, V_c, joints_c)
    if "coarse" in masks:
        pred.mask_c = rasterize_soft(V_c, model.faces, camera, sharpness, focal=params.focal)
    if refine_mesh:
        pred.V_f, pred.joints_f = refine_pass(net, enc, params, V_c)
        if "fine" in masks:
            pred.mask_f = rasterize_soft(pred.V_f, model.faces, camera, sharpness, focal=params.focal)
    return pred


def refine_pass(net, enc, params, V_c):
    """The refinement stage alone: local features at the projected coarse
    vertices, MRGCN offsets, refined vertices and joints."""
    camera = base_camera(net.image_size)
    x0 = assemble_node_features(enc.h_g, V_c, enc.feature_maps, camera, params.focal)
    V_f = refine(V_c, net.params["mrgcn"](x0))
    return V_f, am.regress_joints(net.model, V_f)


def to_numpy(pred):
    """Detached copy of a prediction with plain arrays."""
    out = {
        "betas": pred.params.betas.data.copy(),
        "pose": pred.params.pose.data.copy(),
        "trans": pred.params.trans.data.copy(),
        "focal": pred.params.focal.data.copy(),
        "V_c": pred.V_c.data.copy(),
        "joints_c": pred.joints_c.data.copy(),
    }
    if pred.V_f is not None:
        out["V_f"] = pred.V_f.data.copy()
        out["joints_f"] = pred.joints_f.data.copy()
    return out


def stop_gradient(pred):
    """Coarse outputs as constants (used when the coarse branch is frozen)."""
    p = pred.params
    return CoarseParams(p.betas.detach(), p.pose.detach(), p.trans.detach(), p.focal.detach())


def hard_mask(V, faces, camera, focal, sharpness=1000.0):
    """Binary silhouette at 0.5 from a sharp soft render (numpy in, numpy out)."""
    m = rasterize_soft(np.asarray(V)[None] if np.ndim(V) == 2 else np.asarray(V), faces, camera, sharpness,
                       focal=np.atleast_1d(focal))
    return (m.data > 0.5).astype(np.float64)
