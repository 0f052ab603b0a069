"""PCK / IOU metrics, side-by-side coarse and refined evaluation, the
test-time-optimization baseline and the parameter-noise harness."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import artmodel as am
from . import autodiff as ad
from . import losses as L
from .camrender import project, rasterize_soft
from .meshkit import build_adjacency, laplacian_operator
from .neural import CoarseParams, assemble_node_features, refine
from .pipeline import base_camera, coarse_mesh, predict, refine_pass
from .trainer import OptimizerState, adam_step

log = logging.getLogger(__name__)

PART_ORDER = ("legs", "tail", "ears", "face")
EVAL_SHARPNESS = 1000.0


@dataclass
class PCKResult:
    avg: float
    per_part: dict = field(default_factory=dict)
    correct: dict = field(default_factory=dict)  # part -> count, plus "all"
    total: dict = field(default_factory=dict)


def validate_part_map(part_map, n_joints):
    seen = set()
    for name, idx in part_map.items():
        idx = set(int(i) for i in idx)
        if seen & idx:
            raise ValueError(f"part {name!r} overlaps another part")
        if any(i < 0 or i >= n_joints for i in idx):
            raise ValueError(f"part {name!r} references a joint outside 0..{n_joints - 1}")
        seen |= idx
    return part_map


def correct_mask(pred_2d, gt_2d, visibility, silhouette_area, threshold=0.15):
    """Boolean (S, N): visible and within threshold * sqrt(area) pixels."""
    pred_2d = np.asarray(pred_2d, dtype=np.float64).reshape(-1, *np.shape(gt_2d)[-2:])
    gt_2d = np.asarray(gt_2d, dtype=np.float64).reshape(pred_2d.shape)
    vis = np.asarray(visibility).reshape(pred_2d.shape[:2]) > 0
    area = np.asarray(silhouette_area, dtype=np.float64).reshape(-1)
    if np.any(area <= 0):
        raise ValueError("silhouette area must be positive")
    dist = np.sqrt(((pred_2d - gt_2d) ** 2).sum(-1))
    return vis & (dist <= threshold * np.sqrt(area)[:, None]), vis


def pck(pred_2d, gt_2d, visibility, silhouette_area, threshold=0.15, part_map=None):
    """Pooled PCK over all visible joints of all samples, with per-part breakdown."""
    ok, vis = correct_mask(pred_2d, gt_2d, visibility, silhouette_area, threshold)
    correct = {"all": int(ok.sum())}
    total = {"all": int(vis.sum())}
    per_part = {}
    for name, idx in (part_map or {}).items():
        idx = list(idx)
        correct[name] = int(ok[:, idx].sum())
        total[name] = int(vis[:, idx].sum())
        per_part[name] = correct[name] / total[name] if total[name] else float("nan")
    avg = correct["all"] / total["all"] if total["all"] else float("nan")
    return PCKResult(avg, per_part, correct, total)


def iou(mask_a, mask_b):
    a = np.asarray(mask_a) > 0.5
    b = np.asarray(mask_b) > 0.5
    if a.shape != b.shape:
        raise ValueError("masks differ in shape")
    union = np.logical_or(a, b).sum()
    if union == 0:
        log.info("iou of two empty masks defined as 1")
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------- evaluate


@dataclass
class Report:
    rows: list  # per-sample dicts
    table: dict  # stage -> {"iou": .., "pck": .., part: ..}
    part_names: tuple


def _hard_masks(V, faces, camera, focal):
    return (rasterize_soft(V, faces, camera, EVAL_SHARPNESS, focal=focal).data > 0.5).astype(np.float64)


def _predict_numpy(net, dataset, batch_size=16):
    """Coarse and refined keypoints and masks from a single forward pass."""
    model = net.model
    camera = base_camera(net.image_size)
    out = {"kp_coarse": [], "kp_refined": [], "mask_coarse": [], "mask_refined": [], "params": []}
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        batch = dataset.collate(idx)
        pred = predict(net, batch.images, refine_mesh=True)
        f = pred.params.focal.data
        out["kp_coarse"].append(project(pred.joints_c.data, camera, f).data)
        out["kp_refined"].append(project(pred.joints_f.data, camera, f).data)
        out["mask_coarse"].append(_hard_masks(pred.V_c.data, model.faces, camera, f))
        out["mask_refined"].append(_hard_masks(pred.V_f.data, model.faces, camera, f))
        out["params"].append({k: getattr(pred.params, k).data for k in ("betas", "pose", "trans", "focal")})
    if not len(dataset):
        return out
    for k in ("kp_coarse", "kp_refined", "mask_coarse", "mask_refined"):
        out[k] = np.concatenate(out[k])
    out["params"] = {k: np.concatenate([p[k] for p in out["params"]]) for k in out["params"][0]}
    return out


def sample_rows(dataset, kp, masks, stage, threshold, part_map):
    rows = []
    for i, s in enumerate(dataset.samples):
        area = s.original_area()
        ok, vis = correct_mask(s.to_original(kp[i])[None], s.to_original(s.keypoints)[None], s.visibility[None],
                               [area], threshold)
        row = {"sample": i, "name": s.name, "stage": stage, "iou": iou(masks[i], s.silhouette), "area": area,
               "visible": int(vis.sum()), "correct": int(ok.sum())}
        for part, idx in part_map.items():
            row[f"{part}_correct"] = int(ok[0, list(idx)].sum())
            row[f"{part}_total"] = int(vis[0, list(idx)].sum())
        rows.append(row)
    return rows


def aggregate(rows, part_names):
    """Table-1 style summary per stage from per-sample rows."""
    table = {}
    for stage in dict.fromkeys(r["stage"] for r in rows):
        rs = [r for r in rows if r["stage"] == stage]
        vis = sum(r["visible"] for r in rs)
        entry = {
            "iou": float(np.mean([r["iou"] for r in rs])),
            "pck": sum(r["correct"] for r in rs) / vis if vis else float("nan"),
        }
        for p in part_names:
            tot = sum(r[f"{p}_total"] for r in rs)
            entry[p] = sum(r[f"{p}_correct"] for r in rs) / tot if tot else float("nan")
        table[stage] = entry
    return table


def evaluate(net, dataset, threshold=0.15, part_map=None, return_predictions=False):
    """Coarse and refined metrics per sample, computed from the same forward pass."""
    part_map = part_map if part_map is not None else am.TOY_PART_MAP
    names = tuple(part_map)
    preds = _predict_numpy(net, dataset)
    rows = []
    if len(dataset):
        rows = (sample_rows(dataset, preds["kp_coarse"], preds["mask_coarse"], "coarse", threshold, part_map)
                + sample_rows(dataset, preds["kp_refined"], preds["mask_refined"], "refined", threshold, part_map))
    report = Report(rows, aggregate(rows, names), names)
    return (report, preds) if return_predictions else report


def write_report_csv(report, path):
    if not report.rows:
        cols = ["sample", "name", "stage", "iou", "area", "visible", "correct"]
    else:
        cols = list(report.rows[0])
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in report.rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_report_csv(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if k in ("name", "stage"):
                    row[k] = v
                elif k in ("iou", "area"):
                    row[k] = float(v)
                else:
                    row[k] = int(v)
            out.append(row)
    return out


def _pct(x):
    return "nan" if (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.2f}"


def format_table(report):
    """Aligned console table: IOU, PCK avg and per-part, one row per stage (percent)."""
    head = ["method", "IOU", "Avg"] + [p.capitalize() for p in report.part_names]
    lines = [head]
    for stage, e in report.table.items():
        lines.append([stage, _pct(e["iou"]), _pct(e["pck"])] + [_pct(e[p]) for p in report.part_names])
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
                     for r in lines) + "\n"


def parse_table(text):
    """Inverse of format_table: stage -> list of percentages."""
    lines = [ln.split() for ln in text.strip().splitlines()]
    return {ln[0]: [float(x) for x in ln[1:]] for ln in lines[1:]}


# ------------------------------------------------------ test-time optimization


def fit_loss(model, sample_batch, params, camera, weights, sharpness=60.0):
    betas, pose, trans, focal = params
    V = am.forward(model, betas, pose, trans)
    joints = am.regress_joints(model, V)
    mask = rasterize_soft(V, model.faces, camera, sharpness, focal=focal)
    pred = L.StageOnePrediction(joints, betas, pose, focal, mask)
    terms = L.stage1_terms(sample_batch, pred, model, camera, weights)
    return L.weighted_sum(terms, weights), terms


TTO_SHARPNESS = 20.0


def test_time_optimize(model, sample, init_params, iterations, lr=0.003, weights=None, sharpness=TTO_SHARPNESS):
    """Adam on (betas, pose, trans, log focal) from ``init_params``.

    Returns (fitted params dict, loss trace).  ``trace[k]`` is the loss at the
    iterate before update k; focal length is optimized in log space so one
    learning rate suits all groups.
    """
    weights = weights or L.LossWeights()
    init = {k: np.array(v, dtype=np.float64).reshape(1, -1) for k, v in init_params.items()}
    if iterations <= 0:
        return {k: np.array(v, dtype=np.float64) for k, v in init_params.items()}, []
    camera = base_camera(sample.size)
    batch = _single_batch(sample)
    leaves = {
        "betas": ad.Tensor(init["betas"].copy(), requires_grad=True),
        "pose": ad.Tensor(init["pose"].copy(), requires_grad=True),
        "trans": ad.Tensor(init["trans"].copy(), requires_grad=True),
        "log_focal": ad.Tensor(np.log(init["focal"].reshape(1)), requires_grad=True),
    }
    state = OptimizerState(lr=lr)
    trace = []
    for _ in range(iterations):
        focal = ad.exp(leaves["log_focal"])
        loss, _ = fit_loss(model, batch, (leaves["betas"], leaves["pose"], leaves["trans"], focal), camera,
                           weights, sharpness)
        trace.append(float(loss.data))
        grads = ad.backward(loss)
        adam_step(leaves, {k: grads[p] for k, p in leaves.items()}, state)
    out = {k: leaves[k].data.reshape(np.shape(init_params[k])).copy() for k in ("betas", "pose", "trans")}
    out["focal"] = np.exp(leaves["log_focal"].data).reshape(np.shape(init_params["focal"]))
    return out, trace


def _single_batch(sample):
    from .datagen import Dataset

    return Dataset([sample], len(sample.keypoints)).collate([0])


def smooth(trace, window):
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) < window:
        return trace.copy()
    return np.convolve(trace, np.ones(window) / window, mode="valid")


def keypoint_error(model, sample, params):
    """Mean squared pixel error of visible keypoints for fitted parameters."""
    V = am.forward(model, params["betas"], params["pose"], params["trans"]).data
    joints = am.regress_joints(model, V)
    camera = base_camera(sample.size)
    return float(L.keypoint_loss(sample.keypoints[None], sample.visibility[None], joints, camera,
                                 np.atleast_1d(params["focal"])).data)


def timed(fn, *args, repeat=1, **kwargs):
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn(*args, **kwargs)
    return out, (time.perf_counter() - t0) / repeat


# ------------------------------------------------------------ noise harness

SMAL_GROUP = ("betas", "pose")
CAMERA_GROUP = ("trans", "focal")


def population_sigma(params):
    """Per-coordinate standard deviation over the batch axis."""
    return {k: np.std(np.asarray(v, dtype=np.float64), axis=0) for k, v in params.items()}


def perturb_params(params, sigma_fraction, population_sigma, seed, target):
    """Add N(0, (sigma_fraction * sigma)^2) noise to the ``target`` group
    ("smal": shape and pose; "camera": translation and focal length)."""
    if target not in ("smal", "camera"):
        raise ValueError(f"unknown noise target {target!r}")
    group = SMAL_GROUP if target == "smal" else CAMERA_GROUP
    rng = np.random.default_rng(seed)
    out = {}
    for k in sorted(params):
        v = np.array(params[k], dtype=np.float64, copy=True)
        if k in group and sigma_fraction:
            v = v + rng.standard_normal(v.shape) * (sigma_fraction * np.asarray(population_sigma[k]))
        out[k] = v
    return out


def evaluate_with_params(net, dataset, params, threshold=0.15, part_map=None, batch_size=16):
    """Refined-stage metrics when the coarse branch output is replaced by ``params``."""
    part_map = part_map if part_map is not None else am.TOY_PART_MAP
    model = net.model
    camera = base_camera(net.image_size)
    kps, masks = [], []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        batch = dataset.collate(idx)
        enc = net.params["encoder"](batch.images)
        p = CoarseParams(*(ad.Tensor(params[k][idx]) for k in ("betas", "pose", "trans", "focal")))
        V_c, _ = coarse_mesh(model, p)
        x0 = assemble_node_features(enc.h_g, V_c, enc.feature_maps, camera, p.focal)
        V_f = refine(V_c, net.params["mrgcn"](x0)).data
        f = p.focal.data
        kps.append(project(am.regress_joints(model, V_f), camera, f).data)
        masks.append(_hard_masks(V_f, model.faces, camera, f))
    rows = sample_rows(dataset, np.concatenate(kps), np.concatenate(masks), "refined", threshold, part_map)
    return aggregate(rows, tuple(part_map))["refined"]


def noise_sensitivity(net, dataset, fractions=(0.0, 0.1, 0.2, 0.3, 0.5), seed=0, threshold=0.15, part_map=None):
    """Metrics under SMAL and camera noise at each fraction of the population sigma.

    The same standard-normal draws are reused for every fraction (common random
    numbers), so the trend reflects the noise scale rather than resampling luck.
    """
    _, preds = evaluate(net, dataset, threshold, part_map, return_predictions=True)
    base = preds["params"]
    sigma = population_sigma(base)
    results = {}
    for target in ("smal", "camera"):
        for frac in fractions:
            noisy = perturb_params(base, frac, sigma, seed, target)
            results[(target, frac)] = evaluate_with_params(net, dataset, noisy, threshold, part_map)
    return results


# ---------------------------------------------------- refinement vs fitting


def refinement_vs_tto(net, dataset, iterations=10, lr=0.003, weights=None, sharpness=TTO_SHARPNESS):
    """Per-sample wall time and keypoint loss (px^2) of the learned refinement
    pass against ``iterations`` steps of test-time optimization.  Both start
    from the same coarse output, so the encoder and coarse heads are timed
    for neither."""
    model = net.model
    camera = base_camera(net.image_size)
    out = {"t_refine": [], "t_tto": [], "kp_coarse": [], "kp_refine": [], "kp_tto": []}
    for s in dataset.samples:
        enc = net.params["encoder"](s.image[None])
        params = net.params["heads"](enc.h_g)
        V_c, joints_c = coarse_mesh(model, params)
        (_, joints_f), t_ref = timed(refine_pass, net, enc, params, V_c)
        f = params.focal.data
        kp_of = lambda J: float(L.keypoint_loss(s.keypoints[None], s.visibility[None], J, camera, f).data)
        init = {k: getattr(params, k).data[0] for k in ("betas", "pose", "trans")}
        init["focal"] = float(f[0])
        (fitted, _), t_tto = timed(test_time_optimize, model, s, init, iterations, lr=lr, weights=weights,
                                   sharpness=sharpness)
        out["t_refine"].append(t_ref)
        out["t_tto"].append(t_tto)
        out["kp_coarse"].append(kp_of(joints_c.data))
        out["kp_refine"].append(kp_of(joints_f.data))
        out["kp_tto"].append(keypoint_error(model, s, fitted))
    return {k: np.asarray(v) for k, v in out.items()}


# ---------------------------------------------------- deformation control


def laplacian_deviation(V_f, V_c, A):
    """Mean over vertices of |delta v_f - delta v_c| (Euclidean, per vertex)."""
    d = laplacian_operator(A) @ (np.asarray(V_f) - np.asarray(V_c)).reshape(-1, 3)
    return float(np.linalg.norm(d, axis=1).mean())


def fit_deformation(model, sample, coarse_params, lap_weight, iterations=100, lr=0.01, weights=None,
                    sharpness=TTO_SHARPNESS):
    """Free per-vertex offsets on a fixed coarse mesh, fitted with Adam under the
    refinement loss with Laplacian weight ``lap_weight``.  Returns (V_f, V_c)."""
    weights = replace(weights or L.LossWeights(), lap=float(lap_weight))
    camera = base_camera(sample.size)
    batch = _single_batch(sample)
    p = {k: np.asarray(v, dtype=np.float64).reshape(1, -1) for k, v in coarse_params.items()}
    V_c = am.forward(model, p["betas"], p["pose"], p["trans"]).data
    focal = p["focal"].reshape(1)
    A = build_adjacency(model.faces, model.n_vertices)
    delta = ad.Tensor(np.zeros_like(V_c), requires_grad=True)
    state = OptimizerState(lr=lr)
    for _ in range(iterations):
        V_f = delta + V_c
        mask = rasterize_soft(V_f, model.faces, camera, sharpness, focal=focal)
        loss = L.stage2_loss(batch, V_f, V_c, am.regress_joints(model, V_f), camera, focal, A, weights, mask_f=mask)
        grads = ad.backward(loss)
        adam_step({"delta": delta}, {"delta": grads[delta]}, state)
    return V_c[0] + delta.data[0], V_c[0]


def laplacian_sweep(model, samples, coarse_params, lambdas=(0.0, 1.0, 10.0, 100.0), iterations=100, lr=0.01):
    """Mean Laplacian deviation of fitted deformations for each weight."""
    A = build_adjacency(model.faces, model.n_vertices)
    out = {}
    for lam in lambdas:
        devs = [laplacian_deviation(*fit_deformation(model, s, c, lam, iterations, lr), A)
                for s, c in zip(samples, coarse_params)]
        out[lam] = float(np.mean(devs))
    return out
