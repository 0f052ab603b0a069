"""Perspective projection, soft silhouette rasterization and feature sampling.

Pixel (row i, column j) has its centre at image coordinates (u, v) = (j, i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from PIL import Image, ImageDraw

from . import autodiff as ad

Z_NEAR = 1e-4
CULL_CUTOFF = 20.0


@dataclass(frozen=True)
class Camera:
    f: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if self.f <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError("camera needs f > 0 and a positive image size")

    @classmethod
    def centered(cls, f, height, width):
        """Principal point at the image centre."""
        return cls(float(f), width / 2.0, height / 2.0, int(height), int(width))

    @property
    def size(self):
        return self.height, self.width


def project(points, camera, focal=None, return_flags=False):
    """Pinhole projection of (..., K, 3) points to (..., K, 2) pixels.

    ``focal`` optionally overrides ``camera.f`` with one value per batch item
    (shape (Bt,)).  Depths at or below Z_NEAR are clamped and reported in the
    flags array when ``return_flags`` is set.
    """
    points = ad.as_tensor(points)
    z = points[..., 2:3]
    behind = z.data <= Z_NEAR
    if behind.any():
        z = ad.where(behind, Z_NEAR, z)
    xy = points[..., 0:2] / z
    if focal is None:
        scaled = xy * camera.f
    else:
        focal = ad.as_tensor(focal)
        scaled = xy * ad.reshape(focal, focal.shape + (1,) * (points.ndim - focal.ndim))
    uv = scaled + np.array([camera.cx, camera.cy])
    if return_flags:
        return uv, behind[..., 0]
    return uv


# ----------------------------------------------------------------- rasterizer


def _face_pixel_pairs(tri, height, width, margin):
    """Candidate (face, pixel) pairs whose pixel centre lies in the face's
    bounding box grown by ``margin``; ``margin=None`` pairs every face with
    every pixel."""
    n_faces = len(tri)
    if margin is None:
        f_idx = np.repeat(np.arange(n_faces), height * width)
        pix = np.tile(np.arange(height * width), n_faces)
        return f_idx, pix
    lo = tri.min(axis=1) - margin
    hi = tri.max(axis=1) + margin
    x0 = np.clip(np.ceil(lo[:, 0]), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0]), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1]), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1]), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    f_idx = np.repeat(np.arange(n_faces), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    nxf = nx[f_idx]
    px = x0[f_idx] + local % np.maximum(nxf, 1)
    py = y0[f_idx] + local // np.maximum(nxf, 1)
    return f_idx, py * width + px


def _signed_distance(p, a, b, c):
    """Signed distance of ``p`` to triangle (a, b, c), positive inside, with
    derivatives with respect to the three corners.  Inputs are (P, 2)."""
    corners = (a, b, c)
    dists, params, closest, cross = [], [], [], []
    for k in range(3):
        s, t = corners[k], corners[(k + 1) % 3]
        e = t - s
        ee = (e * e).sum(1)
        u = np.clip(((p - s) * e).sum(1) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        q = s + u[:, None] * e
        dists.append(np.sqrt(((q - p) ** 2).sum(1)))
        params.append(u)
        closest.append(q)
        cross.append(e[:, 0] * (p[:, 1] - s[:, 1]) - e[:, 1] * (p[:, 0] - s[:, 0]))
    dists = np.stack(dists, axis=1)
    cross = np.stack(cross, axis=1)
    rows = np.arange(len(p))
    k = dists.argmin(axis=1)
    d = dists[rows, k]
    u = np.stack(params, axis=1)[rows, k]
    q = np.stack(closest, axis=1)[rows, k]
    inside = (cross > 0).all(1) | (cross < 0).all(1)
    sign = np.where(inside, 1.0, -1.0)
    safe = np.where(d > 0, d, 1.0)
    normal = np.where((d > 0)[:, None], (q - p) / safe[:, None], 0.0)
    # d(dist)/d(segment start) = (1-u) n, d(dist)/d(segment end) = u n
    grads = np.zeros((len(p), 3, 2))
    grads[rows, k] = (1.0 - u)[:, None] * normal
    grads[rows, (k + 1) % 3] += u[:, None] * normal
    return sign * d, sign[:, None, None] * grads


def _soft_silhouette_single(uv, faces, height, width, sharpness, cull):
    n_pix = height * width
    if len(faces) == 0:
        return np.zeros(n_pix), None
    tri = uv[faces]
    margin = None if cull is None else cull / sharpness
    f_idx, pix = _face_pixel_pairs(tri, height, width, margin)
    if len(f_idx) == 0:
        return np.zeros(n_pix), None
    p = np.stack([pix % width, pix // width], axis=1).astype(np.float64)
    t = tri[f_idx]
    d, dd = _signed_distance(p, t[:, 0], t[:, 1], t[:, 2])
    x = sharpness * d
    total = np.bincount(pix, weights=ad._softplus(x), minlength=n_pix)
    empty = np.exp(-total)
    mask = 1.0 - empty
    return mask, (f_idx, pix, x, dd, empty)


def soft_silhouette(uv, faces, height, width, sharpness, cull=CULL_CUTOFF):
    """Soft occupancy (Bt, H, W) of projected triangles.

    Each pixel is covered with probability 1 - prod_f (1 - sigmoid(s * d_f)),
    d_f the signed pixel-centre distance to face f.  Faces are culled from
    pixels farther than ``cull / sharpness`` outside; ``cull=None`` keeps all.
    """
    uv = ad.as_tensor(uv)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    squeeze = uv.ndim == 2
    data = uv.data[None] if squeeze else uv.data
    masks, saved = [], []
    for item in data:
        m, s = _soft_silhouette_single(item, faces, height, width, sharpness, cull)
        masks.append(m.reshape(height, width))
        saved.append(s)
    value = np.stack(masks)

    def pullback(g):
        g = g.reshape(len(data), -1)
        grad = np.zeros_like(data)
        for b, s in enumerate(saved):
            if s is None:
                continue
            f_idx, pix, x, dd, empty = s
            coef = g[b, pix] * empty[pix] * sharpness * ad._sigmoid(x)
            contrib = coef[:, None, None] * dd  # (P, 3, 2)
            verts = faces[f_idx]  # (P, 3)
            n = data.shape[1]
            for axis in range(2):
                grad[b, :, axis] = np.bincount(
                    verts.reshape(-1), weights=contrib[:, :, axis].reshape(-1), minlength=n
                )
        return (grad[0] if squeeze else grad,)

    return ad.make_op(value[0] if squeeze else value, (uv,), pullback)


def rasterize_soft(V, faces, camera, sharpness=60.0, focal=None, cull=CULL_CUTOFF):
    """Soft silhouette of 3-D vertices ``V`` (Bt, C, 3) seen through ``camera``."""
    uv = project(V, camera, focal)
    return soft_silhouette(uv, faces, camera.height, camera.width, sharpness, cull)


# ------------------------------------------------------------------ sampling


def _bilinear(fmap, xy):
    """Bilinear lookup of ``fmap`` (Bt, Hm, Wm, D) at map coords ``xy`` (Bt, K, 2),
    clamped to the border."""
    fmap, xy = ad.as_tensor(fmap), ad.as_tensor(xy)
    bsz, hm, wm, dch = fmap.shape
    k = xy.shape[1]
    x = np.clip(xy.data[..., 0], 0.0, wm - 1)
    y = np.clip(xy.data[..., 1], 0.0, hm - 1)
    inside_x = (xy.data[..., 0] >= 0) & (xy.data[..., 0] <= wm - 1)
    inside_y = (xy.data[..., 1] >= 0) & (xy.data[..., 1] <= hm - 1)
    x0 = np.minimum(np.floor(x), max(wm - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(hm - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, wm - 1)
    y1 = np.minimum(y0 + 1, hm - 1)
    fx, fy = x - x0, y - y0
    weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    cells = [y0 * wm + x0, y0 * wm + x1, y1 * wm + x0, y1 * wm + x1]
    flat = fmap.data.reshape(bsz, hm * wm, dch)
    mats = []
    for b in range(bsz):
        rows = np.concatenate([np.arange(k)] * 4)
        cols = np.concatenate([c[b] for c in cells])
        vals = np.concatenate([w[b] for w in weights])
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(k, hm * wm)))
    value = np.stack([mats[b] @ flat[b] for b in range(bsz)])

    def pullback(g):
        gf = None
        if fmap.requires_grad:
            gf = np.stack([mats[b].T @ g[b] for b in range(bsz)]).reshape(fmap.shape)
        gxy = None
        if xy.requires_grad:
            f = [np.take_along_axis(flat, c[..., None], axis=1) for c in cells]
            dx = (1 - fy)[..., None] * (f[1] - f[0]) + fy[..., None] * (f[3] - f[2])
            dy = (1 - fx)[..., None] * (f[2] - f[0]) + fx[..., None] * (f[3] - f[1])
            gxy = np.stack([(g * dx).sum(-1) * inside_x, (g * dy).sum(-1) * inside_y], axis=-1)
        return gf, gxy

    return ad.make_op(value, (fmap, xy), pullback)


def sample_features(feature_maps, p, image_size):
    """Per-point features from every map, concatenated along channels.

    ``p`` (Bt, K, 2) holds pixel coordinates of the input image; each map is
    sampled at ``p`` rescaled to its own resolution.
    """
    height, width = image_size
    p = ad.as_tensor(p)
    parts = []
    for fmap in feature_maps:
        hm, wm = fmap.shape[1:3]
        scale = np.array([wm / width, hm / height])
        xy = (p + 0.5) * scale - 0.5
        parts.append(_bilinear(fmap, xy))
    return ad.concat(parts, axis=-1)


# ------------------------------------------------------------- hard renders


def render_depth(vertices, faces, camera, focal=None):
    """Z-buffered depth (H, W; inf = background) and face-id map (-1 = background)."""
    f = camera.f if focal is None else float(focal)
    v = np.asarray(vertices, dtype=np.float64)
    z = np.maximum(v[:, 2], Z_NEAR)
    uv = f * v[:, :2] / z[:, None] + np.array([camera.cx, camera.cy])
    tri = uv[faces]
    H, W = camera.height, camera.width
    f_idx, pix = _face_pixel_pairs(tri, H, W, 0.0)
    depth = np.full(H * W, np.inf)
    face_id = np.full(H * W, -1, dtype=np.int64)
    if len(f_idx) == 0:
        return depth.reshape(H, W), face_id.reshape(H, W)
    p = np.stack([pix % W, pix // W], axis=1).astype(np.float64)
    a, b, c = tri[f_idx, 0], tri[f_idx, 1], tri[f_idx, 2]
    den = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    l0 = ((b[:, 1] - c[:, 1]) * (p[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (p[:, 1] - c[:, 1])) / den
    l1 = ((c[:, 1] - a[:, 1]) * (p[:, 0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (p[:, 1] - c[:, 1])) / den
    l2 = 1.0 - l0 - l1
    hit = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    zf = z[faces[f_idx]]
    # perspective-correct depth: interpolate 1/z
    inv = l0 / zf[:, 0] + l1 / zf[:, 1] + l2 / zf[:, 2]
    dz = np.where(hit, 1.0 / np.where(hit, inv, 1.0), np.inf)
    order = np.lexsort((f_idx, dz))
    first = np.unique(pix[order], return_index=True)
    sel = order[first[1]]
    sel = sel[np.isfinite(dz[sel])]
    depth[pix[sel]] = dz[sel]
    face_id[pix[sel]] = f_idx[sel]
    return depth.reshape(H, W), face_id.reshape(H, W)


def write_mask_png(mask, path, threshold=0.5):
    """8-bit grayscale PNG, 255 where ``mask`` exceeds ``threshold``."""
    img = (np.asarray(mask) > threshold).astype(np.uint8) * 255
    Image.fromarray(img, mode="L").save(path)


def overlay_image(image, gt_mask, pred_mask, gt_kp=None, pred_kp=None, visibility=None, scale=4):
    """RGB overlay: ground-truth-only pixels red, prediction-only green, overlap
    yellow, blended over the input; ground-truth keypoints as crosses and
    predicted keypoints as circles."""
    base = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    gt = np.asarray(gt_mask) > 0.5
    pr = np.asarray(pred_mask) > 0.5
    colour = np.zeros_like(base)
    colour[gt & ~pr] = (1.0, 0.0, 0.0)
    colour[pr & ~gt] = (0.0, 1.0, 0.0)
    colour[gt & pr] = (1.0, 1.0, 0.0)
    covered = (gt | pr)[..., None]
    out = np.where(covered, 0.4 * base + 0.6 * colour, base)
    img = Image.fromarray((out * 255).round().astype(np.uint8), mode="RGB")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    r = max(2, scale)
    vis = np.ones(len(gt_kp) if gt_kp is not None else 0, dtype=bool) if visibility is None else np.asarray(visibility) > 0
    if gt_kp is not None:
        for (u, v), ok in zip(np.asarray(gt_kp), vis):
            if ok:
                x, y = (u + 0.5) * scale, (v + 0.5) * scale
                draw.line([(x - r, y - r), (x + r, y + r)], fill=(0, 0, 255), width=2)
                draw.line([(x - r, y + r), (x + r, y - r)], fill=(0, 0, 255), width=2)
    if pred_kp is not None:
        for u, v in np.asarray(pred_kp):
            x, y = (u + 0.5) * scale, (v + 0.5) * scale
            draw.ellipse([(x - r, y - r), (x + r, y + r)], outline=(255, 0, 255), width=2)
    return img
