"""Parametric articulated model: PCA shape, axis-angle pose, linear blend skinning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .meshkit import Mesh

SERIES_THRESHOLD = 1e-2


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArticulatedModel:
    template: np.ndarray  # C x 3
    faces: np.ndarray  # F x 3
    shape_basis: np.ndarray  # B x 3C
    parents: np.ndarray  # N, root parent -1
    skin_weights: np.ndarray  # C x N
    regressor: np.ndarray  # N x C
    shape_mean: np.ndarray
    shape_cov: np.ndarray
    pose_mean: np.ndarray  # 3N
    pose_cov: np.ndarray
    pose_min: np.ndarray
    pose_max: np.ndarray
    joint_names: tuple = field(default=())

    def __post_init__(self):
        C, N, B = self.n_vertices, self.n_joints, self.n_shape
        checks = [
            (self.template.shape == (C, 3), "template"),
            (self.shape_basis.shape == (B, 3 * C), "shape_basis"),
            (self.skin_weights.shape == (C, N), "skin_weights"),
            (self.regressor.shape == (N, C), "regressor"),
            (self.shape_mean.shape == (B,) and self.shape_cov.shape == (B, B), "shape prior"),
            (self.pose_mean.shape == (3 * N,) and self.pose_cov.shape == (3 * N, 3 * N), "pose prior"),
            (self.pose_min.shape == (3 * N,) and self.pose_max.shape == (3 * N,), "pose limits"),
        ]
        for ok, what in checks:
            if not ok:
                raise ModelFormatError(f"inconsistent dimensions: {what}")
        if self.parents[0] != -1 or any(not (0 <= p < j) for j, p in enumerate(self.parents[1:], 1)):
            raise ModelFormatError("kinematic tree must list parents before children with root first")
        if np.abs(self.skin_weights.sum(1) - 1).max() > 1e-9 or self.skin_weights.min() < 0:
            raise ModelFormatError("skin weight rows must be nonnegative and sum to 1")
        if np.any(self.pose_min > self.pose_max):
            raise ModelFormatError("pose_min exceeds pose_max")
        Mesh(self.template, self.faces)
        for name in ("shape_cov", "pose_cov"):
            cov = getattr(self, name)
            if not np.allclose(cov, cov.T):
                raise ModelFormatError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ModelFormatError(f"{name} is not positive definite") from exc

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_shape(self):
        return self.shape_basis.shape[0]

    @property
    def shape_chol(self):
        return np.linalg.cholesky(self.shape_cov)

    @property
    def pose_chol(self):
        return np.linalg.cholesky(self.pose_cov)

    def mesh(self):
        return Mesh(self.template, self.faces)


# ----------------------------------------------------------------- rotations


def rodrigues(axis_angle):
    """3x3 rotation matrix of a single axis-angle vector (numpy)."""
    return rodrigues_t(ad.Tensor(np.asarray(axis_angle, dtype=np.float64))).data


_SKEW = np.zeros((3, 9))
# K = [[0,-z,y],[z,0,-x],[-y,x,0]] flattened row-major
for _col, _row, _sign in ((1, 2, -1), (2, 1, 1), (3, 2, 1), (5, 0, -1), (6, 1, -1), (7, 0, 1)):
    _SKEW[_row, _col] = _sign


def _rotation_coefficients(t):
    """a = sin(r)/r, b = (1-cos r)/r^2 and their t-derivatives, r = sqrt(t)."""
    r = np.sqrt(t)
    small = r < SERIES_THRESHOLD
    rs = np.where(small, 1.0, r)
    ts = rs * rs
    a = np.where(small, 1 - t / 6 + t * t / 120 - t**3 / 5040, np.sin(rs) / rs)
    half = np.sin(rs / 2) / (rs / 2)
    b = np.where(small, 0.5 - t / 24 + t * t / 720 - t**3 / 40320, 0.5 * half * half)
    da = np.where(small, -1 / 6 + t / 60 - t * t / 1680, (np.cos(rs) - a) / (2 * ts))
    db = np.where(small, -1 / 24 + t / 360 - t * t / 13440, (a / 2 - b) / ts)
    return a, b, da, db


def _coefficient_op(t):
    a, b, da, db = _rotation_coefficients(t.data)
    out_a = ad.make_op(a, (t,), lambda g: (g * da,))
    out_b = ad.make_op(b, (t,), lambda g: (g * db,))
    return out_a, out_b


def rodrigues_t(v):
    """Batched axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    v = ad.as_tensor(v)
    lead = v.shape[:-1]
    t = (v * v).sum(axis=-1)
    a, b = _coefficient_op(t)
    K = ad.reshape(ad.matmul(ad.reshape(v, (-1, 3)), _SKEW), lead + (3, 3))
    K2 = ad.matmul(K, K)
    a = ad.reshape(a, lead + (1, 1))
    b = ad.reshape(b, lead + (1, 1))
    return np.eye(3) + a * K + b * K2


# ------------------------------------------------------------------- forward


def _as_batch(x, width):
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, width))
    return x


def shaped_template(model, betas):
    """Template plus PCA shape offsets, (Bt, C, 3)."""
    betas = _as_batch(betas, model.n_shape)
    if betas.shape[-1] != model.n_shape:
        raise ValueError(f"expected {model.n_shape} shape coefficients, got {betas.shape[-1]}")
    offsets = ad.reshape(ad.matmul(betas, model.shape_basis), (-1, model.n_vertices, 3))
    return offsets + model.template


def forward(model, betas, pose, trans, return_joints=False):
    """Posed vertices (Bt, C, 3) for shape ``betas`` (Bt, B), axis-angle ``pose``
    (Bt, N, 3) or (Bt, 3N) and global translation ``trans`` (Bt, 3).

    Inputs may be numpy arrays or Tensors; 1-D inputs are treated as a batch of one.
    """
    N = model.n_joints
    pose = ad.as_tensor(pose)
    if pose.ndim == 1 or (pose.ndim == 2 and pose.shape == (N, 3)):
        pose = ad.reshape(pose, (1, N, 3))
    pose = ad.reshape(pose, (pose.shape[0], -1))
    if pose.shape[-1] != 3 * N:
        raise ValueError(f"expected {3 * N} pose values, got {pose.shape[-1]}")
    pose = ad.reshape(pose, (-1, N, 3))
    trans = _as_batch(trans, 3)
    if trans.shape[-1] != 3:
        raise ValueError("translation must have 3 components")
    shaped = shaped_template(model, betas)
    bsz = shaped.shape[0]
    if pose.shape[0] != bsz or trans.shape[0] != bsz:
        raise ValueError("batch sizes of shape, pose and translation differ")

    joints = ad.matmul(model.regressor, shaped)  # (Bt, N, 3)
    rots = rodrigues_t(pose)  # (Bt, N, 3, 3)
    world_r, world_t = [], []
    for j, p in enumerate(model.parents):
        Rj = rots[:, j]
        Jj = joints[:, j]
        if p < 0:
            world_r.append(Rj)
            world_t.append(Jj)
            continue
        offset = ad.reshape(Jj - joints[:, p], (bsz, 3, 1))
        world_r.append(ad.matmul(world_r[p], Rj))
        world_t.append(ad.reshape(ad.matmul(world_r[p], offset), (bsz, 3)) + world_t[p])
    R = ad.stack(world_r, axis=1)  # (Bt, N, 3, 3)
    t = ad.stack(world_t, axis=1)  # (Bt, N, 3)
    rest = ad.reshape(ad.matmul(R, ad.reshape(joints, (bsz, N, 3, 1))), (bsz, N, 3))
    t_rel = t - rest
    blend_r = ad.reshape(ad.matmul(model.skin_weights, ad.reshape(R, (bsz, N, 9))), (bsz, -1, 3, 3))
    blend_t = ad.matmul(model.skin_weights, t_rel)
    C = model.n_vertices
    posed = ad.reshape(ad.matmul(blend_r, ad.reshape(shaped, (bsz, C, 3, 1))), (bsz, C, 3)) + blend_t
    verts = posed + ad.reshape(trans, (bsz, 1, 3))
    if return_joints:
        return verts, t + ad.reshape(trans, (bsz, 1, 3))
    return verts


def regress_joints(model, V):
    """Joint locations W @ V; ``V`` is (C, 3) or (Bt, C, 3)."""
    if isinstance(V, ad.Tensor):
        return ad.matmul(model.regressor, V)
    return model.regressor @ np.asarray(V)


# ---------------------------------------------------------------- toy model


@dataclass(frozen=True)
class ToySpec:
    n_vertices: int = 482
    n_joints: int = 9
    n_shape: int = 4
    shape_sigma: float = 1.0
    pose_sigma: float = 0.4


JOINT_NAMES = (
    "root", "neck", "tail", "leg_front_left", "leg_front_right",
    "leg_back_left", "leg_back_right", "ear_left", "ear_right",
)
TOY_PARENTS = np.array([-1, 0, 0, 0, 0, 0, 0, 1, 1])
TOY_PART_MAP = {"legs": [3, 4, 5, 6], "tail": [2], "ears": [7, 8], "face": [1]}

# (joint, centre, radii, long axis, rings, segments, squareness exponent)
_PARTS = (
    (0, (0.0, 0.0, 0.0), (1.0, 0.42, 0.38), "x", 10, 12, 1.0),
    (1, (1.22, -0.38, 0.0), (0.36, 0.27, 0.25), "x", 6, 10, 1.0),
    (3, (0.62, 0.68, -0.2), (0.12, 0.58, 0.12), "y", 6, 8, 0.4),
    (4, (0.62, 0.68, 0.2), (0.12, 0.58, 0.12), "y", 6, 8, 0.4),
    (5, (-0.62, 0.68, -0.2), (0.13, 0.58, 0.13), "y", 6, 8, 0.4),
    (6, (-0.62, 0.68, 0.2), (0.13, 0.58, 0.13), "y", 6, 8, 0.4),
    (2, (-1.25, -0.38, 0.0), (0.42, 0.1, 0.1), "x", 4, 11, 1.0),
    (7, (1.22, -0.68, -0.12), (0.07, 0.15, 0.05), "y", 3, 8, 1.0),
    (8, (1.22, -0.68, 0.12), (0.07, 0.15, 0.05), "y", 3, 8, 1.0),
)
_JOINT_REST = {
    0: (0.0, 0.0, 0.0), 1: (0.88, -0.22, 0.0), 2: (-0.9, -0.25, 0.0),
    3: (0.62, 0.2, -0.2), 4: (0.62, 0.2, 0.2), 5: (-0.62, 0.2, -0.2), 6: (-0.62, 0.2, 0.2),
    7: (1.22, -0.55, -0.12), 8: (1.22, -0.55, 0.12),
}
_TAIL_TILT = 0.5  # radians; raises the tail tip toward -y


def _superquadric(rings, segments, radii, axis, exponent):
    """Closed UV surface, pole along ``axis``; exponent < 1 squares it off."""
    from .meshkit import uv_sphere

    base = uv_sphere(rings, segments)
    p = base.vertices.copy()
    sgn = np.sign(p)
    p = sgn * np.abs(p) ** exponent
    if axis == "x":
        # swap + mirror keeps the winding outward
        p = p[:, [1, 0, 2]] * np.array([1, -1, 1])
    return p * np.asarray(radii), base.faces


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def make_toy_model(spec=ToySpec(), seed=0):
    """Deterministic synthetic quadruped standing in for a learned animal model."""
    if spec.n_joints != 9:
        raise ValueError("the toy quadruped has exactly 9 joints")
    scale = math.sqrt(spec.n_vertices / 482.0)
    verts, faces, part = [], [], []
    offset = 0
    for joint, centre, radii, axis, rings, segs, expo in _PARTS:
        rings = max(2, round(rings * scale))
        segs = max(4, round(segs * scale))
        p, f = _superquadric(rings, segs, radii, axis, expo)
        if joint == 2:
            c, s = math.cos(_TAIL_TILT), math.sin(_TAIL_TILT)
            p = p @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
        verts.append(p + np.asarray(centre))
        faces.append(f + offset)
        part.append(np.full(len(p), joint))
        offset += len(p)
    template = np.concatenate(verts)
    faces = np.concatenate(faces)
    part = np.concatenate(part)
    C, N = len(template), spec.n_joints

    joint_pos = np.array([_JOINT_REST[j] for j in range(N)])
    skin = np.zeros((C, N))
    for v in range(C):
        j = part[v]
        if j == 0:
            skin[v, 0] = 1.0
            continue
        w = _smoothstep(np.linalg.norm(template[v] - joint_pos[j]) / 0.25)
        skin[v, j] = w
        skin[v, TOY_PARENTS[j]] += 1.0 - w

    regressor = np.zeros((N, C))
    for j in range(N):
        near = (part == j) | (part == TOY_PARENTS[j]) if j else (part == 0)
        d2 = ((template - joint_pos[j]) ** 2).sum(1)
        w = np.where(near, np.exp(-d2 / (2 * 0.15**2)), 0.0)
        if j == 0:
            w = near.astype(float)
        regressor[j] = w / w.sum()

    shape_basis = _toy_shape_basis(template, part, spec.n_shape, seed)

    limits = np.tile(np.array([0.8, 0.8, 0.8]), (N, 1))
    limits[0] = (0.15, 0.3, 0.15)
    limits[1] = (0.2, 0.4, 0.6)
    limits[2] = (0.4, 0.6, 0.8)
    limits[3:7] = (0.3, 0.1, 0.7)
    limits[7:9] = (0.4, 0.1, 0.4)
    limits = limits.reshape(-1)
    return ArticulatedModel(
        template=template,
        faces=faces,
        shape_basis=shape_basis,
        parents=TOY_PARENTS.copy(),
        skin_weights=skin,
        regressor=regressor,
        shape_mean=np.zeros(spec.n_shape),
        shape_cov=spec.shape_sigma**2 * np.eye(spec.n_shape),
        pose_mean=np.zeros(3 * N),
        pose_cov=spec.pose_sigma**2 * np.eye(3 * N),
        pose_min=-limits,
        pose_max=limits,
        joint_names=JOINT_NAMES,
    )


def _toy_shape_basis(template, part, n_shape, seed):
    """Smooth deformation fields (length, girth, legs, head) mixed by a seeded rotation."""
    fields = []
    length = np.zeros_like(template)
    length[:, 0] = 0.12 * template[:, 0]
    fields.append(length)
    girth = np.zeros_like(template)
    body = part == 0
    girth[body, 1:] = 0.12 * template[body, 1:]
    fields.append(girth)
    legs = np.zeros_like(template)
    leg = np.isin(part, [3, 4, 5, 6])
    legs[leg, 1] = 0.15 * (template[leg, 1] - 0.1)
    fields.append(legs)
    head = np.zeros_like(template)
    hd = np.isin(part, [1, 7, 8])
    head[hd] = 0.12 * (template[hd] - np.array([1.0, -0.38, 0.0]))
    fields.append(head)
    rng = np.random.default_rng(seed)
    while len(fields) < n_shape:
        fields.append(0.05 * np.sin(template @ rng.normal(size=(3, 3))))
    basis = np.stack([f.reshape(-1) for f in fields[:n_shape]])
    q, r = np.linalg.qr(rng.normal(size=(n_shape, n_shape)))
    q = q * np.sign(np.diag(r))
    return q @ basis


# ------------------------------------------------------------------ file I/O

MODEL_MAGIC = b"C2FMODEL"
MODEL_VERSION = 1


def save_model(model, path):
    """Binary container: magic, version and (C, N, B, F), then arrays in order
    template, shape_basis, parents, faces, skin_weights, regressor, shape_mean,
    shape_cov, pose_mean, pose_cov, pose_min, pose_max and the joint-name block.
    Real arrays are little-endian float64, index arrays little-endian int64."""
    C, N, B, F = model.n_vertices, model.n_joints, model.n_shape, len(model.faces)
    names = "\n".join(model.joint_names).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIIII", MODEL_VERSION, C, N, B, F))
        fh.write(model.template.astype("<f8").tobytes())
        fh.write(model.shape_basis.astype("<f8").tobytes())
        fh.write(np.asarray(model.parents).astype("<i8").tobytes())
        fh.write(model.faces.astype("<i8").tobytes())
        for arr in (
            model.skin_weights, model.regressor, model.shape_mean, model.shape_cov,
            model.pose_mean, model.pose_cov, model.pose_min, model.pose_max,
        ):
            fh.write(np.asarray(arr).astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(names)))
        fh.write(names)


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    pos = len(MODEL_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(f"{path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, C, N, B, F = struct.unpack("<IIIII", take(20))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")

    def floats(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(take(8 * n), "<f8").reshape(shape).astype(np.float64)

    def ints(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(take(8 * n), "<i8").reshape(shape).astype(np.int64)

    template = floats(C, 3)
    shape_basis = floats(B, 3 * C)
    parents = ints(N)
    faces = ints(F, 3)
    skin = floats(C, N)
    regressor = floats(N, C)
    shape_mean, shape_cov = floats(B), floats(B, B)
    pose_mean, pose_cov = floats(3 * N), floats(3 * N, 3 * N)
    pose_min, pose_max = floats(3 * N), floats(3 * N)
    (name_len,) = struct.unpack("<I", take(4))
    names = take(name_len).decode()
    if pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - pos} trailing bytes")
    try:
        return ArticulatedModel(
            template, faces, shape_basis, parents, skin, regressor, shape_mean, shape_cov,
            pose_mean, pose_cov, pose_min, pose_max, tuple(names.split("\n")) if names else (),
        )
    except Exception as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
