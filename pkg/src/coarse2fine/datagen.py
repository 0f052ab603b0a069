"""Synthetic sample generation, annotation files and crop preprocessing."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from . import artmodel as am
from .camrender import Camera, project, rasterize_soft, render_depth

log = logging.getLogger(__name__)

IDENTITY_TRANSFORM = (1.0, 0.0, 0.0)


class AnnotationError(ValueError):
    pass


@dataclass
class TrainingSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    keypoints: np.ndarray  # N x 2 pixels
    visibility: np.ndarray  # N, 0/1
    silhouette: np.ndarray  # H x W, 0/1
    bbox: tuple | None = None  # x, y, w, h in pixel-edge coordinates
    # crop = scale * (orig + 0.5 - origin) - 0.5 with transform = (scale, origin_x, origin_y)
    transform: tuple = IDENTITY_TRANSFORM
    gt: dict | None = None  # betas, pose, trans, focal for synthetic samples
    name: str = ""

    @property
    def size(self):
        return self.image.shape[:2]

    def to_original(self, uv):
        s, ox, oy = self.transform
        return (np.asarray(uv) + 0.5) / s - 0.5 + np.array([ox, oy])

    def original_area(self):
        """Silhouette area measured in original-image pixels."""
        return float(self.silhouette.sum()) / self.transform[0] ** 2


def validate_sample(sample):
    """Raise AnnotationError unless the sample satisfies the data invariants."""
    H, W = sample.size
    if sample.image.ndim != 3 or sample.image.shape[2] != 3:
        raise AnnotationError("image must be H x W x 3")
    if sample.image.min() < 0 or sample.image.max() > 1:
        raise AnnotationError("image values outside [0, 1]")
    if sample.silhouette.shape != (H, W):
        raise AnnotationError("silhouette shape differs from image")
    if not sample.silhouette.any():
        raise AnnotationError("empty silhouette")
    vis = sample.visibility > 0
    kp = sample.keypoints[vis]
    if len(kp) and (
        (kp[:, 0] < -0.5 * W).any() or (kp[:, 0] > 1.5 * W).any()
        or (kp[:, 1] < -0.5 * H).any() or (kp[:, 1] > 1.5 * H).any()
    ):
        raise AnnotationError("visible keypoint far outside the frame")
    return sample


@dataclass
class Batch:
    images: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray
    silhouettes: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    n_kp: int = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], self.n_kp)

    def epoch_order(self, seed, epoch):
        """Sample order for an epoch; a pure function of (seed, epoch)."""
        return np.random.default_rng([seed, epoch]).permutation(len(self.samples))

    def collate(self, indices):
        ss = [self.samples[i] for i in indices]
        return Batch(
            np.stack([s.image for s in ss]),
            np.stack([s.keypoints for s in ss]),
            np.stack([s.visibility for s in ss]).astype(np.float64),
            np.stack([s.silhouette for s in ss]).astype(np.float64),
            np.asarray(indices),
        )

    def batches(self, batch_size, seed=None, epoch=0):
        order = np.arange(len(self)) if seed is None else self.epoch_order(seed, epoch)
        for start in range(0, len(order), batch_size):
            yield self.collate(order[start : start + batch_size])


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class CameraSpec:
    image_size: int = 64
    focal_range: tuple = (90.0, 130.0)
    depth_range: tuple = (6.8, 7.2)
    x_range: tuple = (-0.25, 0.25)
    y_range: tuple = (-0.45, -0.05)
    noise_sigma: float = 0.02
    mask_sharpness: float = 1000.0
    min_area: int = 50
    max_retries: int = 100

    def camera(self, focal=None):
        f = focal if focal is not None else 0.5 * sum(self.focal_range)
        return Camera.centered(f, self.image_size, self.image_size)


_PART_ALBEDO = np.array([
    (0.85, 0.65, 0.45), (0.95, 0.85, 0.60), (0.55, 0.40, 0.30),
    (0.70, 0.45, 0.25), (0.70, 0.50, 0.30), (0.60, 0.40, 0.25),
    (0.60, 0.45, 0.30), (0.45, 0.30, 0.20), (0.45, 0.30, 0.25),
])
_LIGHT = np.array([-0.3, -0.6, -0.75]) / np.linalg.norm([-0.3, -0.6, -0.75])


def shade_image(model, vertices, silhouette, camera):
    """Silhouette-matted flat shading: part albedo x Lambert term x depth falloff."""
    depth, face_id = render_depth(vertices, model.faces, camera)
    tri = vertices[model.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    lambert = 0.35 + 0.65 * np.abs(normals @ _LIGHT)
    part = model.skin_weights.argmax(axis=1)[model.faces[:, 0]]
    albedo = _PART_ALBEDO[part % len(_PART_ALBEDO)]
    hit = face_id >= 0
    img = np.zeros(depth.shape + (3,))
    if hit.any():
        zmin, zmax = depth[hit].min(), depth[hit].max()
        fall = 1.0 - 0.4 * (depth[hit] - zmin) / max(zmax - zmin, 1e-9)
        img[hit] = albedo[face_id[hit]] * (lambert[face_id[hit]] * fall)[:, None]
        fill = img[hit].mean(axis=0)
    else:
        fill = np.full(3, 0.5)
    img[(silhouette > 0) & ~hit] = fill
    return img * (silhouette > 0)[..., None]


def render_sample(model, betas, pose, trans, focal, spec, rng=None):
    camera = spec.camera(focal)
    V, _ = am.forward(model, betas, pose, trans, return_joints=True)
    V = V.data[0]
    joints = am.regress_joints(model, V)
    kp, behind = project(joints, camera, return_flags=True)
    mask = rasterize_soft(V[None], model.faces, camera, spec.mask_sharpness).data[0]
    silhouette = (mask > 0.5).astype(np.float64)
    image = shade_image(model, V, silhouette, camera)
    if rng is not None and spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return TrainingSample(
        image=image,
        keypoints=kp.data,
        visibility=(~behind).astype(np.float64),
        silhouette=silhouette,
        bbox=(0.0, 0.0, float(spec.image_size), float(spec.image_size)),
        gt={"betas": np.asarray(betas, float), "pose": np.asarray(pose, float),
            "trans": np.asarray(trans, float), "focal": float(focal)},
    )


def draw_params(model, spec, rng):
    betas = model.shape_mean + model.shape_chol @ rng.normal(size=model.n_shape)
    pose = model.pose_mean + model.pose_chol @ rng.normal(size=3 * model.n_joints)
    pose = np.clip(pose, model.pose_min, model.pose_max)
    trans = np.array([rng.uniform(*spec.x_range), rng.uniform(*spec.y_range), rng.uniform(*spec.depth_range)])
    focal = rng.uniform(*spec.focal_range)
    return betas, pose, trans, focal


def synth_generate(model, count, camera_spec=CameraSpec(), seed=0):
    """``count`` rendered samples with ground-truth parameters; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        for _attempt in range(camera_spec.max_retries):
            params = draw_params(model, camera_spec, rng)
            sample = render_sample(model, *params, camera_spec, rng)
            if sample.silhouette.sum() >= camera_spec.min_area:
                break
        else:
            raise RuntimeError(f"could not draw a non-degenerate sample after {camera_spec.max_retries} tries")
        sample.name = f"{i:06d}"
        samples.append(validate_sample(sample))
    return Dataset(samples, model.n_joints)


# --------------------------------------------------------------- crop/resize


def _coverage_matrix(n_out, scale, origin, n_in):
    """(n_out, n_in) fraction of each output pixel's footprint lying on each input pixel."""
    lo = np.arange(n_out)[:, None] / scale + origin
    hi = lo + 1.0 / scale
    edges = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, edges + 1) - np.maximum(lo, edges), 0.0, None)
    return overlap * scale


def _bilinear_resample(arr, xs, ys, pad=None, nearest=False):
    """Sample ``arr`` (H, W[, C]) at float pixel-centre coords with edge clamping,
    or with a constant border ``pad`` beyond the outer pixel centres."""
    if pad is not None:
        arr = np.pad(arr, [(1, 1), (1, 1)] + [(0, 0)] * (arr.ndim - 2), constant_values=pad)
        xs, ys = xs + 1, ys + 1
    H, W = arr.shape[:2]
    if nearest:  # round half up
        return arr[np.clip(np.floor(ys + 0.5).astype(int), 0, H - 1), np.clip(np.floor(xs + 0.5).astype(int), 0, W - 1)]
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    x0 = np.minimum(np.floor(xs).astype(int), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(int), max(H - 2, 0))
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    fx, fy = xs - x0, ys - y0
    if arr.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    return (
        arr[y0, x0] * (1 - fx) * (1 - fy) + arr[y0, x1] * fx * (1 - fy)
        + arr[y1, x0] * (1 - fx) * fy + arr[y1, x1] * fx * fy
    )


def crop_and_resize(sample, bbox, out_size, margin=0.05):
    """Square crop around ``bbox`` (x, y, w, h; pixel-edge coords) grown by
    ``margin`` per side, capped at the image's longer side, resampled to
    ``out_size`` x ``out_size``.  Keypoints and silhouette follow; the crop
    transform is recorded relative to the original image."""
    H, W = sample.size
    x, y, w, h = bbox
    if w <= 0 or h <= 0 or x >= W or y >= H or x + w <= 0 or y + h <= 0:
        raise AnnotationError("bounding box does not intersect the image")
    side = min(max(w, h) * (1 + 2 * margin), max(W, H))
    cx, cy = x + w / 2, y + h / 2
    ox, oy = cx - side / 2, cy - side / 2
    scale = out_size / side
    grid = (np.arange(out_size) + 0.5) / scale - 0.5
    xs, ys = np.meshgrid(grid + ox, grid + oy)
    image = np.clip(_bilinear_resample(sample.image, xs, ys), 0, 1)
    # images replicate their edge; outside the frame is background for the mask
    # mask: exact box coverage of each output pixel (area preserving), outside the frame is background
    cover = _coverage_matrix(out_size, scale, oy, H) @ sample.silhouette @ _coverage_matrix(out_size, scale, ox, W).T
    near = _bilinear_resample(sample.silhouette.astype(float), xs, ys, pad=0.0, nearest=True)
    silhouette = np.where(np.abs(cover - 0.5) < 1e-9, near, cover > 0.5).astype(np.float64)
    kp = scale * (sample.keypoints + 0.5 - np.array([ox, oy])) - 0.5
    # compose with any earlier transform
    s0, ox0, oy0 = sample.transform
    transform = (scale * s0, ox0 + ox / s0, oy0 + oy / s0)
    return replace(sample, image=image, silhouette=silhouette, keypoints=kp, transform=transform,
                   bbox=(0.0, 0.0, float(out_size), float(out_size)))


# ------------------------------------------------------------- annotations

HEADER = "# coarse2fine annotations v1"


def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _fmt(values):
    return ",".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def load_image(path):
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.asarray(arr, dtype=np.float64)


def load_mask(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.float64)


def parse_record(line, n_kp, lineno):
    rec = {}
    for tok in line.split():
        if "=" not in tok:
            raise AnnotationError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        rec[k] = v
    for key in ("image", "mask", "bbox", "keypoints"):
        if key not in rec:
            raise AnnotationError(f"line {lineno}: missing {key}")
    try:
        bbox = tuple(_floats(rec["bbox"]))
        kps = np.array(_floats(rec["keypoints"].replace(";", ",")))
        gt = None
        if "focal" in rec:
            gt = {k: np.array(_floats(rec[k])) for k in ("betas", "pose", "trans")}
            gt["focal"] = float(rec["focal"])
        transform = tuple(_floats(rec["transform"])) if "transform" in rec else IDENTITY_TRANSFORM
    except (ValueError, KeyError) as exc:
        raise AnnotationError(f"line {lineno}: {exc}") from exc
    if len(bbox) != 4:
        raise AnnotationError(f"line {lineno}: bbox needs 4 numbers")
    if kps.size != 3 * n_kp:
        raise AnnotationError(f"line {lineno}: expected {n_kp} keypoint triples, got {kps.size / 3:g}")
    if len(transform) != 3:
        raise AnnotationError(f"line {lineno}: transform needs 3 numbers")
    kps = kps.reshape(n_kp, 3)
    return rec, bbox, kps, gt, transform


def load_annotations(annotation_file, image_root=None, out_size=None, min_visible=1):
    """Read an annotation file into a Dataset.

    Records with missing files, too few visible keypoints or broken invariants
    are skipped with a logged reason; a malformed file raises AnnotationError.
    When ``out_size`` is set every sample is cropped to its bbox and resized.
    """
    root = image_root if image_root is not None else os.path.dirname(os.path.abspath(annotation_file))
    with open(annotation_file) as fh:
        lines = fh.read().splitlines()
    n_kp = None
    samples = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if n_kp is None:
            if not line.startswith("n_kp="):
                raise AnnotationError(f"line {lineno}: header must declare n_kp=<count>")
            try:
                n_kp = int(line.split("=", 1)[1])
            except ValueError as exc:
                raise AnnotationError(f"line {lineno}: bad n_kp") from exc
            continue
        rec, bbox, kps, gt, transform = parse_record(line, n_kp, lineno)
        vis = (kps[:, 2] > 0).astype(np.float64)
        if vis.sum() < min_visible:
            log.info("record %d skipped: too few keypoints", lineno)
            continue
        img_path = os.path.join(root, rec["image"])
        mask_path = os.path.join(root, rec["mask"])
        if not (os.path.exists(img_path) and os.path.exists(mask_path)):
            log.info("record %d skipped: missing image or mask", lineno)
            continue
        sample = TrainingSample(
            image=load_image(img_path), keypoints=kps[:, :2].copy(), visibility=vis,
            silhouette=load_mask(mask_path), bbox=bbox, transform=transform, gt=gt,
            name=rec.get("name", os.path.splitext(os.path.basename(rec["image"]))[0]),
        )
        try:
            if out_size is not None:
                sample = crop_and_resize(sample, bbox, out_size)
            samples.append(validate_sample(sample))
        except AnnotationError as exc:
            log.info("record %d skipped: %s", lineno, exc)
    if n_kp is None:
        n_kp = 0
    return Dataset(samples, n_kp)


def export_annotations(dataset, out_dir, filename="annotations.txt"):
    """Write images (.npy, exact), masks (PNG) and the annotation file."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    path = os.path.join(out_dir, filename)
    with open(path, "w") as fh:
        fh.write(HEADER + "\n")
        fh.write(f"n_kp={dataset.n_kp}\n")
        for i, s in enumerate(dataset.samples):
            name = s.name or f"{i:06d}"
            img_rel = f"images/{name}.npy"
            mask_rel = f"masks/{name}.png"
            np.save(os.path.join(out_dir, img_rel), s.image)
            Image.fromarray((s.silhouette > 0).astype(np.uint8) * 255, mode="L").save(os.path.join(out_dir, mask_rel))
            kp = np.concatenate([s.keypoints, s.visibility[:, None]], axis=1)
            bbox = s.bbox if s.bbox is not None else (0.0, 0.0, float(s.size[1]), float(s.size[0]))
            parts = [f"name={name}", f"image={img_rel}", f"mask={mask_rel}", f"bbox={_fmt(bbox)}",
                     "keypoints=" + ";".join(_fmt(row) for row in kp)]
            if s.transform != IDENTITY_TRANSFORM:
                parts.append(f"transform={_fmt(s.transform)}")
            if s.gt is not None:
                parts += [f"betas={_fmt(s.gt['betas'])}", f"pose={_fmt(s.gt['pose'])}",
                          f"trans={_fmt(s.gt['trans'])}", f"focal={float(s.gt['focal'])!r}"]
            fh.write(" ".join(parts) + "\n")
    return path


# ------------------------------------------------------------ StanfordExtra


def decode_coco_rle(counts, height, width):
    """Decode a COCO run-length mask (compressed string or count list), column-major."""
    if isinstance(counts, str):
        values, pos = [], 0
        data = counts.encode()
        while pos < len(data):
            x, k, more = 0, 0, True
            while more:
                c = data[pos] - 48
                x |= (c & 0x1F) << (5 * k)
                more = bool(c & 0x20)
                pos += 1
                k += 1
                if not more and (c & 0x10):
                    x |= -1 << (5 * k)
            if len(values) > 2:
                x += values[-2]
            values.append(x)
        counts = values
    flat = np.zeros(height * width, dtype=np.uint8)
    pos, val = 0, 0
    for n in counts:
        flat[pos : pos + n] = val
        pos += n
        val ^= 1
    return flat.reshape(width, height).T


def import_stanford_extra(json_path, image_root, out_dir, filename="annotations.txt"):
    """Convert a StanfordExtra-style JSON list (img_path, img_bbox, joints, seg)
    into this package's annotation file, writing masks as PNG."""
    with open(json_path) as fh:
        records = json.load(fh)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    n_kp = len(records[0]["joints"]) if records else 0
    path = os.path.join(out_dir, filename)
    with open(path, "w") as fh:
        fh.write(HEADER + "\n")
        fh.write(f"n_kp={n_kp}\n")
        for i, rec in enumerate(records):
            h, w = int(rec["img_height"]), int(rec["img_width"])
            seg = rec["seg"]
            counts = seg["counts"] if isinstance(seg, dict) else seg
            mask = decode_coco_rle(counts, h, w)
            name = f"se_{i:06d}"
            mask_rel = f"masks/{name}.png"
            Image.fromarray(mask * 255, mode="L").save(os.path.join(out_dir, mask_rel))
            image_rel = os.path.relpath(os.path.join(image_root, rec["img_path"]), out_dir)
            kp = np.asarray(rec["joints"], dtype=np.float64).reshape(-1, 3)
            fh.write(
                f"name={name} image={image_rel} mask={mask_rel} bbox={_fmt(rec['img_bbox'])} "
                + "keypoints=" + ";".join(_fmt(row) for row in kp) + "\n"
            )
    return path
