"""Three-stage training schedule, Adam, gradient clipping and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import artmodel as am
from . import autodiff as ad
from . import config as cfgmod
from . import losses as L
from .meshkit import build_hierarchy
from .neural import Network
from .pipeline import base_camera, predict

log = logging.getLogger(__name__)

CKPT_MAGIC = b"C2FCKPT\0"
CKPT_VERSION = 1
LOG_COLUMNS = ("epoch", "stage", "stage_epoch", "lr", "loss", "kp1", "silh1", "shape", "pose", "limit",
               "kp2", "silh2", "lap", "steps", "clip_events", "skipped_steps")


class CheckpointError(ValueError):
    pass


# -------------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor) from
    ``grads`` (name -> array).  A non-finite gradient skips the whole step."""
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d: update skipped", state.step + 1)
        return state
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_gradients(grads, max_norm):
    """Scale ``grads`` to global norm ``max_norm``; returns (grads, norm, clipped)."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm, True
    return grads, norm, False


# -------------------------------------------------------------- network set-up


def build_model(cfg):
    if cfg.model.path:
        return am.load_model(cfg.model.path)
    return am.make_toy_model(cfg.model.toy, cfg.model.seed)


def build_network(cfg, model=None):
    model = model if model is not None else build_model(cfg)
    mr = cfg.network.mrgcn
    hierarchy = build_hierarchy(model.mesh(), n_levels=mr.n_levels, factor=mr.downsample_factor)
    size = cfgmod.image_size(cfg)
    return Network(model, hierarchy, (size, size), cfg.network, seed=cfg.seed)


# ------------------------------------------------------------------- losses


def stage_loss(net, batch, stage, cfg):
    """Scalar loss and float-valued terms for one batch in stage A, B or C."""
    model, w, sch = net.model, cfg.weights, cfg.schedule
    camera = base_camera(net.image_size)
    adjacency = net.params["mrgcn"].hierarchy.levels[0].adjacency
    if stage == "A":
        pred = predict(net, batch.images, refine_mesh=False)
        s1 = L.StageOnePrediction(pred.joints_c, pred.params.betas, pred.params.pose, pred.params.focal)
        terms = L.stage1_terms(batch, s1, model, camera, w, include_silhouette=False, include_limit=sch.limit_always)
    elif stage == "B":
        pred = predict(net, batch.images, refine_mesh=True)
        terms = {"kp2": L.keypoint_loss(batch.keypoints, batch.visibility, pred.joints_f, camera, pred.params.focal)}
    elif stage == "C":
        pred = predict(net, batch.images, refine_mesh=True, masks=("coarse", "fine"), sharpness=sch.sharpness)
        s1 = L.StageOnePrediction(pred.joints_c, pred.params.betas, pred.params.pose, pred.params.focal, pred.mask_c)
        terms = L.stage1_terms(batch, s1, model, camera, w, include_silhouette=True, include_limit=True)
        terms.update(L.stage2_terms(batch, pred.V_f, pred.V_c, pred.joints_f, camera, pred.params.focal,
                                    adjacency, w, pred.mask_f))
    else:
        raise ValueError(f"unknown stage {stage!r}")
    total = L.weighted_sum(terms, w)
    return total, {k: float(v.data) for k, v in terms.items()}


def trainable(net, stage):
    if stage == "A":
        return dict(net.coarse_parameters())
    if stage == "B":
        return dict(net.refine_parameters())
    return dict(net.named_parameters())


def _set_frozen(net, stage):
    """Coarse branch leaves stop requiring grad in stage B, so no tape is built through them."""
    frozen = stage == "B"
    for _, p in net.coarse_parameters():
        p.requires_grad = not frozen


def train_epoch(net, dataset, stage, cfg, state, epoch_seed_index):
    params = trainable(net, stage)
    _set_frozen(net, stage)
    sums, steps, clips = {}, 0, 0
    skipped_before = state.skipped
    try:
        for batch in dataset.batches(cfg.schedule.batch_size, seed=cfg.seed, epoch=epoch_seed_index):
            total, terms = stage_loss(net, batch, stage, cfg)
            grads = ad.backward(total)
            g = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}
            g, _, clipped = clip_gradients(g, cfg.schedule.clip_norm)
            clips += clipped
            adam_step(params, g, state)
            for name, p in net.named_parameters():
                p.grad = None
            steps += 1
            sums["loss"] = sums.get("loss", 0.0) + float(total.data)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
    finally:
        _set_frozen(net, "C")
    row = {k: v / max(steps, 1) for k, v in sums.items()}
    row.update(steps=steps, clip_events=clips, skipped_steps=state.skipped - skipped_before)
    return row


# ----------------------------------------------------------------- schedule


@dataclass
class Position:
    stage: int = 0  # index into A, B, C
    epoch: int = 0  # epochs completed within that stage


def run_schedule(cfg, dataset, seed=None, out_dir=None, resume=None, net=None, stop_after=None):
    """Train A -> B -> C.  Returns (network, log rows).

    ``resume`` is a checkpoint path; ``stop_after`` caps the number of epochs run
    in this call (used to test interrupted runs).  Checkpoints go to
    ``out_dir/checkpoints`` at stage boundaries and every ``checkpoint_every`` epochs.
    """
    if seed is not None:
        cfg = cfgmod.set_value(cfg, "seed", str(seed))
    if len(dataset) == 0:
        raise cfgmod.ConfigParseError("training dataset is empty")
    if net is None:
        net = build_network(cfg)
    stages = cfg.schedule.stages()
    pos, state, rows = Position(), None, []
    if resume is not None:
        ck = load_checkpoint(resume, net)
        pos, state, rows = ck["position"], ck["optimizer"], ck["log"]
    ck_dir = os.path.join(out_dir, "checkpoints") if out_dir else None
    epochs_run = 0
    done_before = sum(n for _, n, _ in stages[: pos.stage]) + pos.epoch
    while pos.stage < len(stages):
        name, n_epochs, lr = stages[pos.stage]
        if state is None or pos.epoch == 0:
            state = OptimizerState(lr=lr)
        while pos.epoch < n_epochs:
            if stop_after is not None and epochs_run >= stop_after:
                return net, rows
            global_epoch = done_before + 1
            row = train_epoch(net, dataset, name, cfg, state, global_epoch - 1)
            row.update(epoch=global_epoch, stage=name, stage_epoch=pos.epoch + 1, lr=lr)
            rows.append(row)
            log.info("epoch %d stage %s loss %.6g clips %d", global_epoch, name, row["loss"], row["clip_events"])
            pos.epoch += 1
            epochs_run += 1
            done_before += 1
            every = cfg.schedule.checkpoint_every
            if ck_dir and every and pos.epoch % every == 0 and pos.epoch < n_epochs:
                save_checkpoint(os.path.join(ck_dir, f"{name}_{pos.epoch:04d}.ckpt"), net, state, pos, rows, cfg)
        pos = Position(pos.stage + 1, 0)
        if ck_dir and n_epochs:
            save_checkpoint(os.path.join(ck_dir, f"{name}_end.ckpt"), net, state, pos, rows, cfg)
        state = None
    if ck_dir:
        save_checkpoint(os.path.join(ck_dir, "final.ckpt"), net, OptimizerState(lr=0.0), pos, rows, cfg)
    return net, rows


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([("" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]))
                         for c in LOG_COLUMNS])


def read_log(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (v if k == "stage" else (float(v) if v else None)) for k, v in r.items()})
    return out


# --------------------------------------------------------------- checkpoints


def _census(net, state):
    names = [n for n, _ in net.named_parameters()]
    params = dict(net.named_parameters())
    entries = [("param", n, list(params[n].shape)) for n in names]
    if state is not None:
        for n in sorted(state.m):
            entries.append(("adam_m", n, list(state.m[n].shape)))
            entries.append(("adam_v", n, list(state.v[n].shape)))
    return entries


def save_checkpoint(path, net, state, position, rows, cfg):
    """Binary checkpoint: magic, version, JSON header with census, float64 payload."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    params = dict(net.named_parameters())
    census = _census(net, state)
    chunks = []
    for kind, name, _shape in census:
        arr = params[name].data if kind == "param" else (state.m if kind == "adam_m" else state.v)[name]
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(chunks)
    header = {
        "config": cfgmod.dump_config(cfg),
        "position": [position.stage, position.epoch],
        "optimizer": None if state is None else {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step, "skipped": state.skipped},
        "rng": {"kind": "epoch-keyed PCG64", "seed": cfg.seed},
        "census": census,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
        "log": rows,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


_HEADER_KEYS = {"config", "position", "optimizer", "rng", "census", "payload_bytes", "crc32", "log"}


def read_checkpoint(path):
    """Parse and verify a checkpoint file; returns (header, arrays by (kind, name))."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(data[20 : 20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    missing = _HEADER_KEYS - set(header) if isinstance(header, dict) else _HEADER_KEYS
    if missing:
        raise CheckpointError(f"{path}: corrupt header (missing {', '.join(sorted(missing))})")
    payload = data[20 + hlen :]
    try:
        expected = 8 * sum(int(np.prod(shape)) for _, _, shape in header["census"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt parameter census") from exc
    if len(payload) != header["payload_bytes"] or len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, census declares {expected}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays, off = {}, 0
    for kind, name, shape in header["census"]:
        n = int(np.prod(shape))
        arrays[(kind, name)] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return header, arrays


def load_checkpoint(path, net):
    """Restore parameters into ``net``; returns position, optimizer state, log and config."""
    header, arrays = read_checkpoint(path)
    params = dict(net.named_parameters())
    stored = {name for kind, name, _ in header["census"] if kind == "param"}
    if stored != set(params):
        raise CheckpointError(f"{path}: parameter names differ from the network")
    for name, p in params.items():
        arr = arrays[("param", name)]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.copy()
    opt = header["optimizer"]
    state = None
    if opt is not None:
        state = OptimizerState(opt["lr"], opt["beta1"], opt["beta2"], opt["eps"], opt["step"], skipped=opt["skipped"])
        for (kind, name), arr in arrays.items():
            if kind == "adam_m":
                state.m[name] = arr.copy()
            elif kind == "adam_v":
                state.v[name] = arr.copy()
    return {
        "position": Position(*header["position"]),
        "optimizer": state,
        "log": header["log"],
        "config": cfgmod.parse_text(header["config"]),
    }


def load_trained(path):
    """Network rebuilt from the configuration stored in a checkpoint."""
    header, _ = read_checkpoint(path)
    cfg = cfgmod.parse_text(header["config"])
    net = build_network(cfg)
    load_checkpoint(path, net)
    return net, cfg
