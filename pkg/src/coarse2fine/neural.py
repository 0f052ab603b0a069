"""Image encoder, parameter heads, graph convolutions and the refinement GCN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camrender import project, sample_features


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- layers


class Layer:
    """Base for parameter holders; ``params`` maps local names to Tensors or sub-layers."""

    def __init__(self):
        self.params = {}

    def named_parameters(self, prefix=""):
        out = []
        for name, p in self.params.items():
            full = f"{prefix}{name}"
            if isinstance(p, Layer):
                out.extend(p.named_parameters(full + "."))
            elif isinstance(p, list):
                for i, sub in enumerate(p):
                    out.extend(sub.named_parameters(f"{full}.{i}."))
            else:
                out.append((full, p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _param(array):
    return ad.Tensor(array, requires_grad=True)


class Linear(Layer):
    def __init__(self, rng, din, dout, bias=True, zero=False, gain=math.sqrt(2.0)):
        super().__init__()
        w = np.zeros((din, dout)) if zero else rng.normal(0.0, gain / math.sqrt(din), size=(din, dout))
        self.params["weight"] = _param(w)
        if bias:
            self.params["bias"] = _param(np.zeros(dout))

    def __call__(self, x):
        y = ad.matmul(x, self.params["weight"])
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y


class Conv(Layer):
    def __init__(self, rng, cin, cout, k=3, stride=1):
        super().__init__()
        fan_in = k * k * cin
        self.stride, self.padding = stride, k // 2
        self.params["weight"] = _param(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(k, k, cin, cout)))
        self.params["bias"] = _param(np.zeros(cout))

    def __call__(self, x):
        return ad.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)


def group_norm(x, groups, scale, shift, eps=1e-5):
    """Per-sample, per-group standardization followed by a channel affine."""
    return ad.group_norm_stats(x, groups, eps) * scale + shift


class GroupNorm(Layer):
    def __init__(self, channels, groups):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.params["scale"] = _param(np.ones(channels))
        self.params["shift"] = _param(np.zeros(channels))

    def __call__(self, x):
        return group_norm(x, self.groups, self.params["scale"], self.params["shift"])


def _groups_for(width, groups):
    g = min(groups, width)
    while width % g:
        g -= 1
    return g


# ------------------------------------------------------------------ encoder


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (16, 32, 64, 128)
    global_dim: int = 128
    fc_dim: int = 256
    groups: int = 4


@dataclass
class EncoderOutput:
    h_g: ad.Tensor
    feature_maps: list = field(default_factory=list)


class Encoder(Layer):
    """Stride-2 conv blocks, a 1x1 conv and two fully connected layers."""

    def __init__(self, rng, cfg=EncoderConfig(), image_size=(64, 64), in_channels=3):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        blocks, cin = [], in_channels
        for w in cfg.widths:
            blk = Layer()
            blk.params["conv"] = Conv(rng, cin, w, 3, 2)
            blk.params["norm"] = GroupNorm(w, _groups_for(w, cfg.groups))
            blocks.append(blk)
            cin = w
        self.params["blocks"] = blocks
        self.params["squeeze"] = Conv(rng, cin, cin, 1, 1)
        self.params["squeeze_norm"] = GroupNorm(cin, _groups_for(cin, cfg.groups))
        h, w = image_size
        for _ in cfg.widths:
            h, w = (h + 1) // 2, (w + 1) // 2
        self.params["fc1"] = Linear(rng, h * w * cin, cfg.fc_dim)
        self.params["fc2"] = Linear(rng, cfg.fc_dim, cfg.global_dim)

    @property
    def local_dim(self):
        return sum(self.cfg.widths)

    def __call__(self, image):
        x = ad.as_tensor(image)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} image channels, got {x.shape[-1]}")
        maps = []
        for blk in self.params["blocks"]:
            x = ad.leaky_relu(blk.params["norm"](blk.params["conv"](x)))
            maps.append(x)
        x = ad.leaky_relu(self.params["squeeze_norm"](self.params["squeeze"](x)))
        x = ad.reshape(x, (x.shape[0], -1))
        x = ad.leaky_relu(self.params["fc1"](x))
        return EncoderOutput(self.params["fc2"](x), maps)


def encode(encoder, image):
    return encoder(image)


# -------------------------------------------------------------------- heads


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 128
    focal_init: float = 110.0
    focal_min: float = 20.0
    depth_init: float = 7.0
    depth_min: float = 1.0


def positive_map(x, init, minimum):
    """minimum + (init - minimum) * softplus(x) / ln 2; equals ``init`` at x = 0."""
    return ad.softplus(x) * ((init - minimum) / math.log(2.0)) + minimum


@dataclass
class CoarseParams:
    betas: ad.Tensor
    pose: ad.Tensor
    trans: ad.Tensor  # (Bt, 3): xy from one head, z from another
    focal: ad.Tensor  # (Bt,)


class ParamHeads(Layer):
    """Independent two-layer MLPs for shape, pose, xy translation, depth and focal length."""

    def __init__(self, rng, global_dim, n_shape, n_joints, cfg=HeadConfig()):
        super().__init__()
        self.cfg = cfg
        sizes = {"betas": n_shape, "pose": 3 * n_joints, "trans_xy": 2, "trans_z": 1, "focal": 1}
        for name, dout in sizes.items():
            head = Layer()
            head.params["hidden"] = Linear(rng, global_dim, cfg.hidden)
            head.params["out"] = Linear(rng, cfg.hidden, dout, zero=True)
            self.params[name] = head

    def _run(self, name, h):
        head = self.params[name]
        return head.params["out"](ad.leaky_relu(head.params["hidden"](h)))

    def __call__(self, h_g):
        c = self.cfg
        z = positive_map(self._run("trans_z", h_g), c.depth_init, c.depth_min)
        focal = positive_map(self._run("focal", h_g), c.focal_init, c.focal_min)
        trans = ad.concat([self._run("trans_xy", h_g), z], axis=-1)
        return CoarseParams(self._run("betas", h_g), self._run("pose", h_g), trans, ad.reshape(focal, (-1,)))


def regress_params(heads, h_g):
    return heads(h_g)


# ---------------------------------------------------------------------- GCN


def gcn_layer(norm_adj, x, weight):
    """H = A_tilde X W."""
    return ad.matmul(ad.sparse_dense_matmul(norm_adj, x), weight)


class Bottleneck(Layer):
    """FC(w/2) -> GN -> act -> graph conv -> GN -> act -> FC(w) plus residual."""

    def __init__(self, rng, din, width, groups, zero_last=False):
        super().__init__()
        mid = max(1, width // 2)
        self.params["fc_in"] = Linear(rng, din, mid)
        self.params["norm1"] = GroupNorm(mid, _groups_for(mid, groups))
        self.params["graph"] = _param(rng.normal(0.0, math.sqrt(2.0 / mid), size=(mid, mid)))
        self.params["norm2"] = GroupNorm(mid, _groups_for(mid, groups))
        self.params["fc_out"] = Linear(rng, mid, width, zero=zero_last, gain=0.5)
        if din != width:
            self.params["skip"] = Linear(rng, din, width, bias=False, gain=1.0)

    def __call__(self, norm_adj, x):
        h = ad.leaky_relu(self.params["norm1"](self.params["fc_in"](x)))
        h = ad.leaky_relu(self.params["norm2"](gcn_layer(norm_adj, h, self.params["graph"])))
        h = self.params["fc_out"](h)
        res = self.params["skip"](x) if "skip" in self.params else x
        return res + h


def bottleneck_block(block, norm_adj, x):
    return block(norm_adj, x)


@dataclass(frozen=True)
class MRGCNConfig:
    widths: tuple = (64, 96, 128)  # one per hierarchy level, fine to coarse
    blocks_per_level: int = 2
    downsample_factor: int = 4
    groups: int = 8

    @property
    def n_levels(self):
        return len(self.widths)


class MRGCN(Layer):
    """Encoder-decoder graph network over a mesh hierarchy with concatenating skips.

    The last layer is zero-initialized so a fresh network predicts no deformation.
    """

    def __init__(self, rng, in_dim, hierarchy, cfg=MRGCNConfig()):
        super().__init__()
        if len(hierarchy.levels) != cfg.n_levels:
            raise ConfigError(f"hierarchy has {len(hierarchy.levels)} levels, config expects {cfg.n_levels}")
        self.cfg = cfg
        self.hierarchy = hierarchy
        w = cfg.widths
        self.params["input"] = Linear(rng, in_dim, w[0])
        self.params["input_norm"] = GroupNorm(w[0], _groups_for(w[0], cfg.groups))
        down = []
        for lvl, width in enumerate(w):
            blocks, din = [], (w[lvl - 1] if lvl else w[0])
            for _ in range(cfg.blocks_per_level):
                blocks.append(Bottleneck(rng, din, width, cfg.groups))
                din = width
            stage = Layer()
            stage.params["blocks"] = blocks
            down.append(stage)
        self.params["down"] = down
        up = []
        for lvl in range(cfg.n_levels - 2, -1, -1):
            stage = Layer()
            stage.params["merge"] = Linear(rng, w[lvl + 1] + w[lvl], w[lvl])
            stage.params["blocks"] = [Bottleneck(rng, w[lvl], w[lvl], cfg.groups) for _ in range(cfg.blocks_per_level)]
            up.append(stage)
        self.params["up"] = up
        self.params["head"] = Linear(rng, w[0], 3, zero=True)

    def __call__(self, x0):
        levels = self.hierarchy.levels
        x = ad.leaky_relu(self.params["input_norm"](self.params["input"](x0)))
        skips = []
        for lvl, stage in enumerate(self.params["down"]):
            if lvl:
                x = ad.sparse_dense_matmul(levels[lvl - 1].down, x)
            for blk in stage.params["blocks"]:
                x = blk(levels[lvl].norm_adjacency, x)
            skips.append(x)
        for stage, lvl in zip(self.params["up"], range(self.cfg.n_levels - 2, -1, -1)):
            x = ad.sparse_dense_matmul(levels[lvl].up, x)
            x = stage.params["merge"](ad.concat([x, skips[lvl]], axis=-1))
            for blk in stage.params["blocks"]:
                x = blk(levels[lvl].norm_adjacency, x)
        return self.params["head"](ad.leaky_relu(x))


def mrgcn_forward(net, x0):
    return net(x0)


def assemble_node_features(h_g, V_c, feature_maps, camera, focal=None):
    """Per-vertex input [h_g, h_l, x, y, z] of shape (Bt, C, G + L + 3)."""
    V_c = ad.as_tensor(V_c)
    h_g = ad.as_tensor(h_g)
    bsz, C = V_c.shape[:2]
    p = project(V_c, camera, focal)
    h_l = sample_features(feature_maps, p, camera.size)
    glob = ad.reshape(h_g, (bsz, 1, h_g.shape[-1])) + np.zeros((1, C, 1))
    return ad.concat([glob, h_l, V_c], axis=-1)


def refine(V_c, delta):
    """V_f = V_c + delta."""
    return ad.add(V_c, delta)


# ------------------------------------------------------------------ network


@dataclass(frozen=True)
class NetworkConfig:
    encoder: EncoderConfig = EncoderConfig()
    heads: HeadConfig = HeadConfig()
    mrgcn: MRGCNConfig = MRGCNConfig()


class Network(Layer):
    """Coarse branch (encoder + heads) and refinement branch (MRGCN)."""

    def __init__(self, model, hierarchy, image_size=(64, 64), cfg=NetworkConfig(), seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.model = model
        self.image_size = image_size
        self.params["encoder"] = Encoder(rng, cfg.encoder, image_size)
        self.params["heads"] = ParamHeads(rng, cfg.encoder.global_dim, model.n_shape, model.n_joints, cfg.heads)
        in_dim = cfg.encoder.global_dim + self.params["encoder"].local_dim + 3
        self.params["mrgcn"] = MRGCN(rng, in_dim, hierarchy, cfg.mrgcn)

    def coarse_parameters(self):
        return self.params["encoder"].named_parameters("encoder.") + self.params["heads"].named_parameters("heads.")

    def refine_parameters(self):
        return self.params["mrgcn"].named_parameters("mrgcn.")
