"""MLFF-Net: residual feature extraction, multilevel fusion, coordinate attention.

Parameters live in a flat ``dict`` keyed by dotted layer path.  Batch-norm
running statistics are stored alongside (``*.running_mean`` /
``*.running_var``) but are buffers, not trainable parameters.

Every module exposes ``init(rng, params)``, ``forward(params, x, train,
updates)`` returning ``(y, cache)``, and ``backward(params, cache, dy,
grads)`` returning ``dx`` and accumulating parameter gradients into
``grads``.  Forward passes never mutate ``params``; new running statistics
are written to the optional ``updates`` dict.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from treeradar.mlff import layers as L

BUFFER_SUFFIXES = (".running_mean", ".running_var")


class ShapeError(ValueError):
    pass


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite activation after {path}")
        self.path = path


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def trainable(params: dict) -> list[str]:
    return [k for k in params if not is_buffer(k)]


def _add_grad(grads, key, g):
    if g is None:
        return
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 10
    input_hw: tuple = (128, 128)
    resblock_channels: tuple = (64, 64, 128, 128, 256, 256, 512, 512)
    fuse_channels: int = 64
    cam_reduction: int = 16
    classifier_channels: tuple = (64, 128, 256, 512)
    use_fusion: bool = True
    use_cam: bool = True
    width_scale: float = 1.0
    cam_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "resblock_channels", tuple(int(v) for v in self.resblock_channels))
        object.__setattr__(self, "classifier_channels",
                           tuple(int(v) for v in self.classifier_channels))
        if not self.resblock_channels or not self.classifier_channels:
            raise ValueError("channel lists must be non-empty")
        if len(self.resblock_channels) % 2:
            raise ValueError("ResBlocks come in pairs, one fusion level per pair")
        if not 0 < self.width_scale <= 1:
            raise ValueError("width_scale must lie in (0, 1]")
        if self.cam_activation not in ("relu", "hswish"):
            raise ValueError("cam_activation must be 'relu' or 'hswish'")
        if self.fused_channels % self.cam_reduction:
            raise ValueError(
                f"cam_reduction {self.cam_reduction} must divide the fused channel count "
                f"{self.fused_channels}")

    def scale(self, c: int) -> int:
        return max(self.cam_reduction, math.ceil(c * self.width_scale))

    @property
    def block_channels(self) -> list[int]:
        return [self.scale(c) for c in self.resblock_channels]

    @property
    def n_levels(self) -> int:
        return len(self.resblock_channels) // 2

    @property
    def fuse_width(self) -> int:
        return self.scale(self.fuse_channels)

    @property
    def fused_channels(self) -> int:
        return self.fuse_width * (self.n_levels if self.use_fusion else 1)

    @property
    def head_channels(self) -> list[int]:
        return [self.scale(c) for c in self.classifier_channels]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_hw", "resblock_channels", "classifier_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def toy_config(**overrides) -> NetConfig:
    """Desk-scale variant: 1/8 widths on 16x16 inputs."""
    base = dict(input_hw=(16, 16), width_scale=1 / 8)
    base.update(overrides)
    return NetConfig(**base)


class Conv:
    def __init__(self, name, cin, cout, k, stride=1, pad=0, bias=False):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        self.stride, self.pad, self.bias = stride, pad, bias

    def init(self, rng, params):
        fan_in = self.cin * self.k * self.k
        params[f"{self.name}.w"] = rng.standard_normal(
            (self.cout, self.cin, self.k, self.k)) * math.sqrt(2.0 / fan_in)
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.cout)

    def forward(self, params, x, train=False, updates=None):
        return L.conv2d_forward(x, params[f"{self.name}.w"], params.get(f"{self.name}.b"),
                                self.stride, self.pad)

    def backward(self, params, cache, dy, grads):
        dx, dw, db = L.conv2d_backward(dy, cache)
        _add_grad(grads, f"{self.name}.w", dw)
        if self.bias:
            _add_grad(grads, f"{self.name}.b", db)
        return dx


class BatchNorm:
    def __init__(self, name, c):
        self.name, self.c = name, c

    def init(self, rng, params):
        params[f"{self.name}.gamma"] = np.ones(self.c)
        params[f"{self.name}.beta"] = np.zeros(self.c)
        params[f"{self.name}.running_mean"] = np.zeros(self.c)
        params[f"{self.name}.running_var"] = np.ones(self.c)

    def forward(self, params, x, train=False, updates=None):
        p = self.name
        y, cache, (rm, rv) = L.batchnorm_forward(
            x, params[f"{p}.gamma"], params[f"{p}.beta"],
            params[f"{p}.running_mean"], params[f"{p}.running_var"], train)
        if train and updates is not None:
            updates[f"{p}.running_mean"] = rm
            updates[f"{p}.running_var"] = rv
        return y, cache

    def backward(self, params, cache, dy, grads):
        dx, dg, db = L.batchnorm_backward(dy, cache)
        _add_grad(grads, f"{self.name}.gamma", dg)
        _add_grad(grads, f"{self.name}.beta", db)
        return dx


class ReLU:
    def init(self, rng, params):
        pass

    def forward(self, params, x, train=False, updates=None):
        return L.relu_forward(x)

    def backward(self, params, cache, dy, grads):
        return L.relu_backward(dy, cache)


class HSwish:
    def init(self, rng, params):
        pass

    def forward(self, params, x, train=False, updates=None):
        gate = np.clip(x + 3.0, 0.0, 6.0) / 6.0
        return x * gate, (x, gate)

    def backward(self, params, cache, dy, grads):
        x, gate = cache
        inner = ((x > -3.0) & (x < 3.0)) / 6.0
        return dy * (gate + x * inner)


class MaxPool:
    def init(self, rng, params):
        pass

    def forward(self, params, x, train=False, updates=None):
        return L.maxpool2x2_forward(x)

    def backward(self, params, cache, dy, grads):
        return L.maxpool2x2_backward(dy, cache)


class Sequential:
    def __init__(self, *mods):
        self.mods = list(mods)

    def init(self, rng, params):
        for m in self.mods:
            m.init(rng, params)

    def forward(self, params, x, train=False, updates=None):
        caches = []
        for m in self.mods:
            x, c = m.forward(params, x, train, updates)
            caches.append(c)
        return x, caches

    def backward(self, params, cache, dy, grads):
        for m, c in zip(reversed(self.mods), reversed(cache)):
            dy = m.backward(params, c, dy, grads)
        return dy


def conv_bn_relu(name, cin, cout, k, stride, pad):
    return Sequential(Conv(f"{name}.conv", cin, cout, k, stride, pad),
                      BatchNorm(f"{name}.bn", cout), ReLU())


class ResBlock:
    """conv-BN-ReLU-conv-BN plus shortcut, ReLU after the addition.

    With ``downsample`` the first conv and a 1x1 projection shortcut both
    use stride 2.
    """

    def __init__(self, name, cin, cout, downsample):
        self.name = name
        stride = 2 if downsample else 1
        self.main = Sequential(
            Conv(f"{name}.conv1", cin, cout, 3, stride, 1), BatchNorm(f"{name}.bn1", cout), ReLU(),
            Conv(f"{name}.conv2", cout, cout, 3, 1, 1), BatchNorm(f"{name}.bn2", cout))
        self.shortcut = None
        if downsample or cin != cout:
            self.shortcut = Conv(f"{name}.proj", cin, cout, 1, stride, 0)

    def init(self, rng, params):
        self.main.init(rng, params)
        if self.shortcut is not None:
            self.shortcut.init(rng, params)

    def forward(self, params, x, train=False, updates=None):
        y, c_main = self.main.forward(params, x, train, updates)
        if self.shortcut is not None:
            s, c_short = self.shortcut.forward(params, x, train, updates)
        else:
            s, c_short = x, None
        out, mask = L.relu_forward(y + s)
        return out, (c_main, c_short, mask)

    def backward(self, params, cache, dy, grads):
        c_main, c_short, mask = cache
        dsum = L.relu_backward(dy, mask)
        dx = self.main.backward(params, c_main, dsum, grads)
        if self.shortcut is not None:
            dx = dx + self.shortcut.backward(params, c_short, dsum, grads)
        else:
            dx = dx + dsum
        return dx


class DimUnify:
    """1x1 conv to the target width, bilinear upsampling, 3x3 conv."""

    def __init__(self, name, cin, cout, out_hw):
        self.name, self.out_hw = name, tuple(out_hw)
        self.reduce = Conv(f"{name}.reduce", cin, cout, 1, 1, 0, bias=True)
        self.smooth = Conv(f"{name}.smooth", cout, cout, 3, 1, 1, bias=True)

    def init(self, rng, params):
        self.reduce.init(rng, params)
        self.smooth.init(rng, params)

    def forward(self, params, x, train=False, updates=None):
        if x.shape[2] > self.out_hw[0] or x.shape[3] > self.out_hw[1]:
            raise ShapeError(f"{self.name}: dimension unification only upsamples")
        a, c1 = self.reduce.forward(params, x)
        b, c2 = L.upsample_forward(a, self.out_hw)
        y, c3 = self.smooth.forward(params, b)
        return y, (c1, c2, c3)

    def backward(self, params, cache, dy, grads):
        c1, c2, c3 = cache
        db = self.smooth.backward(params, c3, dy, grads)
        da = L.upsample_backward(db, c2)
        return self.reduce.backward(params, c1, da, grads)


class CoordinateAttention:
    """Direction-aware attention: pool along W and along H, gate X by both.

    ``force_logits`` replaces the pre-sigmoid attention logits (test hook).
    """

    def __init__(self, name, c, reduction, activation="relu"):
        if c % reduction:
            raise ShapeError(f"channels {c} not divisible by reduction {reduction}")
        mid = c // reduction
        self.name, self.c, self.mid = name, c, mid
        self.shared = Sequential(Conv(f"{name}.l1.conv", c, mid, 1),
                                 BatchNorm(f"{name}.l1.bn", mid),
                                 ReLU() if activation == "relu" else HSwish())
        self.conv_h = Conv(f"{name}.lh", mid, c, 1, bias=True)
        self.conv_w = Conv(f"{name}.lw", mid, c, 1, bias=True)
        self.force_logits: Optional[float] = None

    def init(self, rng, params):
        self.shared.init(rng, params)
        self.conv_h.init(rng, params)
        self.conv_w.init(rng, params)

    def pool(self, x):
        """Row means (N,C,H) and column means (N,C,W)."""
        return x.mean(axis=3), x.mean(axis=2)

    def forward(self, params, x, train=False, updates=None):
        n, c, h, w = x.shape
        if c != self.c:
            raise ShapeError(f"{self.name}: expected {self.c} channels, got {c}")
        zh, zw = self.pool(x)
        z = np.concatenate([zh, zw], axis=2)[..., None]  # (N,C,H+W,1)
        inter, c_shared = self.shared.forward(params, z, train, updates)
        ih, iw = inter[:, :, :h], inter[:, :, h:]
        lh, c_h = self.conv_h.forward(params, ih)
        lw, c_w = self.conv_w.forward(params, iw)
        if self.force_logits is not None:
            lh = np.full_like(lh, self.force_logits)
            lw = np.full_like(lw, self.force_logits)
        kh = L.sigmoid(lh)[..., 0]  # (N,C,H)
        kw = L.sigmoid(lw)[..., 0]  # (N,C,W)
        y = x * kh[:, :, :, None] * kw[:, :, None, :]
        return y, (x, kh, kw, c_shared, c_h, c_w, h)

    def backward(self, params, cache, dy, grads):
        x, kh, kw, c_shared, c_h, c_w, h = cache
        dx = dy * kh[:, :, :, None] * kw[:, :, None, :]
        dkh = (dy * x * kw[:, :, None, :]).sum(axis=3)
        dkw = (dy * x * kh[:, :, :, None]).sum(axis=2)
        dlh = (dkh * kh * (1 - kh))[..., None]
        dlw = (dkw * kw * (1 - kw))[..., None]
        if self.force_logits is not None:
            dlh = np.zeros_like(dlh)
            dlw = np.zeros_like(dlw)
        dih = self.conv_h.backward(params, c_h, dlh, grads)
        diw = self.conv_w.backward(params, c_w, dlw, grads)
        dz = self.shared.backward(params, c_shared, np.concatenate([dih, diw], axis=2), grads)
        dz = dz[..., 0]
        dzh, dzw = dz[:, :, :h], dz[:, :, h:]
        dx = dx + dzh[:, :, :, None] / x.shape[3] + dzw[:, :, None, :] / x.shape[2]
        return dx


class MLFFNet:
    """Full classifier; ``forward`` returns the logit of the defective class."""

    def __init__(self, config: NetConfig):
        self.config = cfg = config
        ch = cfg.block_channels
        self.pre = Sequential(Conv("pre.conv", cfg.in_channels, ch[0], 7, 2, 3),
                              BatchNorm("pre.bn", ch[0]), ReLU(), MaxPool())
        self.blocks = []
        cin = ch[0]
        for i, cout in enumerate(ch):
            down = i > 0 and i % 2 == 0
            self.blocks.append(ResBlock(f"res{i + 1}", cin, cout, down))
            cin = cout
        self.level_shapes = self._level_shapes()
        target = self.level_shapes[0][1:]
        self.fuse_hw = target
        self.unify = [DimUnify(f"unify{j + 1}", shp[0], cfg.fuse_width, target)
                      for j, shp in enumerate(self.level_shapes)]
        self.cam = CoordinateAttention("cam", cfg.fused_channels, cfg.cam_reduction,
                                       cfg.cam_activation)
        head = []
        cin = cfg.fused_channels
        for j, cout in enumerate(cfg.head_channels):
            head.append(conv_bn_relu(f"head{j + 1}", cin, cout, 3, 2, 1))
            cin = cout
        self.head = Sequential(*head)
        self.head_shape = self._head_shape()
        self.fc_in = int(np.prod(self.head_shape))

    def _level_shapes(self):
        cfg = self.config
        h, w = cfg.input_hw
        h, w = L.conv_out_size(h, 7, 2, 3), L.conv_out_size(w, 7, 2, 3)
        h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError(f"input {cfg.input_hw} too small")
        shapes = []
        for i, blk in enumerate(self.blocks):
            if i > 0 and i % 2 == 0:
                h, w = L.conv_out_size(h, 3, 2, 1), L.conv_out_size(w, 3, 2, 1)
            if i % 2 == 1:
                shapes.append((cfg.block_channels[i], h, w))
        return shapes

    def _head_shape(self):
        h, w = self.fuse_hw
        for _ in self.config.head_channels:
            h, w = L.conv_out_size(h, 3, 2, 1), L.conv_out_size(w, 3, 2, 1)
        return (self.config.head_channels[-1], h, w)

    def init(self, seed: int = 0) -> dict:
        rng = np.random.default_rng(seed)
        params: dict = {}
        self.pre.init(rng, params)
        for b in self.blocks:
            b.init(rng, params)
        for u in self.unify:
            u.init(rng, params)
        self.cam.init(rng, params)
        self.head.init(rng, params)
        params["fc.w"] = rng.standard_normal((1, self.fc_in)) * math.sqrt(1.0 / self.fc_in)
        params["fc.b"] = np.zeros(1)
        return params

    def _check(self, x, path):
        if not np.all(np.isfinite(x)):
            raise NonFiniteActivationError(path)

    def forward(self, params, x, train=False, updates=None, trace=None):
        """Logits (N,) for inputs (N, C, H, W).

        ``trace``, if a list, receives ``(stage, shape)`` pairs.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, *cfg.input_hw):
            raise ShapeError(f"expected (N, {cfg.in_channels}, {cfg.input_hw[0]}, "
                             f"{cfg.input_hw[1]}), got {x.shape}")

        def note(stage, arr):
            self._check(arr, stage)
            if trace is not None:
                trace.append((stage, arr.shape[1:]))

        note("input", x)
        h, c_pre = self.pre.forward(params, x, train, updates)
        note("pre", h)
        c_blocks, levels = [], []
        for i, b in enumerate(self.blocks):
            h, c = b.forward(params, h, train, updates)
            c_blocks.append(c)
            note(b.name, h)
            if i % 2 == 1:
                levels.append(h)
        used = range(len(levels)) if cfg.use_fusion else [len(levels) - 1]
        c_unify, unified = {}, []
        for j in used:
            u, c = self.unify[j].forward(params, levels[j], train, updates)
            c_unify[j] = c
            unified.append(u)
            note(self.unify[j].name, u)
        fused, c_cat = L.concat_forward(unified)
        note("fused", fused)
        if cfg.use_cam:
            att, c_cam = self.cam.forward(params, fused, train, updates)
            note("cam", att)
        else:
            att, c_cam = fused, None
        g, c_head = self.head.forward(params, att, train, updates)
        note("head", g)
        flat = g.reshape(g.shape[0], -1)
        logit, c_fc = L.linear_forward(flat, params["fc.w"], params["fc.b"])
        note("logit", logit)
        cache = (c_pre, c_blocks, c_unify, c_cat, c_cam, c_head, g.shape, c_fc, len(levels))
        return logit[:, 0], cache

    def backward(self, params, cache, dlogit) -> dict:
        """Gradients of every trainable parameter given dL/dlogit (N,)."""
        c_pre, c_blocks, c_unify, c_cat, c_cam, c_head, g_shape, c_fc, n_levels = cache
        grads = {k: np.zeros_like(params[k]) for k in trainable(params)}
        dflat, dw, db = L.linear_backward(np.asarray(dlogit).reshape(-1, 1), c_fc, params["fc.w"])
        grads["fc.w"] += dw
        grads["fc.b"] += db
        dg = dflat.reshape(g_shape)
        datt = self.head.backward(params, c_head, dg, grads)
        dfused = self.cam.backward(params, c_cam, datt, grads) if c_cam is not None else datt
        dunified = L.concat_backward(dfused, c_cat)
        dlevels = {}
        for j, du in zip(sorted(c_unify), dunified):
            dlevels[j] = self.unify[j].backward(params, c_unify[j], du, grads)
        dh = None
        for i in reversed(range(len(self.blocks))):
            if i % 2 == 1 and (i // 2) in dlevels:
                dh = dlevels[i // 2] if dh is None else dh + dlevels[i // 2]
            if dh is None:
                continue
            dh = self.blocks[i].backward(params, c_blocks[i], dh, grads)
        self.pre.backward(params, c_pre, dh, grads)
        return grads

    def predict_proba(self, params, x) -> np.ndarray:
        logits, _ = self.forward(params, x, train=False)
        return L.sigmoid(logits)

    def shape_trace(self, params=None, batch: int = 1) -> list:
        """Stage-by-stage activation shapes for a zero input."""
        params = params if params is not None else self.init(0)
        trace: list = []
        x = np.zeros((batch, self.config.in_channels, *self.config.input_hw))
        self.forward(params, x, trace=trace)
        return trace
