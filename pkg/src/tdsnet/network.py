"""Side-network assembly: frozen branch, SME input, fused TDS blocks, head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import adapters
from .adapters import SmeParams, TdParams, TemporalConvParams
from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, branch, parameter
from .data import segment_indices
from .vit import Embedding, FrozenEncoder, VitBlockParams, frozen_forward, vit_block_forward

SME_MODES = ("temporal", "spatial", "spatial+temporal", "cross", "additional", "off")
TOPOLOGIES = ("side", "inbackbone", "full")
FUSION_ORDERS = ("fuse_first", "shift_first")
TD_FALLBACKS = ("conv3d", "none")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    patch: int = 8
    layers: int = 4
    frozen_dim: int = 64
    frozen_heads: int = 4
    side_dim: int = 32
    side_heads: int = 4
    mlp_ratio: int = 4
    window_radius: int = 2
    reduction: int = 2
    pool_kernel: int = 3
    alpha: float = 1.0
    beta: float = 1.0
    td_layer_mask: Optional[tuple] = None  # None: TD adapter in every layer
    td_mode: str = "pool"
    td_fallback: str = "conv3d"
    num_classes: int = 4
    label_smoothing: float = 0.1
    cls_shift_enabled: bool = True
    shift_fold_div: int = 4
    sme_mode: str = "temporal"
    fusion_order: str = "fuse_first"
    topology: str = "side"
    adapter_dim: int = 0  # in-backbone adapter bottleneck; 0 -> side_dim
    init_std: float = 0.02
    frozen_seed: int = 0

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def td_mask(self):
        if self.td_layer_mask is None:
            return (True,) * self.layers
        return tuple(bool(v) for v in self.td_layer_mask)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("frames", "height", "width", "patch", "layers", "frozen_dim", "frozen_heads",
                     "side_dim", "side_heads", "mlp_ratio", "reduction", "pool_kernel",
                     "num_classes", "shift_fold_div"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.window_radius >= 0, "window_radius must be >= 0")
        need(self.height % self.patch == 0 and self.width % self.patch == 0,
             f"frame {self.height}x{self.width} not divisible by patch {self.patch}")
        need(self.frozen_dim % self.frozen_heads == 0, "frozen_dim not divisible by frozen_heads")
        need(self.side_dim % self.side_heads == 0, "side_dim not divisible by side_heads")
        need(self.side_dim % self.reduction == 0, "side_dim not divisible by reduction")
        need(self.pool_kernel % 2 == 1, "pool_kernel must be odd")
        need(0.0 <= self.label_smoothing < 1.0, "label_smoothing must lie in [0, 1)")
        need(np.isfinite(self.alpha) and np.isfinite(self.beta), "alpha/beta must be finite")
        need(len(self.td_mask) == self.layers, f"td_layer_mask needs {self.layers} entries")
        need(self.td_mode in adapters.TD_MODES, f"td_mode must be one of {adapters.TD_MODES}")
        need(self.td_fallback in TD_FALLBACKS, f"td_fallback must be one of {TD_FALLBACKS}")
        need(self.sme_mode in SME_MODES, f"sme_mode must be one of {SME_MODES}")
        need(self.fusion_order in FUSION_ORDERS, f"fusion_order must be one of {FUSION_ORDERS}")
        need(self.topology in TOPOLOGIES, f"topology must be one of {TOPOLOGIES}")
        need(self.adapter_dim >= 0, "adapter_dim must be >= 0")
        if self.cls_shift_enabled:
            need(self.side_dim >= 4, "cls shift needs side_dim >= 4")
            need(self.shift_fold_div >= 2, "shift_fold_div must be >= 2")
        return self


MODEL_PRESETS = {
    "tiny": ModelConfig(),
    "paper": ModelConfig(
        frames=8, height=224, width=224, patch=16, layers=12, frozen_dim=768, frozen_heads=12,
        side_dim=320, side_heads=5, window_radius=2, reduction=2, pool_kernel=3,
        alpha=1.0, beta=1.0, num_classes=174, label_smoothing=0.1,
    ),
}


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

@dataclass
class BackboneAdapter:
    """Bottleneck adapter with a temporal 3x1x1 convolution, placed inside the
    frozen backbone (reference topology for memory comparisons only)."""

    down_w: Tensor
    down_b: Tensor
    conv: TemporalConvParams
    up_w: Tensor
    up_b: Tensor

    @classmethod
    def init(cls, rng, dim, mid, std, prefix):
        return cls(
            parameter(rng.normal(0.0, std, size=(dim, mid)), True, prefix + "down_w"),
            parameter(np.zeros(mid), True, prefix + "down_b"),
            TemporalConvParams.init(rng, mid, std, prefix),
            parameter(rng.normal(0.0, std, size=(mid, dim)), True, prefix + "up_w"),
            parameter(np.zeros(dim), True, prefix + "up_b"),
        )

    def named(self):
        for t in (self.down_w, self.down_b, self.up_w, self.up_b):
            yield t.name, t
        yield from self.conv.named()

    def __call__(self, tokens, grid):
        cls_row, patches = tokens[:, :, 0:1, :], tokens[:, :, 1:, :]
        h = ops.linear(patches, self.down_w, self.down_b)
        v = adapters.tokens_to_volume(h, grid)
        v = ops.conv3d(v, self.conv.w, self.conv.b, padding=(1, 0, 0))
        h = ops.linear(adapters.volume_to_tokens(v), self.up_w, self.up_b)
        return ops.concat([cls_row, ops.add(patches, h)], axis=2)


class TDSModel:
    """All parameters of the frozen encoder and the trainable side network."""

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        std = cfg.init_std
        n = cfg.num_patches
        self.frozen = FrozenEncoder.init(
            np.random.default_rng(cfg.frozen_seed), cfg.frozen_dim, cfg.frozen_heads, cfg.layers,
            cfg.patch, n, cfg.mlp_ratio, std,
        )
        rng = np.random.default_rng(seed)
        cs = cfg.side_dim
        self.embed = Embedding.init(rng, cs, cfg.patch, n, std, True, "side.embed.")
        self.sme = None
        if cfg.sme_mode in ("temporal", "spatial+temporal", "cross", "additional"):
            self.sme = SmeParams.init(rng, cs, cfg.patch, cfg.window_radius, cfg.alpha, cfg.beta, std, "side.sme.")
        self.sme_spatial = None
        if cfg.sme_mode in ("spatial", "spatial+temporal"):
            self.sme_spatial = SmeParams.init(
                rng, cfg.frozen_dim, cfg.patch, cfg.window_radius, cfg.alpha, cfg.beta, std, "side.sme_spatial."
            )
        self.fuse_w, self.fuse_b = [], []
        self.td, self.tconv, self.blocks = [], [], []
        for layer, use_td in enumerate(cfg.td_mask):
            pre = f"side.layer{layer}."
            self.fuse_w.append(parameter(rng.normal(0.0, std, size=(cfg.frozen_dim, cs)), True, pre + "fuse_w"))
            self.fuse_b.append(parameter(np.zeros(cs), True, pre + "fuse_b"))
            td = tconv = None
            if use_td:
                td = TdParams.init(rng, cs, cfg.reduction, cfg.pool_kernel, cfg.td_mode, std, pre + "td.")
            elif cfg.td_fallback == "conv3d":
                tconv = TemporalConvParams.init(rng, cs, std, pre + "base.")
            self.td.append(td)
            self.tconv.append(tconv)
            self.blocks.append(VitBlockParams.init(rng, cs, cfg.side_heads, cfg.mlp_ratio, std, True, pre + "vit."))
        self.head_w = parameter(rng.normal(0.0, std, size=(cs, cfg.num_classes)), True, "side.head.w")
        self.head_b = parameter(np.zeros(cfg.num_classes), True, "side.head.b")
        self.backbone_adapters = []
        if cfg.topology == "inbackbone":
            mid = cfg.adapter_dim or cs
            self.backbone_adapters = [
                BackboneAdapter.init(rng, cfg.frozen_dim, mid, std, f"backbone.adapter{i}.")
                for i in range(cfg.layers)
            ]
        if cfg.topology == "full":
            self.frozen.set_trainable(True)

    def named_parameters(self):
        out = dict(self.frozen.named())
        out.update(self.side_named())
        return out

    def side_named(self):
        out = dict(self.embed.named())
        for s in (self.sme, self.sme_spatial):
            if s is not None:
                out.update(s.named())
        for layer in range(self.cfg.layers):
            out[self.fuse_w[layer].name] = self.fuse_w[layer]
            out[self.fuse_b[layer].name] = self.fuse_b[layer]
            for part in (self.td[layer], self.tconv[layer]):
                if part is not None:
                    out.update(part.named())
            out.update(self.blocks[layer].named())
        out[self.head_w.name] = self.head_w
        out[self.head_b.name] = self.head_b
        for a in self.backbone_adapters:
            out.update(a.named())
        return out

    def frozen_named(self):
        return dict(self.frozen.named())

    def trainable(self):
        return [t for t in self.named_parameters().values() if t.requires_grad]

    def load_arrays(self, arrays):
        """Copy ``{name: array}`` values into the parameters in place."""
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        unknown = set(arrays) - set(named)
        if missing or unknown:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unknown {sorted(unknown)[:3]}")
        for name, arr in arrays.items():
            t = named[name]
            if t.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data[...] = arr


def count_params(tensors):
    return int(sum(t.size for t in tensors))


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------

def fuse_frozen(side, frozen, proj_w, proj_b, detach=True):
    """``side + frozen @ W + b`` token-wise; ``frozen`` is cut from the graph."""
    if side.shape[:-1] != frozen.shape[:-1]:
        raise ShapeError(f"fuse_frozen: token layout {side.shape[:-1]} != {frozen.shape[:-1]}")
    if detach:
        frozen = frozen.detach()
    return ops.add(side, ops.linear(frozen, proj_w, proj_b))


def _as_batch(video):
    v = video if isinstance(video, Tensor) else Tensor(video)
    if v.ndim == 4:
        return ops.reshape(v, (1,) + v.shape), True
    if v.ndim != 5 or v.shape[1] != 3:
        raise ShapeError(f"video must be [3, T, H, W] or [B, 3, T, H, W], got {v.shape}")
    return v, False


def network_forward(video, cfg, model, indices=None, taps=None):
    """Class logits for a clip [3, T_raw, H, W] -> [N_c] or batch -> [B, N_c].

    ``indices`` are the sampled frame positions (length ``cfg.frames``, or one
    row per clip); segment centres by default.  A ``taps`` dict receives the
    motion tokens (``"motion"``) and each layer's output tokens (``"layers"``).
    """
    v, single = _as_batch(video)
    b, _, t_raw, h, w = v.shape
    if (h, w) != (cfg.height, cfg.width):
        raise ShapeError(f"video frames {h}x{w} != configured {cfg.height}x{cfg.width}")
    if indices is None:
        indices = segment_indices(t_raw, cfg.frames)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[-1] != cfg.frames:
        raise ShapeError(f"expected {cfg.frames} sampled frames, got {idx.shape[-1]}")
    grid = cfg.grid

    sampled = adapters.sample_frames(v, idx)

    # frozen spatial branch
    extra = None
    if model.sme_spatial is not None:
        with branch("adapters"):
            m = adapters.motion_tokens(v, idx, model.sme_spatial, cfg.patch)
            if m is not None:
                extra = ops.scale(adapters.with_zero_cls(m), cfg.alpha)
    hook = None
    if model.backbone_adapters:
        def hook(i, tokens):
            with branch("adapters"):
                return model.backbone_adapters[i](tokens, grid)
    zs = frozen_forward(sampled, model.frozen, extra_input=extra, block_hook=hook,
                        require_frozen=cfg.topology != "full")
    detach = cfg.topology == "side" and model.sme_spatial is None

    # side input
    app = adapters.appearance_tokens(sampled, model.embed)
    motion = None
    if model.sme is not None:
        with branch("adapters"):
            motion = adapters.motion_tokens(v, idx, model.sme, cfg.patch)
            if motion is not None:
                motion = ops.scale(adapters.with_zero_cls(motion), cfg.alpha)
    if cfg.sme_mode in ("temporal", "spatial+temporal"):
        with branch("adapters"):
            x = ops.scale(app, cfg.beta)
            if motion is not None:
                x = ops.add(x, motion)
    else:
        x = app

    for layer in range(cfg.layers):
        if cfg.fusion_order == "shift_first" and cfg.cls_shift_enabled:
            with branch("adapters"):
                x = adapters.shift_cls_tokens(x, cfg.shift_fold_div)
        with branch("fusion"):
            x = fuse_frozen(x, zs[layer], model.fuse_w[layer], model.fuse_b[layer], detach=detach)
        if layer == 0 and cfg.sme_mode == "cross" and motion is not None:
            with branch("adapters"):
                x = ops.add(x, motion)
        with branch("adapters"):
            if cfg.fusion_order == "fuse_first" and cfg.cls_shift_enabled:
                x = adapters.shift_cls_tokens(x, cfg.shift_fold_div)
            if model.td[layer] is not None:
                x = adapters.td_forward(x, model.td[layer], grid)
            elif model.tconv[layer] is not None:
                x = adapters.temporal_conv_forward(x, model.tconv[layer], grid)
        x = vit_block_forward(x, model.blocks[layer])
        if taps is not None:
            taps.setdefault("layers", []).append(x)

    f_out = x[:, :, 1:, :]
    if cfg.sme_mode == "additional" and motion is not None:
        with branch("adapters"):
            f_out = ops.add(f_out, motion[:, :, 1:, :])
    per_token = ops.linear(f_out, model.head_w, model.head_b)  # [B, T, N, N_c]
    logits = ops.mean(per_token, axis=(1, 2))
    if single:
        logits = ops.reshape(logits, (cfg.num_classes,))
    if taps is not None:
        taps["motion"] = motion
    return logits


def ls_cross_entropy(logits, labels, smoothing=0.0):
    """Label-smoothed cross-entropy, averaged over the batch.

    Targets are ``(1 - smoothing) * onehot(y) + smoothing / N_c``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {smoothing}")
    lg = logits if logits.ndim == 2 else ops.reshape(logits, (1,) + logits.shape)
    nc = lg.shape[-1]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != lg.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {lg.shape[0]} logit rows")
    if y.min() < 0 or y.max() >= nc:
        raise ValueError(f"label out of range [0, {nc})")
    target = np.full(lg.shape, smoothing / nc)
    target[np.arange(len(y)), y] += 1.0 - smoothing
    logp = ops.log_softmax(lg)
    per_clip = ops.sum(ops.mul(logp, Tensor(target)), axis=-1)
    return ops.scale(ops.mean(per_clip), -1.0)
