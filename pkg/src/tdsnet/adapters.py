"""Motion operators of the side network.

* SME adapter: stacked consecutive-frame differences around each sampled
  frame, convolved to patch tokens and blended with the appearance embedding.
* TD adapter: channel bottleneck, ``Z - maxpool_t(Z)``, channel expansion,
  added residually to the patch tokens.
* CLS token shift between neighbouring frames.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, parameter
from .vit import build_frame_tokens, frame_major, patch_embed

TD_MODES = ("pool", "conv", "direct")


# ----------------------------------------------------------------------------
# SME adapter
# ----------------------------------------------------------------------------

@dataclass
class SmeParams:
    conv_w: Optional[Tensor]  # [C_s, 3*2n, P, P]; None when n == 0
    alpha: float = 1.0
    beta: float = 1.0
    window_radius: int = 2

    @classmethod
    def init(cls, rng, out_dim, patch, window_radius, alpha=1.0, beta=1.0, std=0.02, prefix="side.sme."):
        if window_radius < 0:
            raise ShapeError("sme: window radius must be >= 0")
        w = None
        if window_radius:
            shape = (out_dim, 3 * 2 * window_radius, patch, patch)
            w = parameter(rng.normal(0.0, std, size=shape), True, prefix + "conv_w")
        return cls(w, float(alpha), float(beta), int(window_radius))

    def named(self):
        if self.conv_w is not None:
            yield self.conv_w.name, self.conv_w


def window_indices(centers, radius, t_raw):
    """[len(centers), 2n+1] frame indices, clamped to the clip."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if centers.size and (centers.min() < 0 or centers.max() >= t_raw):
        raise IndexError(f"window center out of range [0, {t_raw})")
    offs = np.arange(-radius, radius + 1)
    return np.clip(centers[:, None] + offs[None, :], 0, t_raw - 1)


def local_window(video, center_index, radius):
    """Frames ``i-n .. i+n`` of ``video`` [..., 3, T_raw, H, W], edge-replicated."""
    t_raw = video.shape[-3]
    if not 0 <= center_index < t_raw:
        raise IndexError(f"local_window: index {center_index} outside [0, {t_raw})")
    idx = window_indices([center_index], radius, t_raw)[0]
    lead = (slice(None),) * (video.ndim - 3)
    return ops.getitem(video, lead + (idx,))


def frame_differences(window):
    """Consecutive differences of ``window`` [..., 3, F, H, W] stacked on channels.

    Output is [..., 3*(F-1), H, W] with channel group ``t`` = V_{t+1} - V_t.
    """
    f = window.shape[-3]
    if f < 2:
        raise ShapeError(f"frame_differences: need at least 2 frames, got {f}")
    nd = window.ndim
    lead = (slice(None),) * (nd - 3)
    d = ops.sub(window[lead + (slice(1, None),)], window[lead + (slice(0, -1),)])
    # [..., 3, F-1, H, W] -> [..., F-1, 3, H, W]
    axes = tuple(range(nd - 4)) + (nd - 3, nd - 4, nd - 2, nd - 1)
    d = ops.permute(d, axes)
    return ops.reshape(d, d.shape[:-4] + (3 * (f - 1),) + d.shape[-2:])


def _batched(video):
    return (ops.reshape(video, (1,) + video.shape), True) if video.ndim == 4 else (video, False)


def motion_tokens(video, indices, sme, patch):
    """Conv(D_i) reshaped to patch tokens: [B, T, N, C_s]; None when n == 0.

    ``video`` is the raw clip [B, 3, T_raw, H, W]; ``indices`` the T sampled
    frame positions (shared across the batch, or one row per clip).
    """
    if sme.conv_w is None:
        return None
    n = sme.window_radius
    if sme.conv_w.shape[1] != 6 * n:
        raise ShapeError(f"sme: conv expects {sme.conv_w.shape[1]} channels, window gives {6 * n}")
    b, _, t_raw, h, w = video.shape
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        win = window_indices(idx, n, t_raw)  # [T, 2n+1]
        frames = ops.getitem(video, (slice(None), slice(None), win))  # [B, 3, T, 2n+1, H, W]
    else:
        rows = [window_indices(r, n, t_raw) for r in idx]
        frames = ops.concat(
            [ops.getitem(video, (slice(i, i + 1), slice(None), rows[i])) for i in range(b)], axis=0
        )
    t = frames.shape[2]
    frames = ops.permute(frames, (0, 2, 1, 3, 4, 5))  # [B, T, 3, 2n+1, H, W]
    d = frame_differences(frames)  # [B, T, 6n, H, W]
    d = ops.reshape(d, (b * t,) + d.shape[2:])
    y = ops.conv2d(d, sme.conv_w, None, stride=patch)  # [BT, C_s, H', W']
    if y.shape[-1] * patch != w or y.shape[-2] * patch != h:
        raise ShapeError(f"sme: conv grid {y.shape[-2:]} does not tile a {h}x{w} frame")
    c = y.shape[1]
    y = ops.permute(ops.reshape(y, (b * t, c, -1)), (0, 2, 1))
    return ops.reshape(y, (b, t) + y.shape[1:])


def sample_frames(video, indices):
    """Select the sampled frames: [B, 3, T_raw, H, W] -> [B, 3, T, H, W]."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        return ops.getitem(video, (slice(None), slice(None), idx))
    return ops.concat(
        [ops.getitem(video, (slice(i, i + 1), slice(None), idx[i])) for i in range(len(idx))], axis=0
    )


def appearance_tokens(sampled, embed):
    """Side-network patch + positional embedding of each sampled frame."""
    frames = frame_major(sampled)
    return build_frame_tokens(patch_embed(frames, embed.patch, embed.patch_w, embed.patch_b), embed.cls, embed.pos)


def with_zero_cls(patches):
    """[B, T, N, C] -> [B, T, 1+N, C] with an all-zero CLS row."""
    zero = Tensor(np.zeros(patches.shape[:-2] + (1, patches.shape[-1])))
    return ops.concat([zero, patches], axis=-2)


def sme_forward(video, indices, sme, embed):
    """``alpha * [0; Conv(D_i)] + beta * appearance(V_i)`` for each sampled frame.

    Accepts a single clip [3, T_raw, H, W] with an int or list of indices, or
    a batch [B, 3, T_raw, H, W]; output is [(B,) (T,) 1+N, C_s].
    """
    squeeze_t = np.isscalar(indices)
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    video, single = _batched(video)
    app = appearance_tokens(sample_frames(video, idx), embed)
    out = ops.scale(app, sme.beta)
    motion = motion_tokens(video, idx, sme, embed.patch)
    if motion is not None:
        out = ops.add(out, ops.scale(with_zero_cls(motion), sme.alpha))
    if single:
        out = ops.reshape(out, out.shape[1:])
        if squeeze_t:
            out = ops.reshape(out, out.shape[1:])
    return out


# ----------------------------------------------------------------------------
# TD adapter
# ----------------------------------------------------------------------------

def pool_difference(z, k):
    """``z - maxpool_t(z)`` over the time axis of ``z`` [..., C, T, H, W]; k odd."""
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"pool_difference: temporal kernel must be odd, got {k}")
    return ops.sub(z, ops.max_pool3d(z, (k, 1, 1)))


def direct_difference(z):
    """Forward temporal difference ``z[t+1] - z[t]``; last frame gets zero."""
    t_axis = z.ndim - 3
    pads = [(0, 0)] * z.ndim
    pads[t_axis] = (0, 1)
    shifted = ops.pad(z, pads, mode="edge")
    idx = [slice(None)] * z.ndim
    idx[t_axis] = slice(1, None)
    return ops.sub(shifted[tuple(idx)], z)


@dataclass
class TdParams:
    reduce_w: Tensor  # [C/r, C, 1, 1, 1]
    reduce_b: Tensor
    expand_w: Tensor  # [C, C/r, 1, 1, 1]; no bias, so D_z = 0 leaves tokens unchanged
    pool_kernel: int = 3
    reduction: int = 2
    mode: str = "pool"
    tconv_w: Optional[Tensor] = None  # [C/r, C/r, k, 1, 1] for mode 'conv'
    tconv_b: Optional[Tensor] = None

    @classmethod
    def init(cls, rng, dim, reduction=2, pool_kernel=3, mode="pool", std=0.02, prefix=""):
        if reduction < 1 or dim % reduction:
            raise ShapeError(f"td: channel dim {dim} not divisible by reduction {reduction}")
        if pool_kernel < 1 or pool_kernel % 2 == 0:
            raise ShapeError(f"td: pool kernel must be odd, got {pool_kernel}")
        if mode not in TD_MODES:
            raise ValueError(f"td: mode must be one of {TD_MODES}")
        mid = dim // reduction

        def p(name, arr):
            return parameter(arr, True, prefix + name)

        tw = tb = None
        if mode == "conv":
            tw = p("tconv_w", rng.normal(0.0, std, size=(mid, mid, pool_kernel, 1, 1)))
            tb = p("tconv_b", np.zeros(mid))
        return cls(
            reduce_w=p("reduce_w", rng.normal(0.0, std, size=(mid, dim, 1, 1, 1))),
            reduce_b=p("reduce_b", np.zeros(mid)),
            expand_w=p("expand_w", rng.normal(0.0, std, size=(dim, mid, 1, 1, 1))),
            pool_kernel=pool_kernel,
            reduction=reduction,
            mode=mode,
            tconv_w=tw,
            tconv_b=tb,
        )

    def named(self):
        for f in fields(self):
            t = getattr(self, f.name)
            if isinstance(t, Tensor):
                yield t.name, t


def resolve_grid(n, grid=None):
    if grid is not None:
        if grid[0] * grid[1] != n:
            raise ShapeError(f"token grid {grid} does not hold {n} patches")
        return tuple(grid)
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ShapeError(f"{n} patch tokens do not form a square grid; pass grid explicitly")
    return side, side


def tokens_to_volume(patches, grid):
    """[B, T, N, C] -> [B, C, T, H', W'] (row-major patch grid)."""
    b, t, n, c = patches.shape
    v = ops.permute(patches, (0, 3, 1, 2))
    return ops.reshape(v, (b, c, t) + tuple(grid))


def volume_to_tokens(v):
    b, c, t = v.shape[:3]
    v = ops.reshape(v, (b, c, t, -1))
    return ops.permute(v, (0, 2, 3, 1))


def _split_cls(tokens):
    return tokens[..., 0:1, :], tokens[..., 1:, :]


def _with_batch(tokens):
    if tokens.ndim == 3:
        return ops.reshape(tokens, (1,) + tokens.shape), True
    return tokens, False


def td_forward(tokens, td, grid=None):
    """TD adapter on [B, T, 1+N, C] (or [T, 1+N, C]); CLS rows pass through."""
    tokens, single = _with_batch(tokens)
    c = tokens.shape[-1]
    if td.reduce_w.shape[1] != c:
        raise ShapeError(f"td: adapter width {td.reduce_w.shape[1]} != token channels {c}")
    cls_row, patches = _split_cls(tokens)
    grid = resolve_grid(patches.shape[2], grid)
    z = tokens_to_volume(patches, grid)
    z = ops.conv3d(z, td.reduce_w, td.reduce_b)
    if td.mode == "pool":
        d = pool_difference(z, td.pool_kernel)
    elif td.mode == "conv":
        k = td.tconv_w.shape[2]
        d = ops.sub(z, ops.conv3d(z, td.tconv_w, td.tconv_b, padding=(k // 2, 0, 0)))
    else:
        d = direct_difference(z)
    y = ops.conv3d(d, td.expand_w, None)
    out = ops.concat([cls_row, ops.add(patches, volume_to_tokens(y))], axis=-2)
    return ops.reshape(out, out.shape[1:]) if single else out


@dataclass
class TemporalConvParams:
    """Channel-preserving 3x1x1 convolution used where TD adapters are disabled."""

    w: Tensor  # [C, C, 3, 1, 1]
    b: Tensor

    @classmethod
    def init(cls, rng, dim, std=0.02, prefix=""):
        return cls(
            parameter(rng.normal(0.0, std, size=(dim, dim, 3, 1, 1)), True, prefix + "tconv_w"),
            parameter(np.zeros(dim), True, prefix + "tconv_b"),
        )

    def named(self):
        yield self.w.name, self.w
        yield self.b.name, self.b


def temporal_conv_forward(tokens, p, grid=None):
    tokens, single = _with_batch(tokens)
    cls_row, patches = _split_cls(tokens)
    grid = resolve_grid(patches.shape[2], grid)
    z = ops.conv3d(tokens_to_volume(patches, grid), p.w, p.b, padding=(1, 0, 0))
    out = ops.concat([cls_row, ops.add(patches, volume_to_tokens(z))], axis=-2)
    return ops.reshape(out, out.shape[1:]) if single else out


# ----------------------------------------------------------------------------
# CLS token shift
# ----------------------------------------------------------------------------

def cls_shift(cls_seq, fold_div=4):
    """Shift channel folds of a [..., T, C] sequence along T.

    The first C/fold_div channels take the next frame's values, the next
    C/fold_div take the previous frame's; vacated slots are zero.
    """
    t, c = cls_seq.shape[-2:]
    if c < 4:
        raise ShapeError(f"cls_shift: need at least 4 channels, got {c}")
    if fold_div < 2 or c // fold_div == 0:
        raise ShapeError(f"cls_shift: fold divisor {fold_div} invalid for {c} channels")
    f = c // fold_div
    lead = cls_seq.shape[:-2]
    nd = cls_seq.ndim
    ix = (slice(None),) * (nd - 2)
    rest = cls_seq[ix + (slice(None), slice(2 * f, None))] if 2 * f < c else None
    if t == 1:
        back = Tensor(np.zeros(lead + (1, f)))
        fwd = Tensor(np.zeros(lead + (1, f)))
    else:
        tpad = [(0, 0)] * nd
        tpad[-2] = (0, 1)
        back = ops.pad(cls_seq[ix + (slice(1, None), slice(0, f))], tpad)
        tpad[-2] = (1, 0)
        fwd = ops.pad(cls_seq[ix + (slice(0, -1), slice(f, 2 * f))], tpad)
    parts = [back, fwd] + ([rest] if rest is not None else [])
    return ops.concat(parts, axis=-1)


def shift_cls_tokens(tokens, fold_div=4):
    """Apply :func:`cls_shift` to the CLS row of [B, T, 1+N, C] tokens."""
    cls_seq = tokens[:, :, 0, :]  # [B, T, C]
    shifted = cls_shift(cls_seq, fold_div)
    b, t, c = shifted.shape
    return ops.concat([ops.reshape(shifted, (b, t, 1, c)), tokens[:, :, 1:, :]], axis=2)
