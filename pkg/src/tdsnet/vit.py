"""Patch embedding, pre-norm transformer blocks and the frozen spatial encoder."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, branch, parameter


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


@dataclass
class Embedding:
    """Patch projection (as a stride-P convolution), CLS token and positions."""

    patch_w: Tensor  # [C, 3, P, P]
    patch_b: Tensor  # [C]
    cls: Tensor  # [C]
    pos: Tensor  # [1 + N, C]

    @classmethod
    def init(cls, rng, dim, patch, num_patches, std=0.02, requires_grad=True, prefix=""):
        return cls(
            patch_w=parameter(_normal(rng, (dim, 3, patch, patch), std), requires_grad, prefix + "patch_w"),
            patch_b=parameter(np.zeros(dim), requires_grad, prefix + "patch_b"),
            cls=parameter(_normal(rng, (dim,), std), requires_grad, prefix + "cls"),
            pos=parameter(_normal(rng, (1 + num_patches, dim), std), requires_grad, prefix + "pos"),
        )

    @property
    def patch(self):
        return self.patch_w.shape[-1]

    def named(self):
        for f in fields(self):
            yield getattr(self, f.name).name, getattr(self, f.name)


@dataclass
class VitBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor  # [C, 3C]
    qkv_b: Tensor
    proj_w: Tensor  # [C, C]
    proj_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor  # [C, hidden]
    fc1_b: Tensor
    fc2_w: Tensor  # [hidden, C]
    fc2_b: Tensor
    heads: int

    @classmethod
    def init(cls, rng, dim, heads, mlp_ratio=4, std=0.02, requires_grad=True, prefix=""):
        if dim % heads:
            raise ShapeError(f"vit block: channel dim {dim} not divisible by {heads} heads")
        hidden = mlp_ratio * dim

        def p(name, arr):
            return parameter(arr, requires_grad, prefix + name)

        return cls(
            ln1_g=p("ln1_g", np.ones(dim)),
            ln1_b=p("ln1_b", np.zeros(dim)),
            qkv_w=p("qkv_w", _normal(rng, (dim, 3 * dim), std)),
            qkv_b=p("qkv_b", np.zeros(3 * dim)),
            proj_w=p("proj_w", _normal(rng, (dim, dim), std)),
            proj_b=p("proj_b", np.zeros(dim)),
            ln2_g=p("ln2_g", np.ones(dim)),
            ln2_b=p("ln2_b", np.zeros(dim)),
            fc1_w=p("fc1_w", _normal(rng, (dim, hidden), std)),
            fc1_b=p("fc1_b", np.zeros(hidden)),
            fc2_w=p("fc2_w", _normal(rng, (hidden, dim), std)),
            fc2_b=p("fc2_b", np.zeros(dim)),
            heads=heads,
        )

    @property
    def dim(self):
        return self.qkv_w.shape[0]

    def named(self):
        for f in fields(self):
            if f.name != "heads":
                t = getattr(self, f.name)
                yield t.name, t


def patch_embed(frames, patch_size, proj_w, proj_b):
    """Project non-overlapping PxP patches of ``frames`` [..., 3, H, W] to [..., N, C].

    Patches are ordered row-major over the (H/P, W/P) grid.
    """
    h, w = frames.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ShapeError(f"patch_embed: frame {h}x{w} not divisible by patch {patch_size}")
    if proj_w.shape[-1] != patch_size:
        raise ShapeError(f"patch_embed: projection kernel {proj_w.shape[-1]} != patch {patch_size}")
    lead = frames.shape[:-3]
    x = ops.reshape(frames, (-1,) + frames.shape[-3:])
    y = ops.conv2d(x, proj_w, proj_b, stride=patch_size)  # [M, C, H', W']
    m, c = y.shape[:2]
    y = ops.permute(ops.reshape(y, (m, c, -1)), (0, 2, 1))
    return ops.reshape(y, lead + y.shape[1:])


def build_frame_tokens(patches, cls, pos):
    """Prepend the CLS token and add positional embeddings: [..., 1+N, C]."""
    n, c = patches.shape[-2:]
    if cls.shape != (c,) or pos.shape != (n + 1, c):
        raise ShapeError(
            f"build_frame_tokens: patches {patches.shape}, cls {cls.shape}, pos {pos.shape} disagree"
        )
    lead = patches.shape[:-2]
    cls_row = ops.broadcast_to(ops.reshape(cls, (1,) * len(lead) + (1, c)), lead + (1, c))
    return ops.add(ops.concat([cls_row, patches], axis=-2), pos)


def attention(x, p):
    """Multi-head self-attention over the token axis of ``x`` [M, N', C]."""
    m, n, c = x.shape
    h = p.heads
    dh = c // h
    qkv = ops.linear(x, p.qkv_w, p.qkv_b)
    qkv = ops.permute(ops.reshape(qkv, (m, n, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ops.softmax(scores)
    out = ops.matmul(attn, v)  # [M, h, N', dh]
    out = ops.reshape(ops.permute(out, (0, 2, 1, 3)), (m, n, c))
    return ops.linear(out, p.proj_w, p.proj_b)


def mlp(x, p):
    return ops.linear(ops.gelu(ops.linear(x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def vit_block_forward(tokens, p):
    """Pre-norm block on [..., N', C]: x += MHSA(LN(x)); x += FFN(LN(x)).

    Attention mixes tokens of one frame only.
    """
    c = tokens.shape[-1]
    if c != p.dim:
        raise ShapeError(f"vit block: token channels {c} != block width {p.dim}")
    if c % p.heads:
        raise ShapeError(f"vit block: channel dim {c} not divisible by {p.heads} heads")
    lead = tokens.shape[:-2]
    x = ops.reshape(tokens, (-1,) + tokens.shape[-2:])
    x = ops.add(x, attention(ops.layer_norm(x, p.ln1_g, p.ln1_b), p))
    x = ops.add(x, mlp(ops.layer_norm(x, p.ln2_g, p.ln2_b), p))
    return ops.reshape(x, lead + x.shape[1:])


@dataclass
class FrozenEncoder:
    embed: Embedding
    blocks: list

    @classmethod
    def init(cls, rng, dim, heads, layers, patch, num_patches, mlp_ratio=4, std=0.02):
        embed = Embedding.init(rng, dim, patch, num_patches, std, requires_grad=False, prefix="frozen.")
        blocks = [
            VitBlockParams.init(rng, dim, heads, mlp_ratio, std, requires_grad=False, prefix=f"frozen.block{i}.")
            for i in range(layers)
        ]
        return cls(embed, blocks)

    def named(self):
        yield from self.embed.named()
        for b in self.blocks:
            yield from b.named()

    def set_trainable(self, flag):
        for _, t in self.named():
            t.requires_grad = flag


def frame_major(video):
    """[B, 3, T, H, W] -> [B, T, 3, H, W]."""
    return ops.permute(video, (0, 2, 1, 3, 4))


def frozen_forward(video, encoder, extra_input=None, block_hook=None, require_frozen=True):
    """Per-layer features Z^1..Z^L, each [B, T, 1+N, C_f].

    ``video`` is [B, 3, T, H, W] (or [3, T, H, W]).  Frames are encoded
    independently.  ``extra_input`` is added to the embedded tokens;
    ``block_hook(l, tokens)`` may rewrite tokens before block ``l`` (used by
    the in-backbone adapter topology).
    """
    if require_frozen and any(t.requires_grad for _, t in encoder.named()):
        raise ValueError("frozen_forward: encoder parameters must have requires_grad=False")
    single = video.ndim == 4
    if single:
        video = ops.reshape(video, (1,) + video.shape)
    with branch("frozen"):
        frames = frame_major(video)
        e = encoder.embed
        x = build_frame_tokens(patch_embed(frames, e.patch, e.patch_w, e.patch_b), e.cls, e.pos)
        if extra_input is not None:
            x = ops.add(x, extra_input)
        outs = []
        for i, blk in enumerate(encoder.blocks):
            if block_hook is not None:
                x = block_hook(i, x)
            x = vit_block_forward(x, blk)
            outs.append(x)
    if single:
        outs = [ops.reshape(z, z.shape[1:]) for z in outs]
    return outs
