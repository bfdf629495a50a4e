"""Patch-token activation maps and binary PPM output."""
from __future__ import annotations

import numpy as np

from .autodiff.tensor import no_grad
from .network import network_forward


def activation_maps(model, frames, layer, indices=None):
    """Per sampled frame [T, H/P, W/P] maps for one clip [3, T_raw, H, W].

    ``with_sme`` / ``without_sme`` are L2 norms of layer ``layer``'s patch
    tokens with the motion term on and off; ``motion`` is the norm of the SME
    motion tokens (zeros when the model has none).
    """
    cfg = model.cfg
    if not 0 <= layer < cfg.layers:
        raise IndexError(f"layer {layer} outside [0, {cfg.layers})")
    gh, gw = cfg.grid
    out = {}
    with no_grad():
        for key, c in (("with_sme", cfg), ("without_sme", cfg.replace(alpha=0.0))):
            taps = {}
            network_forward(frames[None], c, model, indices=indices, taps=taps)
            tok = taps["layers"][layer].data[0, :, 1:, :]  # [T, N, C]
            out[key] = np.linalg.norm(tok, axis=-1).reshape(-1, gh, gw)
            if key == "with_sme":
                m = taps["motion"]
                if m is None:
                    out["motion"] = np.zeros_like(out[key])
                else:
                    out["motion"] = np.linalg.norm(m.data[0, :, 1:, :], axis=-1).reshape(-1, gh, gw)
    return out


def to_gray(img, vmax=None):
    vmax = float(img.max()) if vmax is None else vmax
    if vmax <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * img / vmax), 0, 255).astype(np.uint8)


def upscale(img, factor):
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def write_ppm(path, gray):
    """Binary P6 image from a [h, w] uint8 array (grey replicated to RGB)."""
    h, w = gray.shape
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, _maxval, body = data.split(b"\n", 3)
    if magic != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in dims.split())
    px = np.frombuffer(body[: w * h * 3], dtype=np.uint8)
    return px.reshape(h, w, 3)


def side_by_side(maps, scale=8, gap=1):
    """Join the with/without/motion maps of one frame horizontally (shared scale
    for the first two)."""
    a, b, m = maps
    vmax = max(a.max(), b.max())
    tiles = [upscale(to_gray(a, vmax), scale), upscale(to_gray(b, vmax), scale), upscale(to_gray(m), scale)]
    h = tiles[0].shape[0]
    sep = np.full((h, gap), 255, dtype=np.uint8)
    row = []
    for t in tiles:
        row += [t, sep]
    return np.concatenate(row[:-1], axis=1)
