"""Synthetic drift videos, sparse frame sampling and the clip file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_MAGIC = b"TDSD"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """Textured sprite drifting horizontally (wrapping) over a static background.

    Class ``c`` moves ``velocities[c]`` pixels per raw frame.  The defaults pair
    each direction with a slow and a fast speed chosen so that, under centre
    sampling, the set of sprite positions seen in a clip has the same
    distribution for every class: only frame order tells them apart.
    """

    velocities: tuple = (2, -2, 6, -6)
    static_class: bool = False
    clips_per_class: int = 64
    val_per_class: int = 16
    t_raw: int = 16
    height: int = 32
    width: int = 32
    sprite: int = 8
    seed: int = 0

    @property
    def class_velocities(self):
        return tuple(self.velocities) + ((0,) if self.static_class else ())

    @property
    def num_classes(self):
        return len(self.class_velocities)

    def validate(self):
        v = self.class_velocities
        if len(set(v)) != len(v):
            raise ValueError("class velocities must be distinct")
        if min(self.t_raw, self.height, self.width, self.sprite) < 1:
            raise ValueError("geometry extents must be positive")
        if self.sprite > min(self.height, self.width):
            raise ValueError("sprite larger than frame")
        if self.clips_per_class < 0 or self.val_per_class < 0:
            raise ValueError("clip counts must be >= 0")
        return self


@dataclass
class VideoClip:
    frames: np.ndarray  # [3, T_raw, H, W] in [0, 1]
    label: int
    id: str

    @property
    def t_raw(self):
        return self.frames.shape[1]


def sprite_positions(label, seed, spec):
    """(row, [col per raw frame]) of the sprite's top-left corner."""
    rng = np.random.default_rng((spec.seed, label, seed))
    row = int(rng.integers(0, spec.height - spec.sprite + 1))
    col0 = int(rng.integers(0, spec.width))
    v = spec.class_velocities[label]
    cols = (col0 + v * np.arange(spec.t_raw)) % spec.width
    return row, cols, rng


def gen_clip(label, seed, spec):
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"class {label} outside [0, {spec.num_classes})")
    row, cols, rng = sprite_positions(label, seed, spec)
    s = spec.sprite
    background = rng.uniform(0.0, 0.4, size=(3, spec.height, spec.width))
    texture = rng.uniform(0.6, 1.0, size=(3, s, s))
    frames = np.repeat(background[:, None], spec.t_raw, axis=1)
    rows = np.arange(row, row + s)
    for t, c in enumerate(cols):
        xs = (c + np.arange(s)) % spec.width
        frames[:, t, rows[:, None], xs[None, :]] = texture
    return VideoClip(frames, int(label), f"c{label}-s{seed}")


def sprite_mask(label, seed, spec, t):
    """Boolean [H, W] footprint of the sprite in raw frame ``t``."""
    row, cols, _ = sprite_positions(label, seed, spec)
    m = np.zeros((spec.height, spec.width), dtype=bool)
    xs = (cols[t] + np.arange(spec.sprite)) % spec.width
    m[row:row + spec.sprite][:, xs] = True
    return m


def make_dataset(spec):
    """(train, val) clip lists, class-interleaved."""
    spec.validate()
    train, val = [], []
    for j in range(spec.clips_per_class):
        for c in range(spec.num_classes):
            train.append(gen_clip(c, j, spec))
    for j in range(spec.val_per_class):
        for c in range(spec.num_classes):
            val.append(gen_clip(c, spec.clips_per_class + j, spec))
    return train, val


def segment_indices(t_raw, t, jitter=False, rng=None):
    """One frame index per equal segment of ``t_raw``: the centre, or a uniform
    draw inside the segment when ``jitter``."""
    if t < 1 or t > t_raw:
        raise ValueError(f"cannot sample {t} frames from {t_raw}")
    starts = (np.arange(t) * t_raw) // t
    ends = (np.arange(1, t + 1) * t_raw) // t
    if not jitter:
        return starts + (ends - starts) // 2
    if rng is None:
        rng = np.random.default_rng()
    return rng.integers(starts, ends)


def sparse_sample(clip, t, jitter=False, seed=None):
    t_raw = clip if isinstance(clip, (int, np.integer)) else clip.t_raw
    return segment_indices(t_raw, t, jitter, np.random.default_rng(seed)).tolist()


def stack(clips):
    return np.stack([c.frames for c in clips]), np.array([c.label for c in clips], dtype=np.int64)


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

def flip_label(label, spec):
    """Class whose motion is the mirror image of ``label``'s."""
    v = spec.class_velocities
    return v.index(-v[label])


def flip_frames(frames):
    return np.ascontiguousarray(frames[..., ::-1])


def pad_crop(frames, pad, rng):
    """Edge-pad by ``pad`` pixels and crop back at a random offset (same for all frames)."""
    if pad <= 0:
        return frames
    h, w = frames.shape[-2:]
    p = np.pad(frames, [(0, 0)] * (frames.ndim - 2) + [(pad, pad), (pad, pad)], mode="edge")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return np.ascontiguousarray(p[..., dy:dy + h, dx:dx + w])


# ----------------------------------------------------------------------------
# file format
# ----------------------------------------------------------------------------

def write_dataset(path, clips):
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<II", DATA_VERSION, len(clips)))
        for clip in clips:
            name = clip.id.encode("utf-8")
            _, t_raw, h, w = clip.frames.shape
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<IIII", clip.label, t_raw, h, w))
            # frame-major, CHW inside each frame
            fh.write(np.ascontiguousarray(clip.frames.transpose(1, 0, 2, 3), dtype="<f8").tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated dataset file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dataset(path):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != DATA_MAGIC:
        raise DatasetFormatError("bad magic: not a TDSD dataset file")
    version, count = r.unpack("<II")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unknown dataset version {version}")
    clips = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        label, t_raw, h, w = r.unpack("<IIII")
        n = 3 * t_raw * h * w
        px = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(t_raw, 3, h, w)
        clips.append(VideoClip(np.ascontiguousarray(px.transpose(1, 0, 2, 3), dtype=np.float64), label, name))
    if r.pos != len(r.buf):
        raise DatasetFormatError(f"{len(r.buf) - r.pos} trailing bytes after {count} clips")
    return clips
