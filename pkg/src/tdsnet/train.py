"""AdamW with warmup + cosine schedule, label-smoothed training and top-k evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import save_checkpoint
from .autodiff.tensor import backward, no_grad
from .data import flip_frames, pad_crop, segment_indices, stack
from .network import TDSModel, count_params, ls_cross_entropy, network_forward


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    warmup_epochs: int = 4
    batch_size: int = 16
    seed: int = 0
    flip_prob: float = 0.5
    crop_pad: int = 0
    jitter: bool = True
    eval_batch: int = 32

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        from .network import ConfigError

        if self.base_lr < 0 or not math.isfinite(self.base_lr):
            raise ConfigError("base_lr must be finite and >= 0")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.crop_pad < 0:
            raise ConfigError("weight_decay and crop_pad must be >= 0")
        return self


TRAIN_PRESETS = {
    "tiny": TrainConfig(),
    "paper": TrainConfig(base_lr=1e-3, weight_decay=0.15, epochs=30, warmup_epochs=4, batch_size=128),
}


# ----------------------------------------------------------------------------
# optimizer and schedule
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """One in-place AdamW update; decay is decoupled from the moment estimates.

    ``grads`` maps tensors to arrays; a missing entry counts as a zero gradient.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.m[i].shape != p.shape:
            raise ValueError(f"optimizer state shape {state.m[i].shape} != parameter shape {p.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def lr_at(step, total_steps, warmup_steps, base_lr):
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

def topk_hits(logits, labels, k):
    k = min(k, logits.shape[1])
    # stable sort keeps ties deterministic (lower class index ranks first)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def predict(model, clips, batch=32):
    cfg = model.cfg
    out = []
    with no_grad():
        for s in range(0, len(clips), batch):
            x, _ = stack(clips[s:s + batch])
            out.append(network_forward(x, cfg, model).data)
    return np.concatenate(out, axis=0)


def evaluate(model, clips, batch=32):
    """``{"top1", "top5", "loss"}`` in percent / nats over ``clips``."""
    if not clips:
        raise ValueError("evaluate: empty dataset")
    logits = predict(model, clips, batch)
    labels = np.array([c.label for c in clips], dtype=np.int64)
    return scores(logits, labels, model.cfg.label_smoothing)


def scores(logits, labels, smoothing=0.0):
    with no_grad():
        from .autodiff.tensor import Tensor

        loss = ls_cross_entropy(Tensor(logits), labels, smoothing).item()
    return {
        "top1": 100.0 * float(topk_hits(logits, labels, 1).mean()),
        "top5": 100.0 * float(topk_hits(logits, labels, 5).mean()),
        "loss": loss,
    }


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class Metrics:
    epoch: int
    loss: float
    top1: float
    top5: float
    val_top1: float
    val_top5: float
    lr: float
    seconds: float
    trainable_params: int
    frozen_params: int

    def as_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def checksum(tensors):
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _augment(clips, tcfg, n_frames, flip_map, rng):
    frames, labels, rows = [], [], []
    for c in clips:
        x = c.frames
        y = c.label
        if tcfg.flip_prob > 0 and rng.random() < tcfg.flip_prob:
            x = flip_frames(x)
            y = int(flip_map[y])
        x = pad_crop(x, tcfg.crop_pad, rng)
        frames.append(x)
        labels.append(y)
        rows.append(segment_indices(c.t_raw, n_frames, tcfg.jitter, rng))
    return np.stack(frames), np.array(labels, dtype=np.int64), np.stack(rows)


def train(model_cfg, tcfg, train_clips, val_clips=None, out_dir=None, flip_map=None, log=None, model=None):
    """Train the side network; returns ``(model, [Metrics per epoch])``.

    ``flip_map[c]`` is the class of a mirrored clip of class ``c`` (required
    when ``flip_prob > 0``).  With ``out_dir`` a checkpoint and a JSON-lines
    metrics file are rewritten after every epoch.
    """
    tcfg.validate()
    if not train_clips:
        raise ValueError("train: empty dataset")
    if tcfg.flip_prob > 0 and flip_map is None:
        raise ValueError("train: flip augmentation needs a class mirror map")
    rng = np.random.default_rng(tcfg.seed)
    if model is None:
        model = TDSModel(model_cfg, seed=tcfg.seed)
    params = model.trainable()
    frozen = [t for t in model.named_parameters().values() if not t.requires_grad]
    state = AdamState.zeros(params)
    steps_per_epoch = math.ceil(len(train_clips) / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    warm = steps_per_epoch * tcfg.warmup_epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    history = []
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_clips))
        losses = []
        lr = 0.0
        for s in range(steps_per_epoch):
            batch = [train_clips[i] for i in order[s * tcfg.batch_size:(s + 1) * tcfg.batch_size]]
            x, y, idx = _augment(batch, tcfg, model_cfg.frames, flip_map, rng)
            logits = network_forward(x, model_cfg, model, indices=idx)
            loss = ls_cross_entropy(logits, y, model_cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {s}")
            grads = backward(loss)
            lr = lr_at(step, total, warm, tcfg.base_lr)
            adamw_step(params, grads, state, lr, tcfg.weight_decay, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
            losses.append(value)
            step += 1
        tr = evaluate(model, train_clips, tcfg.eval_batch)
        va = evaluate(model, val_clips, tcfg.eval_batch) if val_clips else {"top1": float("nan"), "top5": float("nan")}
        m = Metrics(
            epoch=epoch,
            loss=float(np.mean(losses)),
            top1=tr["top1"],
            top5=tr["top5"],
            val_top1=va["top1"],
            val_top5=va["top5"],
            lr=lr,
            seconds=time.perf_counter() - t0,
            trainable_params=count_params(params),
            frozen_params=count_params(frozen),
        )
        history.append(m)
        if out is not None:
            save_checkpoint(out / "checkpoint.tdsc", model.named_parameters())
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(m.as_json() + "\n")
        if log is not None:
            log(m)
    return model, history
