"""End-to-end acceptance checks A1-A8; the terminal summary prints one verdict line each."""
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from tdsnet.adapters import TdParams, motion_tokens, pool_difference, frame_differences, td_forward, SmeParams
from tdsnet.autodiff.tensor import Tensor, backward, graph_census, parameter
from tdsnet.cli import main
from tdsnet.data import DatasetSpec, flip_label, make_dataset
from tdsnet.network import MODEL_PRESETS, TDSModel, ls_cross_entropy, network_forward
from tdsnet.profiler import audit_backward_memory, audit_by_extrapolation
from tdsnet.train import TRAIN_PRESETS, AdamState, adamw_step, lr_at, train

TINY = MODEL_PRESETS["tiny"]
TINY_TRAIN = TRAIN_PRESETS["tiny"]
SPEC = DatasetSpec()
FLIP = [flip_label(c, SPEC) for c in range(SPEC.num_classes)]
FACTORIZED = dict(sme_mode="off", td_layer_mask=(False,) * TINY.layers, td_fallback="none",
                  cls_shift_enabled=False)
CASES = 1000


@pytest.fixture(scope="module")
def drift_data():
    return make_dataset(SPEC)


def verdict(key, ok, detail):
    ACCEPTANCE[key] = detail
    assert ok, f"{key}: {detail}"


# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_a1_gradient_integrity(tmp_path):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--preset", "tiny", "--out", str(tmp_path)])
    secs = time.perf_counter() - t0
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    err = res["max_relative_error"]
    verdict("A1", code == 0 and err < 1e-4 and secs < 120,
            f"max rel err {err:.2e} over {res['probes']} probes, {secs:.1f}s (< 1e-4, < 120s)")


def test_a2_frozen_isolation(drift_data):
    model = TDSModel(TINY, seed=0)
    clips = drift_data[0][:4]
    x = np.stack([c.frames for c in clips])
    loss = ls_cross_entropy(network_forward(x, TINY, model), [c.label for c in clips], TINY.label_smoothing)
    census = graph_census(loss)
    grads = backward(loss)
    frozen = set(model.frozen_named().values())
    frozen_grads = [t.name for t in grads if t in frozen or t.name.startswith("frozen.")]
    ok = not frozen_grads and census.nodes["frozen"] == 0 and census.bytes["frozen"] == 0 \
        and grads.visited["frozen"] == 0 and len(grads) == len(model.trainable())
    verdict("A2", ok, f"frozen grads {len(frozen_grads)}, frozen retained nodes {census.nodes['frozen']} "
                      f"/ bytes {census.bytes['frozen']}, side grads {len(grads)}/{len(model.trainable())}")


@pytest.mark.slow
def test_a3_memory_ordering():
    tiny = audit_backward_memory(TINY, batch=2)
    tb = [tiny.row(t).total_bytes for t in ("side", "inbackbone", "full")]
    paper = audit_by_extrapolation(MODEL_PRESETS["paper"])
    pb = [paper.row(t).total_bytes for t in ("side", "inbackbone", "full")]
    ratio = pb[0] / pb[1]
    ok = tb[0] < tb[1] < tb[2] and pb[0] < pb[1] < pb[2] and ratio < 0.6 and paper.row("side").frozen_bytes == 0
    mib = lambda v: "/".join(f"{b / 2**20:.1f}" for b in v)  # noqa: E731
    verdict("A3", ok, f"tiny MiB {mib(tb)}; paper-preset MiB {mib(pb)}; side/inbackbone {ratio:.3f} (< 0.6)")


@pytest.mark.slow
def test_a4_temporal_learning(drift_data):
    tr, va = drift_data
    t0 = time.perf_counter()
    _, hist = train(TINY, TINY_TRAIN, tr, va, flip_map=FLIP)
    secs = time.perf_counter() - t0
    _, flat = train(TINY.replace(**FACTORIZED), TINY_TRAIN, tr, va, flip_map=FLIP)
    last = hist[-1]
    worst_flat = max(m.val_top1 for m in flat)
    ok = last.top1 >= 95 and last.val_top1 >= 85 and secs < 15 * 60 and worst_flat <= 40 \
        and len(hist) == len(flat) == 30
    verdict("A4", ok, f"default train/val top-1 {last.top1:.1f}/{last.val_top1:.1f} in {secs / 60:.1f} min; "
                      f"frame-factorized best val {worst_flat:.1f} (<= 40)")


A5_BUDGET = TINY_TRAIN.replace(epochs=8, warmup_epochs=1)
A5_SEEDS = (0, 1, 2)


@pytest.mark.slow
def test_a5_ablation_directions(drift_data):
    tr, va = drift_data
    points = {"n2": {}, "n1": dict(window_radius=1), "n0": dict(window_radius=0),
              "alpha_only": dict(beta=0.0), "beta_only": dict(alpha=0.0)}
    mean = {}
    for name, change in points.items():
        accs = [train(TINY.replace(**change), A5_BUDGET.replace(seed=s), tr, va, flip_map=FLIP)[1][-1].val_top1
                for s in A5_SEEDS]
        mean[name] = float(np.mean(accs))
    eq = mean["n2"]  # alpha = beta = 1 at n = 2 is the default point
    ok = mean["n2"] >= mean["n1"] >= mean["n0"] and eq >= mean["alpha_only"] and eq >= mean["beta_only"]
    verdict("A5", ok, "mean val top-1 over 3 seeds: " + ", ".join(f"{k} {v:.1f}" for k, v in mean.items()))


# ---- A6: brute-force oracles ------------------------------------------------

def _pool_oracle(z, k):
    c, t, h, w = z.shape
    out = np.empty_like(z)
    for ci in range(c):
        for ti in range(t):
            for y in range(h):
                for x in range(w):
                    best = -math.inf
                    for j in range(ti - k // 2, ti + k // 2 + 1):
                        best = max(best, z[ci, min(max(j, 0), t - 1), y, x])
                    out[ci, ti, y, x] = z[ci, ti, y, x] - best
    return out


def _diff_oracle(win):
    f = win.shape[1]
    out = np.empty((3 * (f - 1),) + win.shape[2:])
    for t in range(f - 1):
        for ch in range(3):
            out[3 * t + ch] = win[ch, t + 1] - win[ch, t]
    return out


def _ce_oracle(logits, y, a):
    n = len(logits)
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return -sum(((1 - a) * (i == y) + a / n) * (logits[i] - lse) for i in range(n))


def _adamw_oracle(p, gs, lr, wd, b1, b2, eps):
    m = v = 0.0
    for step, g in enumerate(gs, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1 ** step)) / (math.sqrt(v / (1 - b2 ** step)) + eps)
    return p


def _lr_oracle(step, total, warm, base):
    if step < warm:
        return base * step / warm
    frac = (step - warm) / (total - warm)
    return base * (1 + math.cos(math.pi * min(frac, 1.0))) / 2


def test_a6_operator_oracles():
    rng = np.random.default_rng(6)
    worst = {}
    for name in ("pool_difference", "frame_differences", "ls_cross_entropy", "adamw_step", "lr_at"):
        worst[name] = 0.0
    for _ in range(CASES):
        k = int(rng.choice([1, 3, 5]))
        z = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 7)), 2, 2)) * 10
        worst["pool_difference"] = max(worst["pool_difference"],
                                       np.abs(pool_difference(Tensor(z), k).data - _pool_oracle(z, k)).max())

        win = rng.normal(size=(3, 2 * int(rng.integers(1, 4)) + 1, 2, 3))
        worst["frame_differences"] = max(worst["frame_differences"],
                                         np.abs(frame_differences(Tensor(win)).data - _diff_oracle(win)).max())

        n = int(rng.integers(2, 10))
        lg = rng.normal(size=n) * rng.uniform(0.1, 20)
        y = int(rng.integers(0, n))
        a = float(rng.uniform(0, 0.99))
        worst["ls_cross_entropy"] = max(worst["ls_cross_entropy"],
                                        abs(ls_cross_entropy(Tensor(lg), y, a).item() - _ce_oracle(lg.tolist(), y, a)))

        steps = int(rng.integers(1, 6))
        p0 = rng.normal(size=3)
        gs = rng.normal(size=(steps, 3))
        lr, wd = float(rng.uniform(1e-4, 0.1)), float(rng.uniform(0, 0.2))
        b1, b2 = float(rng.uniform(0.5, 0.99)), float(rng.uniform(0.9, 0.9999))
        p = parameter(p0.copy())
        st = AdamState.zeros([p])
        for g in gs:
            adamw_step([p], {p: g}, st, lr, wd, (b1, b2), 1e-8)
        ref = [_adamw_oracle(p0[i], gs[:, i], lr, wd, b1, b2, 1e-8) for i in range(3)]
        worst["adamw_step"] = max(worst["adamw_step"], np.abs(p.data - ref).max())

        total = int(rng.integers(2, 1000))
        warm = int(rng.integers(0, total))
        step = int(rng.integers(0, total + 1))
        base = float(rng.uniform(1e-5, 1))
        worst["lr_at"] = max(worst["lr_at"], abs(lr_at(step, total, warm, base) - _lr_oracle(step, total, warm, base)))
    ok = all(v <= 1e-10 for v in worst.values())
    verdict("A6", ok, f"{CASES} cases each, worst abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_a7_static_input_null():
    rng = np.random.default_rng(7)
    worst_motion = worst_td = 0.0
    for trial in range(20):
        # arbitrary (not just freshly initialised) weights
        sme = SmeParams.init(rng, 32, 8, int(rng.integers(1, 4)), std=float(rng.uniform(0.01, 3)))
        frame = rng.uniform(size=(2, 3, 1, 32, 32)) * rng.uniform(0.1, 100)
        video = np.repeat(frame, 16, axis=2)
        idx = np.sort(rng.choice(16, size=8, replace=False))
        worst_motion = max(worst_motion, np.abs(motion_tokens(Tensor(video), idx, sme, 8).data).max())

        td = TdParams.init(rng, 32, reduction=int(rng.choice([1, 2, 4])), pool_kernel=int(rng.choice([1, 3, 5])),
                           std=float(rng.uniform(0.01, 3)))
        td.reduce_b.data[:] = rng.normal(size=td.reduce_b.shape) * 10
        tok = np.repeat(rng.normal(size=(2, 1, 17, 32)) * 10, 8, axis=1)
        worst_td = max(worst_td, np.abs(td_forward(Tensor(tok), td).data - tok).max())
    verdict("A7", worst_motion <= 1e-12 and worst_td <= 1e-12,
            f"max |motion| {worst_motion:.1e}, max |td(x) - x| {worst_td:.1e} over 20 random static cases")


def test_a8_determinism(tmp_path):
    argv = ["train", "--preset", "tiny", "--epochs", "2", "--warmup-epochs", "1", "--clips-per-class", "16", "--val-per-class", "4"]
    runs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        assert main(argv + ["--out", str(out)]) == 0
        lines = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
        for rec in lines:
            rec.pop("seconds")  # wall clock
        runs.append(((out / "checkpoint.tdsc").read_bytes(), lines))
    same_ckpt = runs[0][0] == runs[1][0]
    same_metrics = runs[0][1] == runs[1][1]
    verdict("A8", same_ckpt and same_metrics,
            f"checkpoints identical {same_ckpt} ({len(runs[0][0])} bytes), metrics identical {same_metrics}")
