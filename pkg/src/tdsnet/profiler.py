"""Per-branch FLOP counts and retained-activation census for one training step."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff.tensor import flop_counter, graph_census, no_grad
from .network import TDSModel, count_params, ls_cross_entropy, network_forward

BRANCHES = ("frozen", "fusion", "side", "adapters")


# ----------------------------------------------------------------------------
# FLOPs
# ----------------------------------------------------------------------------

def _block_flops(rows, tokens, dim, mlp_ratio):
    """Multiply-adds (x2) of one pre-norm block over ``rows`` frames of ``tokens`` tokens."""
    per_frame = (
        2 * tokens * dim * 3 * dim  # qkv
        + 2 * 2 * tokens * tokens * dim  # q k^T and attn v
        + 2 * tokens * dim * dim  # output projection
        + 2 * 2 * tokens * dim * mlp_ratio * dim  # fc1, fc2
    )
    return rows * per_frame


def count_flops(cfg, batch=1):
    """Closed-form matmul/conv FLOPs (2 per multiply-add) of one forward, by branch."""
    b, t, n = batch, cfg.frames, cfg.num_patches
    rows = b * t
    tok = n + 1
    p2 = cfg.patch * cfg.patch
    cf, cs = cfg.frozen_dim, cfg.side_dim
    n_win = 6 * cfg.window_radius
    f = Counter()
    f["frozen"] += 2 * rows * n * cf * 3 * p2
    f["frozen"] += cfg.layers * _block_flops(rows, tok, cf, cfg.mlp_ratio)
    f["side"] += 2 * rows * n * cs * 3 * p2
    f["side"] += cfg.layers * _block_flops(rows, tok, cs, cfg.mlp_ratio)
    f["side"] += 2 * rows * n * cs * cfg.num_classes
    f["fusion"] += cfg.layers * 2 * rows * tok * cf * cs
    if cfg.sme_mode != "off" and cfg.sme_mode != "spatial" and n_win:
        f["adapters"] += 2 * rows * n * cs * n_win * p2
    if cfg.sme_mode in ("spatial", "spatial+temporal") and n_win:
        f["adapters"] += 2 * rows * n * cf * n_win * p2
    mid = cs // cfg.reduction
    for use_td in cfg.td_mask:
        if use_td:
            f["adapters"] += 2 * 2 * rows * n * cs * mid
            if cfg.td_mode == "conv":
                f["adapters"] += 2 * rows * n * mid * mid * cfg.pool_kernel
        elif cfg.td_fallback == "conv3d":
            f["adapters"] += 2 * rows * n * cs * cs * 3
    if cfg.topology == "inbackbone":
        a = cfg.adapter_dim or cs
        f["adapters"] += cfg.layers * (2 * 2 * rows * n * cf * a + 2 * rows * n * a * a * 3)
    return f


def measure_flops(cfg, model=None, batch=1, seed=0):
    """FLOPs reported by the primitives during a real forward pass."""
    model = model or TDSModel(cfg, seed=seed)
    video = _probe_video(cfg, batch, seed)
    with no_grad(), flop_counter() as counts:
        network_forward(video, cfg, model)
    return counts


# ----------------------------------------------------------------------------
# retained activations
# ----------------------------------------------------------------------------

@dataclass
class TopologyRow:
    topology: str
    nodes: dict
    bytes: dict
    trainable_params: int
    frozen_params: int
    frames: int
    method: str = "graph"

    @property
    def total_nodes(self):
        return sum(self.nodes.values())

    @property
    def total_bytes(self):
        return sum(self.bytes.values())

    @property
    def frozen_nodes(self):
        return self.nodes.get("frozen", 0)

    @property
    def frozen_bytes(self):
        return self.bytes.get("frozen", 0)


@dataclass
class FlopMemReport:
    label: str
    batch: int
    flops: dict
    rows: list = field(default_factory=list)

    @property
    def total_flops(self):
        return sum(self.flops.values())

    def row(self, topology):
        for r in self.rows:
            if r.topology == topology:
                return r
        raise KeyError(topology)

    def to_dict(self):
        return {
            "label": self.label,
            "batch": self.batch,
            "flops": dict(self.flops),
            "total_flops": self.total_flops,
            "topologies": [
                dict(asdict(r), total_nodes=r.total_nodes, total_bytes=r.total_bytes) for r in self.rows
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        lines = [f"# {self.label}  batch={self.batch}", ""]
        lines.append(f"{'branch':<10} {'GFLOPs':>12}")
        for k in BRANCHES:
            lines.append(f"{k:<10} {self.flops.get(k, 0) / 1e9:>12.4f}")
        lines.append(f"{'total':<10} {self.total_flops / 1e9:>12.4f}")
        lines.append("")
        head = ["topology", "frames", "nodes", "frozen_nodes", "MiB", "frozen_MiB", "trainable", "frozen_p", "method"]
        table = [head]
        for r in self.rows:
            table.append([
                r.topology, str(r.frames), str(r.total_nodes), str(r.frozen_nodes),
                f"{r.total_bytes / 2**20:.3f}", f"{r.frozen_bytes / 2**20:.3f}",
                str(r.trainable_params), str(r.frozen_params), r.method,
            ])
        widths = [max(len(row[i]) for row in table) for i in range(len(head))]
        for row in table:
            lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))))
        return "\n".join(lines) + "\n"


def _probe_video(cfg, batch, seed, t_raw=None):
    rng = np.random.default_rng(seed)
    t_raw = t_raw or 2 * cfg.frames
    return rng.uniform(0.0, 1.0, size=(batch, 3, t_raw, cfg.height, cfg.width))


def census_step(cfg, model, batch=1, seed=0, train=True):
    """Graph census of a forward + loss at ``cfg``; eval mode records nothing."""
    video = _probe_video(cfg, batch, seed)
    labels = np.arange(batch) % cfg.num_classes
    if not train:
        with no_grad():
            loss = ls_cross_entropy(network_forward(video, cfg, model), labels, cfg.label_smoothing)
    else:
        loss = ls_cross_entropy(network_forward(video, cfg, model), labels, cfg.label_smoothing)
    return graph_census(loss)


def _row(cfg, model, census, method="graph", frames=None):
    named = model.named_parameters().values()
    return TopologyRow(
        topology=cfg.topology,
        nodes=dict(census.nodes),
        bytes=dict(census.bytes),
        trainable_params=count_params(t for t in named if t.requires_grad),
        frozen_params=count_params(t for t in model.named_parameters().values() if not t.requires_grad),
        frames=frames or cfg.frames,
        method=method,
    )


def audit_backward_memory(cfg, topologies=("side", "inbackbone", "full"), batch=1, seed=0, train=True,
                          label="audit"):
    """Retained-for-backward census per topology, measured on the real graph."""
    report = FlopMemReport(label, batch, dict(count_flops(cfg, batch)))
    for topo in topologies:
        c = cfg.replace(topology=topo)
        model = TDSModel(c, seed=seed)
        report.rows.append(_row(c, model, census_step(c, model, batch, seed, train)))
    return report


def _extrapolate(samples, target):
    """Affine-in-T extrapolation after checking the samples are exactly affine."""
    (t0, c0), (t1, c1), (t2, c2) = samples
    keys = set(c0) | set(c1) | set(c2)
    out = {}
    for k in keys:
        a, b_, c = c0.get(k, 0), c1.get(k, 0), c2.get(k, 0)
        if (b_ - a) * (t2 - t1) != (c - b_) * (t1 - t0):
            raise ArithmeticError(f"census for {k!r} is not affine in frames: {a}, {b_}, {c}")
        slope = (b_ - a) // (t1 - t0)
        out[k] = a + slope * (target - t0)
    return out


def audit_by_extrapolation(cfg, topologies=("side", "inbackbone", "full"), probe_frames=(2, 3, 4),
                           batch=1, seed=0, label="audit"):
    """Census at a large shape, measured on short clips and extended to ``cfg.frames``.

    Every retained array is either per-frame or frame-independent, so node
    and byte counts are affine in the number of frames; the three probes
    verify this before extending.
    """
    report = FlopMemReport(label, batch, dict(count_flops(cfg, batch)))
    for topo in topologies:
        base = cfg.replace(topology=topo)
        model = TDSModel(base, seed=seed)
        nodes, sizes = [], []
        for t in probe_frames:
            c = base.replace(frames=t)
            census = census_step(c, model, batch, seed)
            nodes.append((t, dict(census.nodes)))
            sizes.append((t, dict(census.bytes)))
        row = _row(base, model, graph_census(None), method=f"affine{tuple(probe_frames)}")
        row.nodes = _extrapolate(nodes, cfg.frames)
        row.bytes = _extrapolate(sizes, cfg.frames)
        report.rows.append(row)
        del model
    return report
