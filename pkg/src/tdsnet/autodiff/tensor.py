"""Dense float64 tensor with a reverse-mode graph.

Graph nodes reference their parent *nodes*, never parent tensors, so the only
activation memory a graph keeps alive is what each node explicitly saved for
its backward.  That makes :func:`graph_census` an exact account of retained
bytes.
"""
from __future__ import annotations

import contextlib
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input shapes are illegal for a primitive."""


class UnknownPrimitiveError(KeyError):
    pass


class GradientError(RuntimeError):
    pass


_state = {"grad": True, "tags": ["side"], "flops": None}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


@contextlib.contextmanager
def branch(tag):
    """Attribute nodes (and counted FLOPs) created inside to ``tag``."""
    _state["tags"].append(tag)
    try:
        yield
    finally:
        _state["tags"].pop()


def current_branch():
    return _state["tags"][-1]


@contextlib.contextmanager
def flop_counter():
    """Collect multiply-add FLOPs reported by primitives, keyed by branch."""
    prev = _state["flops"]
    counts = Counter()
    _state["flops"] = counts
    try:
        yield counts
    finally:
        _state["flops"] = prev


def add_flops(n):
    counts = _state["flops"]
    if counts is not None:
        counts[current_branch()] += int(n)


class Tensor:
    """N-d float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "node", "is_param", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, *, name=None, param=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and min(arr.shape) == 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.is_param = param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __neg__(self):
        return _ops().scale(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)


def parameter(data, requires_grad=True, name=None):
    """Owned copy of ``data`` flagged as a model parameter."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name, param=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _ops():
    from . import ops

    return ops


class LeafNode:
    """Gradient sink for a trainable leaf tensor."""

    __slots__ = ("tensor", "tag")

    def __init__(self, tensor):
        self.tensor = tensor
        self.tag = "leaf"


def leaf_node(t):
    if t.node is None:
        t.node = LeafNode(t)
    return t.node


class Node:
    """One recorded primitive application.

    ``saved`` holds exactly what the backward needs.  Entries are either raw
    arrays (activations; counted by the census) or parameter tensors (already
    resident; not counted).
    """

    __slots__ = ("fn", "parents", "needs", "saved", "attrs", "tag")

    def __init__(self, fn, inputs):
        self.fn = fn
        self.needs = tuple(t.requires_grad for t in inputs)
        self.parents = tuple(
            (leaf_node(t) if t.node is None else t.node) if t.requires_grad else None
            for t in inputs
        )
        self.saved = ()
        self.attrs = {}
        self.tag = current_branch()

    def save(self, *items):
        self.saved = tuple(items)

    def retained(self):
        """Yield the activation arrays this node keeps alive."""
        for item in self.saved:
            if isinstance(item, np.ndarray):
                yield item


class _NullCtx:
    """Stand-in context when nothing needs a gradient; discards saves."""

    __slots__ = ("needs", "attrs")

    def __init__(self, n):
        self.needs = (False,) * n
        self.attrs = {}

    def save(self, *items):
        pass


def saved_array(t):
    """What a node should keep for tensor ``t``: params by reference."""
    return t if t.is_param else t.data


def unpack(item):
    return item.data if isinstance(item, Tensor) else item


class Function:
    """Base for primitives; subclasses define ``forward`` and ``backward``.

    ``forward(ctx, *tensors, **attrs)`` returns an ndarray and may call
    ``ctx.save``; ``backward(ctx, grad)`` returns one gradient (or None) per
    input.
    """

    name = "?"

    @classmethod
    def apply(cls, *inputs, **attrs):
        inputs = tuple(as_tensor(t) for t in inputs)
        track = _state["grad"] and any(t.requires_grad for t in inputs)
        ctx = Node(cls, inputs) if track else _NullCtx(len(inputs))
        out = cls.forward(ctx, *inputs, **attrs)
        result = Tensor(out, requires_grad=track)
        if track:
            result.node = ctx
        return result

    @staticmethod
    def forward(ctx, *inputs, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


class GradientMap(dict):
    """Trainable tensor -> gradient array.

    ``visited`` counts backward-traversed nodes per branch tag; ``detached``
    is set when the loss was not connected to any trainable tensor.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.visited = Counter()
        self.detached = False

    def by_name(self):
        return {t.name: g for t, g in self.items()}


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if isinstance(node, Node):
            for p in node.parents:
                if p is not None and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode pass from a scalar ``loss``; returns a :class:`GradientMap`."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradientMap()
    if not loss.requires_grad:
        warnings.warn("loss is detached from every trainable tensor", RuntimeWarning)
        grads.detached = True
        return grads
    root = loss.node if loss.node is not None else leaf_node(loss)
    order = _topo_order(root)
    pending = {id(root): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        grads.visited[node.tag] += 1
        if g is None:
            continue
        if isinstance(node, LeafNode):
            t = node.tensor
            if t in grads:
                grads[t] = grads[t] + g
            else:
                grads[t] = g
            continue
        in_grads = node.fn.backward(node, g)
        for parent, pg in zip(node.parents, in_grads):
            if parent is None or pg is None:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return grads


@dataclass
class Census:
    nodes: Counter = field(default_factory=Counter)
    bytes: Counter = field(default_factory=Counter)

    @property
    def total_nodes(self):
        return sum(self.nodes.values())

    @property
    def total_bytes(self):
        return sum(self.bytes.values())


def graph_census(root):
    """Count recorded nodes and retained activation bytes reachable from ``root``.

    An array saved by several nodes is counted once, against whichever of
    those nodes the traversal reaches first.
    """
    census = Census()
    if not isinstance(root, Tensor) or root.node is None or not isinstance(root.node, Node):
        return census
    order = _topo_order(root.node)
    seen = set()
    for node in order:
        if not isinstance(node, Node):
            continue
        census.nodes[node.tag] += 1
        for arr in node.retained():
            if id(arr) in seen:
                continue
            seen.add(id(arr))
            census.bytes[node.tag] += arr.nbytes
    return census
