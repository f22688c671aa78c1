"""Tape-based reverse-mode autodiff for a fixed set of CNN layers.

A ``ComputationGraph`` is a static layer list. Every call to ``forward``
records a fresh tape of ``Node`` objects; ``backward`` walks that tape in
reverse. Activations are NCHW arrays of the graph's dtype (float32 by
default, float64 for gradient checking).
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DomainError, ShapeError, StateError

OP_KINDS = ("input", "conv2d", "maxpool2x2", "relu", "dense", "sigmoid",
            "bce-loss", "add-bias", "flatten")
LAYER_KINDS = ("conv", "relu", "maxpool2x2", "flatten", "dense", "sigmoid")

SCORE_CLAMP = 1e-7


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "name", "trainable", "ctx")

    def __init__(self, op, inputs=(), value=None, name=None, trainable=False, ctx=None):
        assert op in OP_KINDS, op
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.name = name
        self.trainable = trainable
        self.ctx = ctx

    def __repr__(self):
        shape = None if self.value is None else tuple(np.shape(self.value))
        return f"Node({self.op}, name={self.name}, shape={shape})"


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and not self.name:
            raise ValueError(f"{self.kind} layer needs a name")

    @property
    def param_names(self) -> tuple[str, ...]:
        if self.kind in ("conv", "dense"):
            return (f"{self.name}.weight", f"{self.name}.bias")
        return ()


# -- primitive kernels -------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d_forward(x: np.ndarray, weight: np.ndarray):
    """Stride-1 same-padded convolution (cross-correlation), no bias."""
    n, _, h, w = x.shape
    out_c, _, k, _ = weight.shape
    cols = _im2col(x, k)
    out = cols @ weight.reshape(out_c, -1).T
    out = np.ascontiguousarray(out.reshape(n, h, w, out_c).transpose(0, 3, 1, 2))
    return out, cols


def conv2d_backward(g: np.ndarray, x_shape, weight: np.ndarray, cols: np.ndarray):
    n, c, h, w = x_shape
    out_c, _, k, _ = weight.shape
    p = k // 2
    gm = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
    dweight = (gm.T @ cols).reshape(weight.shape)
    dcols = (gm @ weight.reshape(out_c, -1)).reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(dx), dweight


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2x2_backward(g: np.ndarray, x_shape, arg: np.ndarray):
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, h, w)


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise DomainError("bce_loss of an empty batch")
    if s.shape != y.shape:
        raise ShapeError(f"scores length {s.size} != labels length {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    s = np.clip(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(np.mean(-(y * np.log(s) + (1.0 - y) * np.log1p(-s))))


# -- graph -------------------------------------------------------------------

class ComputationGraph:
    """A sequential network over a fixed input shape (excluding batch dim)."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], dtype=np.float32):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.tape: list[Node] | None = None
        self.param_nodes: dict[str, Node] = {}
        self.layer_outputs: list[Node] = []
        self.output: Node | None = None

    def copy(self, dtype=None) -> "ComputationGraph":
        """Fresh graph with the same architecture and an empty tape."""
        return ComputationGraph(self.layers, self.input_shape, dtype or self.dtype)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(n for layer in self.layers for n in layer.param_names)

    def last_conv_index(self) -> int | None:
        idx = [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]
        return idx[-1] if idx else None

    # forward -----------------------------------------------------------------

    def _param(self, params: Mapping[str, np.ndarray], name: str, layer: Layer) -> Node:
        if name not in params:
            raise ShapeError(f"layer {layer.name}: missing parameter {name!r}")
        node = Node("input", value=np.asarray(params[name]).astype(self.dtype, copy=False),
                    name=name, trainable=True)
        self.param_nodes[name] = node
        self.tape.append(node)
        return node

    def _push(self, op, inputs, value, ctx=None) -> Node:
        node = Node(op, inputs, value, ctx=ctx)
        self.tape.append(node)
        return node

    def _apply(self, layer: Layer, x: Node, params) -> Node:
        v = x.value
        if layer.kind == "conv":
            w = self._param(params, f"{layer.name}.weight", layer)
            b = self._param(params, f"{layer.name}.bias", layer)
            if v.ndim != 4:
                raise ShapeError(f"layer {layer.name}: expected NCHW input, got {v.shape}")
            ws = w.value.shape
            if len(ws) != 4 or ws[1] != v.shape[1] or ws[2] != ws[3] or ws[2] % 2 == 0:
                raise ShapeError(f"layer {layer.name}: weight dims {ws} incompatible "
                                 f"with input channels {v.shape[1]}")
            if b.value.shape != (ws[0],):
                raise ShapeError(f"layer {layer.name}: bias dims {b.value.shape} != ({ws[0]},)")
            out, cols = conv2d_forward(v, w.value)
            conv = self._push("conv2d", (x, w), out, ctx=cols)
            return self._push("add-bias", (conv, b), out + b.value[None, :, None, None])
        if layer.kind == "dense":
            w = self._param(params, f"{layer.name}.weight", layer)
            b = self._param(params, f"{layer.name}.bias", layer)
            ws = w.value.shape
            if v.ndim != 2 or len(ws) != 2 or ws[0] != v.shape[1]:
                raise ShapeError(f"layer {layer.name}: weight dims {ws} incompatible "
                                 f"with input dims {v.shape}")
            if b.value.shape != (ws[1],):
                raise ShapeError(f"layer {layer.name}: bias dims {b.value.shape} != ({ws[1]},)")
            out = v @ w.value
            dense = self._push("dense", (x, w), out)
            return self._push("add-bias", (dense, b), out + b.value)
        if layer.kind == "relu":
            return self._push("relu", (x,), np.maximum(v, 0))
        if layer.kind == "maxpool2x2":
            if v.ndim != 4 or v.shape[2] % 2 or v.shape[3] % 2:
                raise ShapeError(f"maxpool2x2 needs even spatial dims, got {v.shape}")
            out, arg = maxpool2x2_forward(v)
            return self._push("maxpool2x2", (x,), out, ctx=arg)
        if layer.kind == "flatten":
            return self._push("flatten", (x,), v.reshape(v.shape[0], -1))
        if layer.kind == "sigmoid":
            return self._push("sigmoid", (x,), expit(v).astype(self.dtype, copy=False))
        raise AssertionError(layer.kind)

    def run(self, params: Mapping[str, np.ndarray], x: np.ndarray, start: int = 0) -> Node:
        """Record a tape from layer ``start`` onward; ``x`` is that layer's input."""
        x = np.asarray(x, dtype=self.dtype)
        if start == 0 and x.shape[1:] != self.input_shape:
            raise ShapeError(f"input: batch dims {x.shape} do not match "
                             f"N x {'x'.join(map(str, self.input_shape))}")
        self.tape = []
        self.param_nodes = {}
        self.layer_outputs = []
        node = self._push("input", (), x)
        for layer in self.layers[start:]:
            node = self._apply(layer, node, params)
            self.layer_outputs.append(node)
        self.output = node
        return node

    def forward(self, params: Mapping[str, np.ndarray], batch: np.ndarray) -> np.ndarray:
        """Per-sample scores (sigmoid outputs when the last layer is a sigmoid)."""
        out = self.run(params, batch)
        return out.value.reshape(out.value.shape[0], -1)[:, 0]

    @property
    def logit(self) -> Node:
        """The pre-sigmoid output node."""
        if self.output is None:
            raise StateError("forward has not been run")
        if self.output.op == "sigmoid":
            return self.output.inputs[0]
        return self.output

    def loss(self, labels) -> Node:
        """Append a BCE node on the current output."""
        if self.output is None:
            raise StateError("forward has not been run")
        scores = self.output.value.reshape(-1)
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if y.shape != scores.shape:
            raise ShapeError(f"bce-loss: {y.size} labels for {scores.size} scores")
        value = np.array([bce_loss(scores, y)])
        return self._push("bce-loss", (self.output,), value, ctx=y)

    # backward ----------------------------------------------------------------

    def backward(self, root: Node | None = None, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Propagate from ``root`` (default: last tape node) and return parameter grads.

        Every trainable parameter of the current tape gets an entry; those the
        root does not depend on get exact zeros.
        """
        if not self.tape:
            raise StateError("backward called before forward")
        root = root if root is not None else self.tape[-1]
        for node in self.tape:
            node.grad = None
        if seed is None:
            seed = np.ones_like(root.value)
        root.grad = np.asarray(seed, dtype=root.value.dtype).reshape(root.value.shape)
        stop = self.tape.index(root)
        for node in reversed(self.tape[:stop + 1]):
            if node.grad is None or not node.inputs:
                continue
            for inp, g in zip(node.inputs, _BACKWARD[node.op](node, node.grad)):
                if g is None:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
        grads = {}
        for name, node in self.param_nodes.items():
            g = node.grad if node.grad is not None else np.zeros_like(node.value)
            grads[name] = g.astype(self.dtype, copy=False)
        for node in self.tape:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
        return grads


def _bw_conv2d(node, g):
    x, w = node.inputs
    dx, dw = conv2d_backward(g, x.value.shape, w.value, node.ctx)
    return dx, dw


def _bw_add_bias(node, g):
    axes = (0, 2, 3) if g.ndim == 4 else (0,)
    return g, g.sum(axis=axes, dtype=np.float64).astype(g.dtype)


def _bw_dense(node, g):
    x, w = node.inputs
    return g @ w.value.T, x.value.T @ g


def _bw_relu(node, g):
    return (g * (node.inputs[0].value > 0),)


def _bw_maxpool(node, g):
    return (maxpool2x2_backward(g, node.inputs[0].value.shape, node.ctx),)


def _bw_flatten(node, g):
    return (g.reshape(node.inputs[0].value.shape),)


def _bw_sigmoid(node, g):
    s = node.value
    return (g * s * (1 - s),)


def _bw_bce(node, g):
    scores_node = node.inputs[0]
    s = scores_node.value.reshape(-1).astype(np.float64)
    y = node.ctx
    clamped = (s < SCORE_CLAMP) | (s > 1.0 - SCORE_CLAMP)
    sc = np.clip(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    ds = np.where(clamped, 0.0, (sc - y) / (sc * (1.0 - sc))) / s.size
    ds = ds * float(np.asarray(g).reshape(-1)[0])
    return (ds.reshape(scores_node.value.shape).astype(scores_node.value.dtype),)


_BACKWARD = {
    "conv2d": _bw_conv2d,
    "add-bias": _bw_add_bias,
    "dense": _bw_dense,
    "relu": _bw_relu,
    "maxpool2x2": _bw_maxpool,
    "flatten": _bw_flatten,
    "sigmoid": _bw_sigmoid,
    "bce-loss": _bw_bce,
}
