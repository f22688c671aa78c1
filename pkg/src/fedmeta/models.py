"""Block-partitioned model construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ComputationGraph, Layer
from .errors import ShapeError
from .params import BlockPartition, ParameterSet


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int] = (1, 16, 16)
    conv_channels: tuple[int, int, int] = (8, 16, 32)
    kernel_size: int = 3
    dense_width: int = 64
    head_outputs: int = 1
    # Layer names (prefixes) placed in the representation block; everything
    # else is task block. None means "all conv layers".
    representation_layers: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.conv_channels) != 3 or any(c < 1 for c in self.conv_channels):
            raise ShapeError(f"need exactly 3 positive conv channel counts, got {self.conv_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.dense_width < 1:
            raise ShapeError("dense_width must be positive")
        if self.head_outputs != 1:
            raise ShapeError("only a single sigmoid output is supported")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (C, H, W), got {self.input_shape}")


def standard_layers() -> list[Layer]:
    layers = []
    for i in (1, 2, 3):
        layers += [Layer("conv", f"conv{i}"), Layer("relu"), Layer("maxpool2x2")]
    layers += [Layer("flatten"), Layer("dense", "fc1"), Layer("relu"),
               Layer("dense", "fc2"), Layer("sigmoid")]
    return layers


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    c, h, w = spec.input_shape
    k = spec.kernel_size
    shapes = {}
    in_c = c
    for i, out_c in enumerate(spec.conv_channels, start=1):
        shapes[f"conv{i}.weight"] = (out_c, in_c, k, k)
        shapes[f"conv{i}.bias"] = (out_c,)
        in_c = out_c
    flat = in_c * (h // 8) * (w // 8)
    shapes["fc1.weight"] = (flat, spec.dense_width)
    shapes["fc1.bias"] = (spec.dense_width,)
    shapes["fc2.weight"] = (spec.dense_width, spec.head_outputs)
    shapes["fc2.bias"] = (spec.head_outputs,)
    return shapes


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build_standard_cnn(spec: ModelSpec, seed: int) -> tuple[ComputationGraph, ParameterSet]:
    """conv-relu-pool x3, flatten, dense-relu, dense-sigmoid.

    Conv parameters form the representation block and dense parameters the
    task block, unless ``spec.representation_layers`` says otherwise.
    """
    _, h, w = spec.input_shape
    if h % 8 or w % 8:
        raise ShapeError(f"input spatial dims {h}x{w} must be divisible by 8")
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            entries[name] = np.zeros(shape, dtype=np.float32)
        else:
            entries[name] = glorot_uniform(rng, shape)
    rep_layers = spec.representation_layers or ("conv1", "conv2", "conv3")
    rep = tuple(k for k in entries if k.split(".")[0] in rep_layers)
    task = tuple(k for k in entries if k not in rep)
    partition = BlockPartition(rep, task)
    return ComputationGraph(standard_layers(), spec.input_shape), ParameterSet(entries, partition)
