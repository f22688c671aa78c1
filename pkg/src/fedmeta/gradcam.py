"""Grad-CAM over the last convolutional layer, plus a PGM renderer."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ComputationGraph
from .errors import StateError, StructureError


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray
    normalized: bool
    source_sample_id: int = 0


def _target_layer(graph: ComputationGraph) -> int:
    idx = graph.last_conv_index()
    if idx is None:
        raise StructureError("graph has no convolutional layer")
    # Use the rectified activation when the conv is followed by a relu.
    if idx + 1 < len(graph.layers) and graph.layers[idx + 1].kind == "relu":
        return idx + 1
    return idx


def grad_cam(graph: ComputationGraph, params: Mapping[str, np.ndarray], sample: np.ndarray,
             sample_id: int = 0, normalize: bool = True) -> SaliencyMap:
    """relu(sum_k alpha_k A_k) with alpha_k the spatial mean of d(logit)/dA_k.

    The target is the pre-sigmoid output, so positive rescaling of the last
    dense layer rescales the raw map by the same factor.
    """
    target = _target_layer(graph)
    g = graph.copy()
    x = np.asarray(sample)
    if x.ndim == len(graph.input_shape):
        x = x[None]
    if x.shape[0] != 1:
        raise StateError("grad_cam takes a single sample")
    g.run(params, x)
    g.backward(root=g.logit)
    node = g.layer_outputs[target]
    acts = node.value[0].astype(np.float64)
    grads = node.grad[0].astype(np.float64)
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    if normalize:
        peak = cam.max()
        if peak > 0:
            cam = cam / peak
    return SaliencyMap(cam, normalize, sample_id)


def render_pgm(smap: SaliencyMap, upscale_to: tuple[int, int]) -> bytes:
    """Binary P5 greyscale image, nearest-neighbour upscaled, value round(255 * entry)."""
    if not smap.normalized:
        raise StateError("render_pgm needs a normalized map")
    height, width = upscale_to
    h, w = smap.grid.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    big = smap.grid[np.ix_(rows, cols)]
    pixels = np.floor(np.clip(big, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(smap: SaliencyMap, path, upscale_to: tuple[int, int]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(render_pgm(smap, upscale_to))
