"""Minibatch training loops shared by centralized baselines and FL nodes."""

from __future__ import annotations

import numpy as np

from .autodiff import ComputationGraph
from .optim import SgdConfig, sgd_step
from .params import ParameterSet


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for one epoch; depends only on (seed, epoch, n)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(graph: ComputationGraph, params: ParameterSet, images: np.ndarray,
                labels: np.ndarray, cfg: SgdConfig, epoch: int, seed: int,
                batch_size: int = 32) -> tuple[ParameterSet, float]:
    """One pass of minibatch SGD. Returns updated params and the sample-weighted mean loss."""
    n = len(labels)
    perm = batch_order(seed, epoch, n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        graph.forward(params, images[idx])
        loss = graph.loss(labels[idx])
        grads = graph.backward(loss)
        params = sgd_step(params, grads, cfg, epoch)
        total += float(loss.value[0]) * len(idx)
    return params, total / n


def train_centralized(graph: ComputationGraph, params: ParameterSet, images: np.ndarray,
                      labels: np.ndarray, cfg: SgdConfig, seed: int, epochs: int | None = None,
                      batch_size: int = 32) -> tuple[ParameterSet, list[float]]:
    epochs = cfg.total_epochs if epochs is None else epochs
    losses = []
    for epoch in range(epochs):
        params, loss = train_epoch(graph, params, images, labels, cfg, epoch, seed, batch_size)
        losses.append(loss)
    return params, losses


def predict(graph: ComputationGraph, params: ParameterSet, images: np.ndarray,
            batch_size: int = 512) -> np.ndarray:
    out = [graph.forward(params, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=graph.dtype)
