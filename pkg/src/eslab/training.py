"""Mini-batch training loops shared by victim training and distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .errors import TrainingError
from .models import Network, one_hot
from .tensor import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dataset_loss(net: Network, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 4096) -> float:
    """Mean soft-target cross-entropy of ``net`` over a whole set, without recording a graph."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            xb = inputs[start : start + batch_size]
            tb = targets[start : start + batch_size]
            total += T.softmax_cross_entropy(net(xb), tb).item() * len(xb)
    return total / len(inputs)


def fit_soft(net: Network, inputs: np.ndarray, targets: np.ndarray, epochs: int, lr: float,
             batch_size: int = 64, rng=0, state: AdamState | None = None) -> AdamState:
    """Minimise mean cross-entropy to ``targets`` with Adam over shuffled mini-batches."""
    rng = as_rng(rng)
    state = state if state is not None else AdamState(lr=lr)
    state.lr = lr
    params = net.parameters()
    n = len(inputs)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = T.softmax_cross_entropy(net(inputs[idx]), targets[idx])
            if not np.isfinite(loss.data).all():
                raise TrainingError("non-finite loss during training")
            loss.backward()
            adam_step(state, params)
    return state


def accuracy(net: Network, ds: LabeledDataset) -> float:
    return float((net.predict(ds.inputs) == ds.labels).mean())


@dataclass
class VictimReport:
    best_epoch: int
    test_accuracy: float
    train_accuracy: float
    history: list[float]


def train_classifier(net: Network, train: LabeledDataset, test: LabeledDataset, epochs: int,
                     lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> VictimReport:
    """Train on hard labels, keeping the parameters with the best test accuracy."""
    rng = as_rng([seed, 11])
    targets = one_hot(train.labels, train.class_count)
    state = AdamState(lr=lr)
    best_acc, best_epoch, best_state = -1.0, 0, net.state()
    history = []
    for epoch in range(1, epochs + 1):
        fit_soft(net, train.inputs, targets, 1, lr, batch_size, rng, state)
        acc = accuracy(net, test)
        history.append(acc)
        log.debug("victim epoch %d test accuracy %.4f", epoch, acc)
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, net.state()
    net.load_state(best_state)
    return VictimReport(best_epoch, best_acc, accuracy(net, train), history)
