"""ℓ∞ projected gradient descent and black-box transfer through a stolen substitute."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError
from .models import Network, argmax_rows, one_hot


@dataclass
class PgdConfig:
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = 40
    clip_min: float = -1.0
    clip_max: float = 1.0
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.iterations < 0 or self.step_size < 0:
            raise DomainError("epsilon, step_size and iterations must be non-negative")
        if not self.clip_min < self.clip_max:
            raise DomainError("clip_min must be below clip_max")


def input_gradient(model: Network, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """∇ₓ of the summed cross-entropy against hard ``labels``."""
    xt = T.Tensor(x, requires_grad=True)
    with model.frozen():
        loss = T.softmax_cross_entropy(model(xt), one_hot(labels, model.class_count)) * len(x)
        loss.backward()
    return xt.grad


def pgd_attack(model: Network, x, true_labels, cfg: PgdConfig) -> np.ndarray:
    """Untargeted ℓ∞ PGD: ascend the loss by signed steps, projecting onto the ε-ball and the box."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if x.min(initial=cfg.clip_min) < cfg.clip_min or x.max(initial=cfg.clip_max) > cfg.clip_max:
        raise DomainError("inputs lie outside the clip box")
    lo = np.maximum(x - cfg.epsilon, cfg.clip_min)
    hi = np.minimum(x + cfg.epsilon, cfg.clip_max)
    adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        adv = np.clip(x + np.random.default_rng(cfg.seed).uniform(-cfg.epsilon, cfg.epsilon, x.shape), lo, hi)
    if cfg.epsilon == 0 or len(x) == 0:
        return adv
    for _ in range(cfg.iterations):
        adv = np.clip(adv + cfg.step_size * np.sign(input_gradient(model, adv, labels)), lo, hi)
    return adv


def success_rate_from_predictions(clean_pred, adv_pred, true_labels) -> float:
    """Fraction of originally-correct samples whose prediction changed away from the truth."""
    clean_pred, adv_pred, true_labels = map(np.asarray, (clean_pred, adv_pred, true_labels))
    correct = clean_pred == true_labels
    if not correct.any():
        return 0.0
    return float(np.mean(adv_pred[correct] != true_labels[correct]))


def attack_success_rate(model: Network, adv_x, true_labels, clean_x=None) -> float:
    """Untargeted success on ``model``; without ``clean_x`` every sample counts as originally correct."""
    labels = np.asarray(true_labels)
    adv_pred = model.predict(adv_x)
    clean_pred = labels if clean_x is None else model.predict(clean_x)
    return success_rate_from_predictions(clean_pred, adv_pred, labels)


@dataclass
class TransferReport:
    white_box_substitute: float
    black_box_victim: float
    white_box_victim: float | None
    epsilon: float
    samples: int
    queries: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def transfer_eval(substitute: Network, victim_oracle, test_set, cfg: PgdConfig,
                  victim: Network | None = None) -> TransferReport:
    """Craft examples on ``substitute`` and replay them against the victim through its oracle.

    Victim labels come from the argmax of the (possibly defended) oracle
    answers, so both clean and adversarial inputs are queried.  Passing
    ``victim`` adds the white-box victim column.
    """
    x, y = test_set.inputs, test_set.labels
    adv = pgd_attack(substitute, x, y, cfg)
    white_sub = attack_success_rate(substitute, adv, y, clean_x=x)
    before = getattr(victim_oracle, "query_count", 0)
    clean_v = argmax_rows(np.asarray(victim_oracle.query(x)))
    adv_v = argmax_rows(np.asarray(victim_oracle.query(adv)))
    black = success_rate_from_predictions(clean_v, adv_v, y)
    white_vic = None
    if victim is not None:
        adv_w = pgd_attack(victim, x, y, cfg)
        white_vic = attack_success_rate(victim, adv_w, y, clean_x=x)
    queries = getattr(victim_oracle, "query_count", before + 2 * len(x)) - before
    return TransferReport(white_sub, black, white_vic, cfg.epsilon, len(x), queries)
