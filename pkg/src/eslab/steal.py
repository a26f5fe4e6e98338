"""The ES Attack loop and the random / auxiliary data baselines.

Each stealing epoch ``t`` queries the oracle on the previous synthetic set,
distils the answers into the substitute (E-step), then synthesises the next
set from the updated substitute (S-step).  Only E-steps touch the oracle, so
a run of ``N`` epochs with ``S`` samples costs exactly ``N * S`` queries.
Augmented copies inherit the label of the sample they came from.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledDataset, SoftDataset
from .errors import BudgetExhaustedError, DomainError, TrainingError
from .models import Network
from .oracle import fillup_topk
from .synthesis import DnnSynthesizer, SynthesisConfig, augment, opt_syn_epoch
from .tensor import AdamState
from .training import accuracy, dataset_loss, fit_soft

log = logging.getLogger(__name__)


@dataclass
class StealConfig:
    epochs: int = 50  # N, stealing epochs
    train_epochs: int = 10  # M, distillation epochs per stealing epoch
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    kd_lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    augment: bool = True
    replay_all: bool = False
    topk_fillup: int | None = None
    record_queries: bool = False

    def __post_init__(self):
        if isinstance(self.synthesis, dict):
            self.synthesis = SynthesisConfig(**self.synthesis)
        if self.epochs < 1 or self.train_epochs < 0:
            raise DomainError("need epochs >= 1 and train_epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    kd_loss: float
    accuracy: float | None
    queries: int
    seconds: float


@dataclass
class StealTrace:
    records: list[EpochRecord] = field(default_factory=list)
    best_accuracy: float | None = None
    best_epoch: int | None = None
    best_state: dict | None = None
    error: str | None = None
    initial_synthetic: np.ndarray | None = None
    final_synthetic: np.ndarray | None = None
    query_inputs: list[np.ndarray] = field(default_factory=list)
    query_outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def last_accuracy(self) -> float | None:
        return self.records[-1].accuracy if self.records else None

    @property
    def queries(self) -> int:
        return self.records[-1].queries if self.records else 0

    def summary(self) -> dict:
        return {
            "epochs_completed": len(self.records),
            "best_accuracy": self.best_accuracy,
            "best_epoch": self.best_epoch,
            "last_accuracy": self.last_accuracy,
            "queries": self.queries,
            "error": self.error,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "kd_loss", "accuracy", "queries", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.kd_loss), "" if r.accuracy is None else repr(r.accuracy),
                                 r.queries, f"{r.seconds:.3f}"])

    def write_json(self, path) -> None:
        body = dict(self.summary(), records=[asdict(r) for r in self.records])
        with open(path, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)


def prepare_targets(y: np.ndarray, topk_fillup: int | None = None) -> np.ndarray:
    """Turn oracle answers into training targets on the simplex.

    Top-K answers are filled up when the adversary knows K; rounded answers
    are clipped at zero and renormalised; an all-zero row becomes uniform.
    """
    y = np.asarray(y, dtype=np.float64)
    if topk_fillup is not None:
        y = fillup_topk(np.clip(y, 0.0, None), topk_fillup)
    y = np.clip(y, 0.0, None)
    sums = y.sum(axis=1, keepdims=True)
    uniform = np.full_like(y, 1.0 / y.shape[1])
    return np.where(sums > 0, y / np.where(sums > 0, sums, 1.0), uniform)


def e_step(f_s: Network, d_syn: SoftDataset, train_epochs: int, lr: float, batch_size: int = 64,
           rng=0, state: AdamState | None = None) -> tuple[float, float, AdamState]:
    """Distil the labelled synthetic set into ``f_s``; returns (initial KD loss, final KD loss, optimizer state)."""
    if d_syn.soft_labels is None:
        raise DomainError("e_step needs oracle labels on the synthetic set")
    before = dataset_loss(f_s, d_syn.inputs, d_syn.soft_labels)
    if not np.isfinite(before):
        raise TrainingError("non-finite KD loss before the E-step")
    state = fit_soft(f_s, d_syn.inputs, d_syn.soft_labels, train_epochs, lr, batch_size, rng, state)
    after = dataset_loss(f_s, d_syn.inputs, d_syn.soft_labels)
    if not np.isfinite(after):
        raise TrainingError("non-finite KD loss after the E-step")
    return before, after, state


def s_step(f_s: Network, config: SynthesisConfig, seed: int, epoch_tag: int = 0,
           synthesizer: DnnSynthesizer | None = None) -> SoftDataset:
    """Synthesise the next query set (inputs only)."""
    count = config.samples_per_epoch
    if config.mode == "opt_syn":
        return opt_syn_epoch(f_s, count, config.opt_iterations, config.synth_lr, seed, epoch_tag)
    if config.mode == "dnn_syn":
        if synthesizer is None:
            synthesizer = DnnSynthesizer(config, f_s.class_count, f_s.input_shape, seed)
        from .synthesis import dnn_syn_epoch

        return dnn_syn_epoch(synthesizer, f_s, count, seed, epoch_tag)
    rng = np.random.default_rng([seed, 6])
    return SoftDataset(rng.standard_normal((count,) + f_s.input_shape), epoch_tag=epoch_tag, name="random")


def _training_set(inputs: np.ndarray, targets: np.ndarray, use_augment: bool, rng) -> tuple[np.ndarray, np.ndarray]:
    if not use_augment:
        return inputs, targets
    extra = augment(inputs, rng)
    return np.concatenate([inputs, extra]), np.concatenate([targets, targets])


def _epoch_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t, 17]).generate_state(1)[0])


def run_es_attack(oracle, f_s: Network, config: StealConfig,
                  test_set: LabeledDataset | None = None) -> tuple[Network, StealTrace]:
    """Run ``config.epochs`` E/S iterations against ``oracle`` starting from a fresh ``f_s``.

    If the budget runs out mid-run the partial substitute is returned and
    ``trace.error`` is set to ``"budget_exhausted"``.
    """
    syn = config.synthesis
    rng = np.random.default_rng([config.seed, 21])
    d_prev = SoftDataset(rng.standard_normal((syn.samples_per_epoch,) + f_s.input_shape), epoch_tag=0, name="random")
    trace = StealTrace(initial_synthetic=d_prev.inputs.copy())
    synthesizer = None
    if syn.mode == "dnn_syn":
        synthesizer = DnnSynthesizer(syn, f_s.class_count, f_s.input_shape, config.seed)
    state = AdamState(lr=config.kd_lr)
    history_x: list[np.ndarray] = []
    history_y: list[np.ndarray] = []
    start = time.perf_counter()
    for t in range(1, config.epochs + 1):
        try:
            answers = oracle.query(d_prev.inputs)
        except BudgetExhaustedError:
            log.warning("budget exhausted at stealing epoch %d", t)
            trace.error = "budget_exhausted"
            break
        if config.record_queries:
            trace.query_inputs.append(d_prev.inputs.reshape(len(d_prev), -1).copy())
            trace.query_outputs.append(np.asarray(answers).copy())
        targets = prepare_targets(answers, config.topk_fillup)
        x_train, y_train = _training_set(d_prev.inputs, targets, config.augment, np.random.default_rng([config.seed, t, 3]))
        if config.replay_all:
            history_x.append(x_train)
            history_y.append(y_train)
            x_train, y_train = np.concatenate(history_x), np.concatenate(history_y)
        labelled = SoftDataset(x_train, y_train, epoch_tag=t - 1)
        _, kd_loss, state = e_step(f_s, labelled, config.train_epochs, config.kd_lr, config.batch_size,
                                   np.random.default_rng([config.seed, t, 4]), state)
        acc = accuracy(f_s, test_set) if test_set is not None else None
        trace.records.append(EpochRecord(t, kd_loss, acc, oracle.query_count, time.perf_counter() - start))
        if acc is not None and (trace.best_accuracy is None or acc > trace.best_accuracy):
            trace.best_accuracy, trace.best_epoch, trace.best_state = acc, t, f_s.state()
        log.info("epoch %d kd_loss %.4f acc %s queries %d", t, kd_loss, acc, oracle.query_count)
        d_prev = s_step(f_s, syn, _epoch_seed(config.seed, t), t, synthesizer)
    trace.final_synthetic = d_prev.inputs.copy()
    return f_s, trace


def baseline_steal(oracle, f_s: Network, source: str, epochs: int, lr: float = 1e-3, *,
                   n_queries: int | None = None, auxiliary: LabeledDataset | None = None,
                   batch_size: int = 64, seed: int = 0, use_augment: bool = True,
                   test_set: LabeledDataset | None = None) -> tuple[Network, StealTrace]:
    """Label one fixed query set once, then distil for ``epochs`` passes.

    ``source="random"`` draws ``n_queries`` N(0, 1) inputs; ``source="auxiliary"``
    queries the inputs of ``auxiliary`` (optionally truncated to ``n_queries``).
    """
    rng = np.random.default_rng([seed, 31])
    if source == "random":
        if n_queries is None:
            raise DomainError("random baseline needs n_queries")
        inputs = rng.standard_normal((n_queries,) + f_s.input_shape)
    elif source == "auxiliary":
        if auxiliary is None:
            raise DomainError("auxiliary baseline needs an auxiliary dataset")
        inputs = auxiliary.inputs if n_queries is None else auxiliary.inputs[:n_queries]
    else:
        raise DomainError(f"unknown baseline source {source!r}")
    trace = StealTrace(initial_synthetic=inputs.copy(), final_synthetic=inputs.copy())
    try:
        answers = oracle.query(inputs)
    except BudgetExhaustedError:
        trace.error = "budget_exhausted"
        return f_s, trace
    targets = prepare_targets(answers)
    state = AdamState(lr=lr)
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        x_train, y_train = _training_set(inputs, targets, use_augment, np.random.default_rng([seed, epoch, 3]))
        state = fit_soft(f_s, x_train, y_train, 1, lr, batch_size, np.random.default_rng([seed, epoch, 4]), state)
        kd_loss = dataset_loss(f_s, inputs, targets)
        acc = accuracy(f_s, test_set) if test_set is not None else None
        trace.records.append(EpochRecord(epoch, kd_loss, acc, oracle.query_count, time.perf_counter() - start))
        if acc is not None and (trace.best_accuracy is None or acc > trace.best_accuracy):
            trace.best_accuracy, trace.best_epoch, trace.best_state = acc, epoch, f_s.state()
    return f_s, trace
