"""Config-driven building blocks shared by the CLI and end-to-end checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import AttackConfig, DatasetConfig, ExperimentConfig, OracleConfig, VictimConfig
from .data import LabeledDataset, gen_blobs, gen_digits_like, load_dataset, make_auxiliary, split
from .errors import ConfigError
from .models import Network, build_model, load_checkpoint
from .oracle import DefenseConfig, OracleSession
from .steal import StealConfig, StealTrace, baseline_steal, run_es_attack
from .synthesis import SynthesisConfig
from .training import VictimReport, train_classifier

log = logging.getLogger(__name__)


def build_dataset(cfg: DatasetConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) for the configured task; test size is ``cfg.test_samples``."""
    if cfg.kind == "blobs":
        ds = gen_blobs(cfg.classes, cfg.dim, cfg.samples, cfg.spread, cfg.seed,
                       center_scale=cfg.center_scale, offset=cfg.offset)
    elif cfg.kind == "digits":
        ds = gen_digits_like(cfg.samples, cfg.seed)
    else:
        if not cfg.path:
            raise ConfigError("dataset.kind 'file' needs dataset.path")
        ds = load_dataset(cfg.path)
        if not isinstance(ds, LabeledDataset):
            raise ConfigError(f"{cfg.path} holds a soft-labelled set, not a labelled dataset")
    return split(ds, cfg.test_samples, cfg.seed)


def train_victim(cfg: VictimConfig, train: LabeledDataset, test: LabeledDataset) -> tuple[Network, VictimReport]:
    net = build_model(cfg.arch, train.input_shape, train.class_count, seed=cfg.seed)
    report = train_classifier(net, train, test, cfg.epochs, cfg.lr, cfg.batch_size, seed=cfg.seed)
    return net, report


def defense_config(cfg: OracleConfig) -> DefenseConfig:
    return DefenseConfig(cfg.rounding_decimals, cfg.topk, cfg.detection, cfg.detection_threshold)


def make_session(victim: Network, cfg: OracleConfig, record: bool = False) -> OracleSession:
    return OracleSession(victim, defense_config(cfg), budget=cfg.budget, price_per_1k=cfg.price_per_1k,
                         record=record)


def steal_config(cfg: AttackConfig, topk: int | None = None, record_queries: bool = False) -> StealConfig:
    mode = {"opt-syn": "opt_syn", "dnn-syn": "dnn_syn"}.get(cfg.mode, "random")
    syn = SynthesisConfig(
        samples_per_epoch=cfg.samples_per_epoch,
        opt_iterations=cfg.opt_iterations,
        synth_lr=cfg.synth_lr,
        lambda_ms=cfg.lambda_ms,
        mode=mode,
        latent_dim=cfg.latent_dim,
        generator_hidden=cfg.generator_hidden,
        generator_lr=cfg.generator_lr,
    )
    return StealConfig(
        epochs=cfg.stealing_epochs,
        train_epochs=cfg.train_epochs,
        synthesis=syn,
        kd_lr=cfg.kd_lr,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        augment=cfg.augment,
        replay_all=cfg.replay_all,
        topk_fillup=topk if cfg.topk_fillup else None,
        record_queries=record_queries,
    )


def baseline_epochs(cfg: AttackConfig) -> int:
    """Distillation passes for the one-shot baselines: N·M by default, matching the ES total."""
    return cfg.baseline_epochs or cfg.stealing_epochs * max(cfg.train_epochs, 1)


def baseline_queries(cfg: AttackConfig) -> int:
    """Query count for the one-shot baselines: N·S by default, matching the ES total."""
    return cfg.baseline_queries or cfg.stealing_epochs * cfg.samples_per_epoch


@dataclass
class StealOutcome:
    substitute: Network
    trace: StealTrace
    mode: str


def fresh_substitute(cfg: AttackConfig, input_shape, class_count: int) -> Network:
    if cfg.resume:
        return load_checkpoint(cfg.resume)
    return build_model(cfg.substitute_arch, input_shape, class_count, seed=cfg.seed + 1000)


def run_attack(oracle, cfg: ExperimentConfig, test: LabeledDataset | None = None,
               train: LabeledDataset | None = None, input_shape=None, class_count: int | None = None,
               record_queries: bool = False) -> StealOutcome:
    """Run the configured attack (or baseline) against ``oracle``."""
    a = cfg.attack
    input_shape = oracle.input_shape if input_shape is None else input_shape
    class_count = oracle.class_count if class_count is None else class_count
    f_s = fresh_substitute(a, tuple(input_shape), class_count)
    if a.mode in ("opt-syn", "dnn-syn"):
        sc = steal_config(a, cfg.oracle.topk, record_queries)
        f_s, trace = run_es_attack(oracle, f_s, sc, test)
    elif a.mode == "random":
        f_s, trace = baseline_steal(oracle, f_s, "random", baseline_epochs(a), a.kd_lr,
                                    n_queries=baseline_queries(a), batch_size=a.batch_size, seed=a.seed,
                                    use_augment=a.augment, test_set=test)
    else:
        if train is None:
            raise ConfigError("the auxiliary baseline needs the base dataset to derive a shifted sibling")
        aux = make_auxiliary(train, a.aux_shift, a.aux_seed, n=baseline_queries(a))
        f_s, trace = baseline_steal(oracle, f_s, "auxiliary", baseline_epochs(a), a.kd_lr, auxiliary=aux,
                                    batch_size=a.batch_size, seed=a.seed, use_augment=a.augment, test_set=test)
    return StealOutcome(f_s, trace, a.mode)


def best_substitute(outcome: StealOutcome) -> Network:
    net = outcome.substitute.copy()
    if outcome.trace.best_state is not None:
        net.load_state(outcome.trace.best_state)
    return net


def seed_everything(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Copy of ``cfg`` with every seed field set to ``seed``."""
    data = cfg.model_dump()
    for section in ("dataset", "victim", "attack"):
        data[section]["seed"] = seed
    return ExperimentConfig.model_validate(data)


def stack_queries(trace: StealTrace) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return list(trace.query_inputs), list(trace.query_outputs)
