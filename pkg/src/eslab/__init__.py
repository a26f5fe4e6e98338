"""Desk-scale model-extraction lab built around the ES Attack loop."""

from .data import LabeledDataset, SoftDataset, gen_blobs, gen_digits_like, make_auxiliary, split
from .errors import ESLabError
from .models import Network, build_model, load_checkpoint, save_checkpoint
from .oracle import DefenseConfig, OracleSession, RemoteOracle, estimate_cost_for, serve
from .steal import StealConfig, StealTrace, baseline_steal, run_es_attack
from .synthesis import SynthesisConfig

__version__ = "0.1.0"

__all__ = [
    "DefenseConfig",
    "ESLabError",
    "LabeledDataset",
    "Network",
    "OracleSession",
    "RemoteOracle",
    "SoftDataset",
    "StealConfig",
    "StealTrace",
    "SynthesisConfig",
    "baseline_steal",
    "build_model",
    "estimate_cost_for",
    "gen_blobs",
    "gen_digits_like",
    "load_checkpoint",
    "make_auxiliary",
    "run_es_attack",
    "save_checkpoint",
    "serve",
    "split",
]
