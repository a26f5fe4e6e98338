"""Command-line experiment runner.

Every command reads an experiment config (a YAML path or a shipped preset
name), applies flag overrides, writes the resolved config next to its
outputs and emits JSON reports with sorted keys.  Exit status: 0 on
success, 1 on a library error, 2 on bad usage, 3 when the query budget ran
out (partial outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import detect as D
from . import experiment as X
from .adversarial import PgdConfig, transfer_eval
from .config import ExperimentConfig, apply_overrides, load_config, preset_names, write_resolved
from .data import LabeledDataset, SoftDataset, load_dataset, save_dataset
from .errors import ConfigError, ESLabError
from .metrics import accuracy, agreement, quality_report
from .models import load_checkpoint, save_checkpoint
from .oracle import RemoteOracle, estimate_cost_for, serve

log = logging.getLogger("eslab")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


def dump_json(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {
        "output.directory": getattr(args, "out", None),
        "oracle.rounding_decimals": getattr(args, "round", None),
        "oracle.topk": getattr(args, "topk", None),
        "oracle.budget": getattr(args, "budget", None),
        "oracle.price_per_1k": getattr(args, "price_per_1k", None),
        "oracle.endpoint": getattr(args, "endpoint", None),
        "attack.mode": getattr(args, "mode", None),
        "attack.resume": getattr(args, "resume", None),
        "evaluation.pgd_epsilon": getattr(args, "epsilon", None),
    }
    if getattr(args, "seed", None) is not None:
        cfg = X.seed_everything(cfg, args.seed)
    if getattr(args, "detect_queries", False):
        overrides["oracle.detection"] = True
    return apply_overrides(cfg, overrides)


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    return out


def _labelled(path) -> LabeledDataset:
    ds = load_dataset(path)
    if not isinstance(ds, LabeledDataset):
        raise ConfigError(f"{path} is not a labelled dataset")
    return ds


def _datasets(cfg: ExperimentConfig, out: Path, args) -> tuple[LabeledDataset, LabeledDataset]:
    train_path = getattr(args, "train_data", None) or out / "train.esd"
    test_path = getattr(args, "test_data", None) or out / "test.esd"
    if Path(train_path).is_file() and Path(test_path).is_file():
        return _labelled(train_path), _labelled(test_path)
    return X.build_dataset(cfg.dataset)


def _victim_path(cfg: ExperimentConfig, out: Path, args) -> Path:
    return Path(getattr(args, "checkpoint", None) or cfg.victim.checkpoint or out / "victim.ckpt")


# -- commands --------------------------------------------------------------------


def cmd_train_victim(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, test = X.build_dataset(cfg.dataset)
    net, report = X.train_victim(cfg.victim, train, test)
    ckpt = _victim_path(cfg, out, args)
    save_checkpoint(net, ckpt)
    save_dataset(train, out / "train.esd")
    save_dataset(test, out / "test.esd")
    body = {
        "best_epoch": report.best_epoch,
        "checkpoint": str(ckpt),
        "history": report.history,
        "test_accuracy": report.test_accuracy,
        "train_accuracy": report.train_accuracy,
    }
    sys.stdout.write(dump_json(body, out / "victim.json"))
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _config(args)
    victim = load_checkpoint(args.checkpoint or cfg.victim.checkpoint or Path(cfg.output.directory) / "victim.ckpt")
    session = X.make_session(victim, cfg.oracle)
    if args.http:
        from .service import run

        run(session, args.host, args.port)
        return EXIT_OK
    server = serve(session, f"{args.host}:{args.port}")
    print(f"serving on {server.endpoint}", flush=True)
    try:
        while server._thread.is_alive():
            server._thread.join(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_steal(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, test = _datasets(cfg, out, args)
    remote = None
    if cfg.oracle.endpoint:
        remote = RemoteOracle(cfg.oracle.endpoint)
        oracle = remote
    else:
        oracle = X.make_session(load_checkpoint(_victim_path(cfg, out, args)), cfg.oracle)
    try:
        outcome = X.run_attack(oracle, cfg, test=test, train=train, record_queries=True)
    finally:
        if remote is not None:
            remote.close()
    trace = outcome.trace
    save_checkpoint(outcome.substitute, out / "substitute-final.ckpt")
    save_checkpoint(X.best_substitute(outcome), out / "substitute-best.ckpt")
    trace.write_csv(out / "trace.csv")
    trace.write_json(out / "trace.json")
    if trace.initial_synthetic is not None:
        save_dataset(SoftDataset(trace.initial_synthetic, name="initial"), out / "synthetic-initial.esd")
    if trace.final_synthetic is not None:
        save_dataset(SoftDataset(trace.final_synthetic, name="final"), out / "synthetic-final.esd")
    if trace.query_inputs:
        inputs, outputs = np.concatenate(trace.query_inputs), np.concatenate(trace.query_outputs)
    else:
        width = int(np.prod(oracle.input_shape))
        inputs, outputs = np.zeros((0, width)), np.zeros((0, oracle.class_count))
    np.savez_compressed(out / "queries.npz", inputs=inputs, outputs=outputs,
                        epoch_sizes=np.array([len(b) for b in trace.query_inputs], dtype=np.int64))
    summary = dict(trace.summary(), mode=outcome.mode,
                   cost=estimate_cost_for(trace.queries, cfg.oracle.price_per_1k))
    sys.stdout.write(dump_json(summary, out / "steal.json"))
    return EXIT_BUDGET if trace.error == "budget_exhausted" else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, test = _datasets(cfg, out, args)
    victim = load_checkpoint(_victim_path(cfg, out, args))
    report = {"victim": {"accuracy": accuracy(victim, test)}}
    sub_path = Path(args.substitute or out / "substitute-best.ckpt")
    if sub_path.is_file():
        sub = load_checkpoint(sub_path)
        report["substitute"] = {"accuracy": accuracy(sub, test), "agreement": agreement(victim, sub, test.inputs)}
    report["quality"] = _quality(victim, train, out, args)
    sys.stdout.write(dump_json(report, out / "evaluate.json"))
    return EXIT_OK


def _quality(victim, train: LabeledDataset, out: Path, args) -> dict:
    sets = {"train": train.inputs}
    for tag, name in (("initial", "synthetic-initial.esd"), ("final", "synthetic-final.esd")):
        if (out / name).is_file():
            sets[tag] = load_dataset(out / name).inputs
    for extra in getattr(args, "samples", None) or []:
        sets[Path(extra).stem] = load_dataset(extra).inputs
    return quality_report(victim, train.inputs, sets)


def cmd_metrics(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train, _ = _datasets(cfg, out, args)
    victim = load_checkpoint(_victim_path(cfg, out, args))
    sys.stdout.write(dump_json(_quality(victim, train, out, args), out / "metrics.json"))
    return EXIT_OK


def cmd_pgd(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    _, test = _datasets(cfg, out, args)
    ev = cfg.evaluation
    victim = load_checkpoint(_victim_path(cfg, out, args))
    sub = load_checkpoint(args.substitute or out / "substitute-best.ckpt")
    subset = test.subset(np.arange(min(ev.pgd_samples, len(test))))
    pgd = PgdConfig(ev.pgd_epsilon, ev.pgd_step, ev.pgd_iterations, ev.clip_min, ev.clip_max)
    session = X.make_session(victim, cfg.oracle)
    rep = transfer_eval(sub, session, subset, pgd, victim=victim)
    sys.stdout.write(dump_json(rep.__dict__, out / "pgd.json"))
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    path = Path(args.queries or out / "queries.npz")
    if not path.is_file():
        raise ConfigError(f"query log {path} not found; run steal first")
    with np.load(path) as z:
        inputs, outputs, sizes = z["inputs"], z["outputs"], z["epoch_sizes"]
    cuts = np.cumsum(sizes)[:-1]
    batches = np.split(inputs, cuts) if len(sizes) else []
    answers = np.split(outputs, cuts) if len(sizes) else []
    det = D.DetectorState(threshold=cfg.evaluation.detection_threshold)
    report = D.replay_attack_stream(det, batches, answers)
    (out / "detect.json").write_text(D.dumps_report(report, include_timing=False))
    sys.stdout.write(D.dumps_report(report))
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eslab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default="blobs-desk", help="YAML file or preset name")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        sp.add_argument("--seed", type=int, help="set every seed in the config")
        sp.add_argument("--checkpoint", help="victim checkpoint path")
        sp.add_argument("--train-data", help="labelled training set (.esd)")
        sp.add_argument("--test-data", help="labelled test set (.esd)")
        return sp

    def oracle_flags(sp):
        sp.add_argument("--round", type=int, help="round answers to this many decimals")
        sp.add_argument("--topk", type=int, help="reveal only the top-k probabilities")
        sp.add_argument("--budget", type=int, help="maximum number of queries")
        sp.add_argument("--price-per-1k", type=float, help="price per 1000 queries")
        return sp

    sp = common(sub.add_parser("train-victim", help="train and save a victim model"))
    sp.set_defaults(func=cmd_train_victim)

    sp = oracle_flags(common(sub.add_parser("serve", help="expose a victim as a metered oracle")))
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=0)
    sp.add_argument("--http", action="store_true", help="serve the HTTP API instead of the socket protocol")
    sp.add_argument("--detect-queries", action="store_true", help="run the query-distance detector")
    sp.set_defaults(func=cmd_serve)

    sp = oracle_flags(common(sub.add_parser("steal", help="run an attack or baseline")))
    sp.add_argument("--mode", choices=["opt-syn", "dnn-syn", "random", "auxiliary"])
    sp.add_argument("--endpoint", help="host:port of a running oracle; default is an in-process victim")
    sp.add_argument("--resume", help="start from this substitute checkpoint")
    sp.set_defaults(func=cmd_steal)

    sp = common(sub.add_parser("evaluate", help="accuracy, agreement, IS and FID"))
    sp.add_argument("--substitute")
    sp.add_argument("--samples", nargs="*", help="extra sample sets (.esd) to score")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("metrics", help="IS and FID of sample sets under the victim"))
    sp.add_argument("--samples", nargs="*")
    sp.set_defaults(func=cmd_metrics)

    sp = oracle_flags(common(sub.add_parser("pgd", help="white-box and transfer PGD success rates")))
    sp.add_argument("--substitute")
    sp.add_argument("--epsilon", type=float)
    sp.set_defaults(func=cmd_pgd)

    sp = common(sub.add_parser("detect", help="replay a recorded query stream through the detector"))
    sp.add_argument("--queries", help="queries.npz written by steal")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("presets", help="list shipped config presets")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"eslab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ESLabError as exc:
        print(f"eslab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"eslab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"eslab: I/O error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
