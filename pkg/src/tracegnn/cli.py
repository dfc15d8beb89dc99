"""Command-line entry point: generate | train | evaluate | predict | gradcheck."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import TraceGNNError

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class _Out:
    """Human-readable lines, or one JSON record per line with --jsonl."""

    def __init__(self, jsonl: bool, stream=None):
        self.jsonl = jsonl
        self.stream = stream or sys.stdout

    def emit(self, text: str, **record):
        if self.jsonl:
            print(json.dumps(record, sort_keys=True), file=self.stream)
        else:
            print(text, file=self.stream)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--jsonl", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable output, one JSON record per line")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                        help="scenario-level worker processes (default 1)")

    ap = argparse.ArgumentParser(prog="tracegnn", description="Per-flow delay prediction with a graph neural network.",
                                 parents=[common])
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate", parents=[common], help="simulate a labeled synthetic dataset")
    p.add_argument("--config", required=True, help="generator config (JSON)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint / log directory")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=2.5e-4)
    p.add_argument("--t-max", type=int, default=40, help="message-passing iteration cap")
    p.add_argument("--packet-dim", type=int, default=None, help="packet encoder width (default: flow width)")

    p = sub.add_parser("evaluate", parents=[common], help="MAPE of a checkpoint against labels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])

    p = sub.add_parser("predict", parents=[common], help="per-flow delays for one scenario")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def _generate(args, out: _Out) -> int:
    from dataclasses import replace
    from .simulator import gen_dataset, load_generator_config

    config = load_generator_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    splits = gen_dataset(config, args.out, jobs=args.jobs)
    for split, names in splits.items():
        out.emit(f"{split:10s} {len(names)} scenarios", split=split, scenarios=len(names))
    return EXIT_OK


def _train(args, out: _Out) -> int:
    from .nn import ModelConfig
    from .traces import load_split
    from .training import TrainConfig, train

    config = TrainConfig(learning_rate=args.lr, max_epochs=args.epochs,
                         seed=0 if args.seed is None else args.seed, t_max=args.t_max,
                         model=ModelConfig(packet_dim=args.packet_dim), checkpoint_dir=args.out)

    def log(r):
        out.emit(f"epoch {r.epoch:4d}  loss {r.train_loss:.5f}  train MAPE {r.train_mape:7.3f}%  "
                 f"val MAPE {r.val_mape:7.3f}%", **r.record())

    result = train(load_split(args.data, "train"), load_split(args.data, "validation"), config, log=log)
    out.emit(f"best epoch {result.best_epoch}  val MAPE {result.best_val_mape:.3f}%  -> {result.checkpoint}",
             best_epoch=result.best_epoch, best_val_mape=result.best_val_mape, checkpoint=str(result.checkpoint))
    return EXIT_OK


def _evaluate(args, out: _Out) -> int:
    from .traces import load_dataset, load_split
    from .training import evaluate

    if args.split == "all":
        data = [item for items in load_dataset(args.data).values() for item in items]
    else:
        data = load_split(args.data, args.split)
    ev = evaluate(args.model, data)
    for name, value in ev.per_scenario.items():
        if out.jsonl:
            out.emit("", scenario=name, mape=value)
    out.emit(f"MAPE {ev.mape:.2f}%   no-queuing baseline MAPE {ev.baseline_mape:.2f}%",
             mape=ev.mape, baseline_mape=ev.baseline_mape, scenarios=len(ev.per_scenario))
    return EXIT_OK


def _predict(args, out: _Out) -> int:
    from .model import predict
    from .traces import load_scenario
    from .training import load_model

    params, stats, meta = load_model(args.model)
    tc = meta.get("train_config", {})
    scenario = load_scenario(args.scenario)
    kwargs = {k: tc[k] for k in ("t_max", "threshold") if k in tc}
    delays = predict(scenario, params, stats, **kwargs)
    for flow, d in zip(scenario.flows, delays):
        out.emit(f"{flow.id}\t{d!r}", flow=flow.id, delay_s=float(d))
    return EXIT_OK


def _gradcheck(args, out: _Out) -> int:
    from .gradcheck import gradcheck

    r = gradcheck(seed=0 if args.seed is None else args.seed)
    ok = r.passed(args.tol)
    out.emit(f"max relative error {r.max_rel_error:.3e} over {r.n_checked} parameters "
             f"(worst {r.worst[0]}{list(map(int, r.worst[1]))})  {'ok' if ok else 'FAILED'}",
             max_rel_error=r.max_rel_error, parameters=r.n_checked, worst=r.worst[0], passed=ok)
    return EXIT_OK if ok else EXIT_ERROR


COMMANDS = {"generate": _generate, "train": _train, "evaluate": _evaluate,
            "predict": _predict, "gradcheck": _gradcheck}


def run(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.seed = getattr(args, "seed", None)
    args.jobs = getattr(args, "jobs", 1)
    if args.jobs < 1:
        ap.print_usage(sys.stderr)
        print("tracegnn: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    out = _Out(getattr(args, "jsonl", False))
    try:
        return COMMANDS[args.command](args, out)
    except (TraceGNNError, OSError, ValueError, KeyError) as exc:
        print(f"tracegnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
