"""Command-line front end.

    cl-consistency run --config exp.json [--out DIR] [--seed N]
    cl-consistency eval --checkpoint model.bin --config exp.json
    cl-consistency corrupt-eval --checkpoint model.bin --config exp.json
    cl-consistency compare RUN_A RUN_B

Exit codes: 0 success, 2 invalid input, 3 training hit a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as cfgmod
from . import experiment
from .metrics import model_reliability, robust_accuracy, task_probabilities, top1_accuracy
from .model import load_checkpoint
from .trainer import NonFiniteLossError

EXIT_OK, EXIT_INVALID, EXIT_NAN = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cl-consistency", description="Experience replay with consistency regularization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate every seed of an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--seed", type=int, help="base seed (overrides seed)")

    for name, text in (("eval", "evaluate a checkpoint on the configured stream"),
                       ("corrupt-eval", "corruption robustness of a checkpoint")):
        ev = sub.add_parser(name, help=text)
        ev.add_argument("--checkpoint", required=True)
        ev.add_argument("--config", required=True)
        ev.add_argument("--seed", type=int, help="stream seed (defaults to the config seed)")
        ev.add_argument("--out", help="also write the JSON result here")

    cmp_ = sub.add_parser("compare", help="relative gains of run A over run B")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("--out", help="also write the JSON result here")
    return p


def _emit(result: dict, out: str | None) -> None:
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")


def _load_for_eval(args):
    cfg = cfgmod.load(args.config)
    seed = cfg["seed"] if args.seed is None else args.seed
    model = load_checkpoint(args.checkpoint)
    train, test = experiment.load_dataset(cfg["dataset"])
    stream = experiment.build_stream(cfg["scenario"], train, test, seed)
    if model.input_dim != stream.input_dim or model.n_classes != stream.n_classes:
        raise ValueError(f"checkpoint layers {model.layer_sizes} do not fit the configured stream")
    return cfg, model, stream


def _cmd_run(args) -> int:
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["output_dir"] = args.out
    agg = experiment.run_experiment(cfg, cfg["output_dir"])
    if "sweep" in agg:
        for tag, sub in agg["sweep"].items():
            print(f"{tag}: {sub['metrics']['avg_top1']['formatted']}")
    else:
        m = agg["metrics"]
        print(f"{agg['name']}: top-1 {m['avg_top1']['formatted']}  ECE {m['ece']['formatted']}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg, model, stream = _load_for_eval(args)
    per_task = [top1_accuracy(model, t.test) for t in stream.tasks]
    rel = model_reliability(model, stream.all_test(), cfg["eval"]["n_bins"])
    result = {
        "checkpoint": args.checkpoint,
        "scenario": stream.scenario,
        "per_task_top1": per_task,
        "avg_top1": sum(per_task) / len(per_task),
        "ece": rel.ece,
        "task_probabilities": task_probabilities(model, stream) if stream.scenario == "ClassIL" and len(stream) > 1 else None,
    }
    _emit(result, args.out)
    return EXIT_OK


def _cmd_corrupt_eval(args) -> int:
    cfg, model, stream = _load_for_eval(args)
    test = stream.all_test()
    if test.image_shape is None:
        raise ValueError("corruption evaluation needs image-shaped data")
    table = robust_accuracy(model, test, seed=cfg["eval"]["corruption_seed"])
    result = {"checkpoint": args.checkpoint, **table.to_dict(), "ranking": table.ranking()}
    _emit(result, args.out)
    return EXIT_OK


def _cmd_compare(args) -> int:
    _emit(experiment.compare(args.run_a, args.run_b), args.out)
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "eval": _cmd_eval, "corrupt-eval": _cmd_corrupt_eval, "compare": _cmd_compare}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (cfgmod.ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
