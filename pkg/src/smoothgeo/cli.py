"""Command line entry point.

Exit codes: 0 on success, 2 when a theory check fails, 1 on any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .attribution import attribute
from .config import ConfigError, load_config
from .data import digits_preset, gen_two_moons
from .experiments import (
    all_passed, load_test_data, run_regularization_experiment, run_robustness_experiment,
    run_theory_checks, run_transfer_experiment,
)
from .nn import load_checkpoint, save_checkpoint
from .plots import emit_contour_field, emit_heatmap
from .training import train

EXIT_OK, EXIT_ERROR, EXIT_CHECK_FAILED = 0, 1, 2


def _train_data(run: dict, seed: int):
    name = run.get("dataset", "digits")
    if name == "digits":
        return digits_preset(run.get("data_root"))[0].to_unit()
    if name == "moons":
        return gen_two_moons(200, 0.1, seed)
    raise ConfigError(f"unknown dataset {name!r}")


def _spec(args, cfg, experiment: str):
    over = {"experiment": experiment}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = args.out
    if args.format is not None:
        over["format"] = args.format
    if getattr(args, "checkpoint", None):
        over["checkpoints"] = tuple(args.checkpoint)
    elif "checkpoint" in cfg.run and "checkpoints" not in cfg.experiment:
        over["checkpoints"] = (cfg.run["checkpoint"],)
    return cfg.experiment_spec(**over)


def cmd_train(args, cfg) -> int:
    tcfg = cfg.train
    if args.mode:
        tcfg = dataclasses.replace(tcfg, mode=args.mode)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    data = _train_data(cfg.run, tcfg.seed)
    net, hist = train(data, tcfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / f"{tcfg.mode}.ckpt", {"config": tcfg.snapshot()})
    (out / f"{tcfg.mode}_history.csv").write_text(hist.to_csv())
    print(f"wrote {out / (tcfg.mode + '.ckpt')}")
    return EXIT_OK


def cmd_attack(args, cfg) -> int:
    spec = _spec(args, cfg, "robustness")
    for r in run_robustness_experiment(spec):
        print(json.dumps({"label": r.label, "auc": r.auc}, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    spec = _spec(args, cfg, "regularization")
    table = run_regularization_experiment(spec)
    for name, entry in table.items():
        aucs = {r.label["method"]: (r.auc or {}).get("cosd") for r in entry["reports"]}
        print(f"{name}: mean top eigenvalue {entry['mean_top_eigenvalue']:.4g}, "
              f"test accuracy {entry['test_accuracy']:.3f}, AUC-cosd {aucs}")
    return EXIT_OK


def cmd_transfer(args, cfg) -> int:
    spec = _spec(args, cfg, "transfer")
    for r in run_transfer_experiment(spec):
        print(json.dumps({"label": r.label, "auc": r.auc}, sort_keys=True))
    return EXIT_OK


def cmd_theory_check(args, cfg) -> int:
    spec = _spec(args, cfg, "theory_check")
    reports = run_theory_checks(spec)
    for r in reports:
        print(f"{r.check}: {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if all_passed(reports) else EXIT_CHECK_FAILED


def cmd_plot(args, cfg) -> int:
    spec = _spec(args, cfg, "robustness")
    if not spec.checkpoints:
        raise ConfigError("plot needs --checkpoint")
    net = load_checkpoint(spec.checkpoints[0])
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    method = args.method or cfg.run.get("method", "SM")
    if net.input_dim == 2:
        region = cfg.run.get("region", [[-1.5, 2.5], [-1.0, 1.5]])
        path = out / "field.svg"
        emit_contour_field(net, region, path=path)
    else:
        data, _ = load_test_data(spec)
        index = args.index if args.index is not None else int(cfg.run.get("index", 0))
        amap = attribute(net, data.features[index], method, spec.attribution_config(method))
        path = emit_heatmap(amap, data.geometry, out / f"{method}_{index}.pgm")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate,
    "transfer": cmd_transfer, "theory-check": cmd_theory_check, "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    # usage errors are errors (1); argparse would use 2, which means a failed check here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smoothgeo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file with TrainConfig / ExperimentSpec keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("csv", "json"))
        if name == "train":
            p.add_argument("--mode", choices=("natural", "ssr", "pgd_at"))
        else:
            p.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable)")
        if name == "plot":
            p.add_argument("--index", type=int, help="test input to explain")
            p.add_argument("--method", choices=("SM", "IG", "SG", "UG"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except Exception as err:  # noqa: BLE001 - report and map to the error exit code
        print(f"smoothgeo {args.command}: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
