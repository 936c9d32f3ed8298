"""Command-line entry point: ``misleader <command> --config cfg.yaml [--output DIR] [--seed N] [--quiet]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .config import load_config
from .errors import ConfigError, MisleaderError
from .report import report

log = logging.getLogger("misleader")

COMMANDS = {
    "train-target": "train (or load) the target model",
    "train-defense": "train the defended ensemble (trains the target first if needed)",
    "attack": "run every configured attack against every configured oracle",
    "evaluate": "attacks plus utility evaluation; writes results.json without theory checks",
    "theory": "numerical checks of the generalization and distribution-shift bounds",
    "report": "render tables from one or more results files",
    "run": "full pipeline; writes results.json and prints the report",
}


def _common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    p.add_argument("--config", type=Path, required=needs_config, help="YAML or JSON experiment config")
    p.add_argument("--output", type=Path, default=None, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    p.add_argument("--quiet", action="store_true", help="only print warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misleader", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "report":
            _common(p, needs_config=False)
            p.add_argument("results", nargs="+", type=Path, help="results.json files")
        else:
            _common(p)
    return parser


def _echo(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _state(args) -> pl.RunState:
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    cfg = load_config(args.config, seed=args.seed, output_dir=str(args.output) if args.output else None)
    return pl.new_state(cfg)


def cmd_train_target(args) -> None:
    state = _state(args)
    pl.stage_target(state)
    _echo(args, f"target {state.target.spec.short_name}: test accuracy "
                f"{pl.held_out_accuracy(state.target, state.data.test):.4f}")


def cmd_train_defense(args) -> None:
    state = _state(args)
    pl.stage_defense(state)
    for i, m in enumerate(state.ensemble.members):
        _echo(args, f"member {i} {m.spec.short_name}: test accuracy {pl.held_out_accuracy(m, state.data.test):.4f}")
    _echo(args, f"ensemble: test accuracy {pl.held_out_accuracy(state.ensemble, state.data.test):.4f}")


def cmd_attack(args) -> None:
    state = _state(args)
    pl.stage_attacks(state)
    _write_json(state.out / "attacks.json", state.attacks)
    for a in state.attacks:
        _echo(args, f"{a['kind']}/{a['mode']} {a['clone_arch']} vs {a['oracle']} (budget {a['budget']}): "
                    f"clone accuracy {a['clone_accuracy']:.4f}, {a['queries_used']} queries")


def cmd_evaluate(args) -> None:
    state = _state(args)
    pl.run_experiment(state.cfg, with_theory=False)
    _echo(args, report([state.out / "results.json"]))


def cmd_theory(args) -> None:
    state = _state(args)
    if state.cfg["theory"]["df_gap"] and state.cfg["attacks"]:
        pl.stage_attacks(state)
    theory = pl.stage_theory(state)
    _write_json(state.out / "theory.json", {"theory": theory, "null_reasons": state.null_reasons})
    if theory is None:
        _echo(args, state.null_reasons.get("theory", "no theory output"))
        return
    for key, rep in theory.items():
        if rep is None:
            _echo(args, f"{key}: skipped ({state.null_reasons.get('theory.' + key, 'no reason recorded')})")
            continue
        for c in rep["checks"]:
            _echo(args, f"{c['name']}: lhs {c['lhs']:.6g} <= rhs {c['rhs']:.6g}: {'holds' if c['holds'] else 'VIOLATED'}")


def cmd_report(args) -> None:
    text = report(args.results)
    if args.output:
        args.output.mkdir(parents=True, exist_ok=True)
        (args.output / "report.txt").write_text(text)
    _echo(args, text)


def cmd_run(args) -> None:
    state = _state(args)
    pl.run_experiment(state.cfg)
    _echo(args, report([state.out / "results.json"]))


HANDLERS = {
    "train-target": cmd_train_target,
    "train-defense": cmd_train_defense,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "theory": cmd_theory,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (MisleaderError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
