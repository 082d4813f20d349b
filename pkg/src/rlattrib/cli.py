"""Command-line entry point: ``rlattrib <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
from pathlib import Path

from rlattrib.config import ExperimentConfig, ParseError, parse_config
from rlattrib import experiment as ex

log = logging.getLogger("rlattrib")

# flags shared by every subcommand; each maps 1:1 onto a config key
_COMMON = {
    "env": dict(help="frozenlake | emptygrid | chain"),
    "seeds": dict(help="comma list or range, e.g. 0-4"),
    "seed": dict(help="single seed (same as --seeds S)"),
    "rounds": dict(help="training rounds per run"),
    "p": dict(help="fraction of negative-influence records to drop"),
    "eval_episodes": dict(help="evaluation episodes per round"),
    "output_dir": dict(help="artifact root (default: $IIF_OUTPUT_DIR or ./runs)"),
    "n_steps": dict(help="records collected per round"),
    "lr": dict(help="SGD learning rate"),
    "workers": dict(help="parallel cells"),
}


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="key=value config file; flags override it")
    for name, kw in _COMMON.items():
        sp.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, **kw)
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key (repeatable)")
    sp.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlattrib", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="standard PPO runs")
    _add_common(sp)

    sp = sub.add_parser("iif", help="PPO with influence-based filtering")
    _add_common(sp)

    sp = sub.add_parser("bench", help="strategy x seed matrix plus summary report")
    _add_common(sp)
    sp.add_argument("--strategies", default="iif,random,adv1,adv2,td,reward")

    sp = sub.add_parser("report", help="summarise a bench directory")
    sp.add_argument("directory")
    sp.add_argument("-v", "--verbose", action="count", default=0)

    sp = sub.add_parser("attribute", help="influence report for one round")
    _add_common(sp)
    sp.add_argument("--round", type=int, required=True, help="1-based training round")
    sp.add_argument("--target", choices=("return", "action"), default="return")
    sp.add_argument("--mode", choices=("fast", "full"), default="fast")
    sp.add_argument("--record", type=int, default=0, help="record id for the action target")
    sp.add_argument("--strategy", default="standard", help="strategy used to reach the round")
    sp.add_argument("--out", help="JSON path (default: <output-dir>/attribute/...)")

    sp = sub.add_parser("intervene", help="single-round retraining with bottom records removed")
    _add_common(sp)
    sp.add_argument("--at", default="3-20", help="1-based rounds, e.g. 3-20")
    sp.add_argument("--variant", choices=("influence", "random"), default="influence")
    sp.add_argument("--mode", choices=("fast", "full"), default="full")
    sp.add_argument("--drop-p", type=float, default=1.0)

    sp = sub.add_parser("diagnose", help="mismatch, roughness and intervention data for one run")
    _add_common(sp)
    sp.add_argument("--round", type=int, required=True, help="1-based round for the mismatch table")
    sp.add_argument("--u", default="20,50,100", help="neighbour counts for roughness")
    sp.add_argument("--at", default=None, help="intervention rounds (default: --round)")
    return parser


def resolve(args: argparse.Namespace, **extra) -> ExperimentConfig:
    flags = {name: getattr(args, name) for name in _COMMON}
    if flags.pop("seed") is not None:
        flags["seeds"] = flags["seeds"] or args.seed
    for item in args.set:
        if "=" not in item:
            raise ParseError(f"flag --set: expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip()] = value.strip()
    flags.update({k: v for k, v in extra.items() if v is not None})
    cfg = parse_config(args.config, flags)
    log.info("resolved config:\n%s", cfg.describe())
    return cfg


def _matrix(cfg: ExperimentConfig) -> int:
    result = ex.run_matrix(cfg)
    for c in result.cells:
        status = "ok" if c["status"] == "ok" else f"FAILED ({c['error']})"
        ex.echo(f"{c['strategy']}/seed{c['seed']}: {status}")
    ex.echo(f"artifacts: {result.root}")
    return 0 if result.ok else 1


def cmd_train(args) -> int:
    return _matrix(resolve(args, strategies="standard"))


def cmd_iif(args) -> int:
    return _matrix(resolve(args, strategies="iif"))


def cmd_bench(args) -> int:
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if "standard" not in names:
        names.insert(0, "standard")  # the efficiency metrics are relative to standard training
    cfg = resolve(args, strategies=",".join(names))
    code = _matrix(cfg)
    _write_report(Path(cfg.output_dir))
    return code


def _write_report(root: Path) -> None:
    rows = ex.summarize(root)
    (root / "report.csv").write_text(ex.report_csv(rows))
    text = ex.report_text(rows)
    (root / "report.txt").write_text(text + "\n")
    ex.refresh_manifest(root)
    ex.echo(text)


def cmd_report(args) -> int:
    root = Path(args.directory)
    if not (root / "manifest.json").exists():
        ex.echo(f"{root} has no manifest.json")
        return 2
    _write_report(root)
    return 0


def cmd_attribute(args) -> int:
    cfg = resolve(args)
    seed = cfg.seeds[0]
    report = ex.attribute_round(cfg, seed, args.round, args.target, args.mode, args.strategy, args.record)
    out = Path(args.out) if args.out else (Path(cfg.output_dir) / "attribute"
                                           / f"{args.strategy}_seed{seed}_round{args.round}_{args.target}_{args.mode}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    neg = int((report.scores < 0).sum())
    ex.echo(f"{len(report)} records, {neg} negative; |grad f| = {report.target_grad_norm:.4g}; wrote {out}")
    return 0


def _summarise_deltas(rows) -> str:
    deltas = [r[5] for r in rows]
    frac = sum(d >= -0.02 for d in deltas) / len(deltas)
    return f"{len(deltas)} cells: median delta {statistics.median(deltas):+.4f}, {frac:.0%} with delta >= -0.02"


def cmd_intervene(args) -> int:
    cfg = resolve(args)
    rounds = parse_rounds(args.at)
    rows = ex.intervention_sweep(cfg, cfg.seeds, rounds, args.variant, args.mode, args.drop_p)
    out = Path(cfg.output_dir) / f"intervene_{args.variant}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    ex.write_rows(out, ex.INTERVENTION_COLUMNS, rows)
    ex.echo(_summarise_deltas(rows))
    ex.echo(f"wrote {out}")
    return 0


def parse_rounds(text: str) -> list[int]:
    from rlattrib.config import _int_list
    return list(_int_list(text))


def cmd_diagnose(args) -> int:
    cfg = resolve(args)
    seed = cfg.seeds[0]
    root = Path(cfg.output_dir) / "diagnose" / f"seed{seed}"
    root.mkdir(parents=True, exist_ok=True)

    rows, rho = ex.mismatch_rows(cfg, seed, args.round)
    ex.write_mismatch_csv(root / f"mismatch_round{args.round}.csv", rows)
    ex.echo(f"round {args.round}: spearman(influence rank, A_bar * A_hat) = {rho:.3f}")

    us = [int(u) for u in args.u.split(",")]
    rough = ex.roughness_by_round(cfg, seed, us)
    ex.write_rows(root / "roughness.csv", ex.ROUGHNESS_COLUMNS, rough)
    finite = [r for r in rough if math.isfinite(r[2])]
    if finite:
        ex.echo(f"roughness: {len(finite)} (round, u) values, last round u={us[0]}: "
                f"{[r[2] for r in finite if r[1] == us[0]][-1]:.4f}")

    at = parse_rounds(args.at) if args.at else [args.round]
    deltas = ex.intervention_sweep(cfg, [seed], at)
    ex.write_rows(root / "delta_return.csv", ex.INTERVENTION_COLUMNS, deltas)
    ex.echo(_summarise_deltas(deltas))
    ex.echo(f"wrote {root}")
    return 0


COMMANDS = {
    "train": cmd_train, "iif": cmd_iif, "bench": cmd_bench, "report": cmd_report,
    "attribute": cmd_attribute, "intervene": cmd_intervene, "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
