"""Command line entry point: ``overlapckpt {run,plan,simulate,verify,inspect}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from fractions import Fraction
from pathlib import Path

from overlapckpt import analytic, harness
from overlapckpt.errors import CheckpointError, UnboundedInterval
from overlapckpt.persistence import META_NAME, _decode, _steps_on_disk, ckpt_dir, latest_complete, read_metadata

_TYPES = {"int": int, "float": lambda s: float(Fraction(s)), "str": str}


def _rate(text: str) -> float:
    return float(Fraction(text))  # "1/600" or "0.001667"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file with ExperimentConfig fields")
    for f in dataclasses.fields(harness.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=_TYPES[f.type], default=None, metavar=f.type.upper())


def _config_from_args(args: argparse.Namespace) -> harness.ExperimentConfig:
    names = [f.name for f in dataclasses.fields(harness.ExperimentConfig)]
    overrides = {n: getattr(args, n) for n in names if getattr(args, n) is not None}
    if args.config is not None:
        return harness.ExperimentConfig.from_file(args.config, **overrides)
    return harness.ExperimentConfig(**overrides)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    report = harness.run(cfg)
    sys.stdout.write(report.summary_text())
    print(f"report = {cfg.report_path}")
    print(f"summary = {cfg.summary_path}")
    return 1 if report.trajectory_mismatches or report.restore_mismatches else 0


def cmd_plan(args: argparse.Namespace) -> int:
    if args.table1:
        p = analytic_p = harness.TABLE1_P if args.p is None else args.p
        t_step = args.t_step or analytic.derive_t_step(harness.TABLE1[0][2], harness.TABLE1[0][1], analytic_p)
        rows = [(name, t_ckpt, n_best) for name, t_ckpt, n_best in harness.TABLE1]
        print(f"# T_step derived from the {harness.TABLE1[0][0]} row: {t_step:.4f} s")
    else:
        if args.p is None or args.t_step is None or not args.t_ckpt:
            print("plan: need --p, --t-step and at least one --t-ckpt (or --table1)", file=sys.stderr)
            return 2
        p, t_step = args.p, args.t_step
        rows = [("", t, None) for t in args.t_ckpt]

    if p <= 0:
        print("failure rate is zero: there is no finite optimal interval; checkpoint only as often as you can afford to lose work")
        return 0

    print("label,T_ckpt_s,N_star,N_best,P_star,gpu_util_overhead" + (",published_N_best" if args.table1 else ""))
    for name, t_ckpt, published in rows:
        n_real, n_int = analytic.optimal_interval(t_ckpt, t_step, p)
        p_star, util = analytic.min_overhead(p, t_ckpt, args.t_load)
        line = f"{name},{t_ckpt},{n_real:.3f},{n_int},{p_star:.6f},{util:.6f}"
        if published is not None:
            line += f",{published}"
        print(line)
        if n_real < 1:
            print(f"# T_ckpt={t_ckpt}: N*={n_real:.3f} is below one step; clamped to 1")

    n = args.n_overlap
    print(f"# per-checkpoint stall with the transfer spread over N={n} steps of {t_step:.4f} s")
    print(f"stall AsyncO = {analytic.stall_model('AsyncO', n, t_step):.6f} s")
    print(f"stall GoCkpt = {analytic.stall_model('GoCkpt', n, t_step):.6f} s")
    print(f"stall delta  = {analytic.stall_delta(n, t_step):.6f} s")
    print("# " + analytic.DELTA_NOTE)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    N = args.N
    if N is None:
        try:
            N = analytic.optimal_interval(args.t_ckpt, args.t_step, args.p)[1]
        except UnboundedInterval:
            print("simulate: p = 0 has no optimal interval; pass --N", file=sys.stderr)
            return 2
    rp = analytic.ReliabilityParams(args.p, args.t_step, args.t_ckpt, args.t_load, N)
    rep = analytic.simulate(args.scheme, rp, args.horizon, args.failures, args.period, args.seed)
    out = {
        "scheme": args.scheme,
        "N": N,
        "horizon_s": args.horizon,
        "effective_steps": rep.effective_steps,
        "stall_s": rep.stall_seconds,
        "lost_s": rep.lost_seconds,
        "restore_s": rep.restore_seconds,
        "failures": rep.failures,
        "checkpoints_completed": rep.checkpoints_completed,
        "waste_ratio": rep.waste_ratio,
        "model_waste_ratio": analytic.waste_ratio(rp),
    }
    for k, v in out.items():
        print(f"{k} = {v}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    results = harness.verify(quick=not args.full, skip_gradient=args.skip_gradient)
    sys.stdout.write(harness.verify_csv(results))
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"# FAIL {r.name}: {r.failures}/{r.instances} {r.detail}".rstrip(), file=sys.stderr)
    if args.skip_gradient and failed:
        print("# a gradient slice was withheld on purpose: the incomplete ledger was detected", file=sys.stderr)
    print("verdict = " + ("fail" if failed else "pass"))
    return 1 if failed else 0


def cmd_inspect(args: argparse.Namespace) -> int:
    path: Path = args.path
    if (path / META_NAME).is_file() or path.name.startswith("ckpt-"):
        step = int(path.name.split("-", 1)[1])
        return _inspect_one(path, step)
    steps = _steps_on_disk(path)
    if not steps:
        print(f"no checkpoints under {path}", file=sys.stderr)
        return 1
    for step in steps:
        status = _status(ckpt_dir(path, step), step)
        print(f"ckpt-{step}: {status}")
    print(f"latest_complete = {latest_complete(path)}")
    return 0


def _status(d: Path, step: int) -> str:
    try:
        _decode(d, step)
    except CheckpointError as exc:
        return f"invalid ({exc})"
    return "complete"


def _inspect_one(d: Path, step: int) -> int:
    status = _status(d, step)
    print(f"path = {d}")
    print(f"status = {status}")
    if (d / META_NAME).is_file():
        for k, v in read_metadata(d).items():
            print(f"{k} = {v}")
    return 0 if status == "complete" else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overlapckpt", description="Overlapped checkpointing experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train with a checkpoint scheme, inject crashes, write reports")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", help="optimal interval, overhead and stall model")
    p.add_argument("--t-ckpt", type=float, action="append", default=[], help="per-checkpoint stall in seconds (repeatable)")
    p.add_argument("--t-step", type=float)
    p.add_argument("--p", type=_rate, help="failure rate per second, e.g. 1/600")
    p.add_argument("--t-load", type=float, default=0.0)
    p.add_argument("--n-overlap", type=int, default=7)
    p.add_argument("--table1", action="store_true", help="the six published systems at p = 1/600")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="failure/restore discrete-event simulation")
    p.add_argument("--scheme", default="Sync")
    p.add_argument("--p", type=_rate, required=True)
    p.add_argument("--t-step", type=float, required=True)
    p.add_argument("--t-ckpt", type=float, required=True)
    p.add_argument("--t-load", type=float, default=0.0)
    p.add_argument("--N", type=int, help="checkpoint interval in steps (default: rounded N*)")
    p.add_argument("--horizon", type=float, default=1e6)
    p.add_argument("--failures", choices=("exponential", "fixed"), default="exponential")
    p.add_argument("--period", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--full", action="store_true", help="include P = 100000 and five seeds")
    p.add_argument("--skip-gradient", action="store_true", help="negative control: withhold a gradient slice")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="validate a checkpoint directory or a checkpoint root")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, CheckpointError) as exc:
        print(f"overlapckpt {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
