"""Command-line entry point.

Exit codes: 0 success, 1 a check or run failed, 2 usage or input error.
The worker count for parallel commands comes from NOISYLANG_WORKERS.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .lang import DomainError, FeatureSpace
from .metrics import compute_metrics, expected_topo_random, monte_carlo_topo_random, read_log
from .oracle import PenaltyH, verify_optimality
from .training import TrainingDiverged, save_checkpoint

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(args, payload: dict, text: str | None = None) -> None:
    """Report commands (text is None) always print JSON; others print text
    unless --json is given."""
    if args.json or text is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _load_config(path: str) -> ex.ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    return ex.ExperimentConfig.from_json(text)


def cmd_verify_optimality(args) -> int:
    space = FeatureSpace.uniform(args.K, args.m)
    rep = verify_optimality(space, args.m, args.eps, PenaltyH(args.penalty, args.gamma), ex.worker_count())
    _emit(args, rep.to_dict())
    return OK if rep.passed else FAILED


def cmd_verify_all(args) -> int:
    checks = ex.verify_all(ex.worker_count(), args.trials)
    ok = all(c.passed for c in checks)
    _emit(args, {"passed": ok, "checks": [c.to_dict() for c in checks]})
    return OK if ok else FAILED


def cmd_expected_topo(args) -> int:
    value = expected_topo_random(args.n, args.ranks)
    payload = {"n": args.n, "ranks": args.ranks, "expected_topo": value}
    text = f"E[topo] over random bijections, n={args.n}, {args.ranks} ranks: {value!r}"
    if args.mc:
        rng = np.random.Generator(np.random.Philox(args.seed))
        mean, se = monte_carlo_topo_random(args.n, args.mc, rng, args.ranks)
        payload.update(monte_carlo=mean, stderr=se, trials=args.mc)
        text += f"\nMonte Carlo ({args.mc} trials): {mean!r} +/- {se!r}"
    _emit(args, payload, text)
    return OK


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(f"{out.stem}.{suffix}{out.suffix or '.csv'}")


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if len(cfg.cells) != 1:
        raise UsageError("train runs one noise schedule; use sweep for several")
    cfg = cfg.with_seeds([args.seed])
    out = Path(args.out)
    cells = ex.run_experiment(cfg, workers=1, keep_checkpoints=bool(args.checkpoint))
    files = {out: ex.render_csv(ex.trajectory_rows(cells))}
    if cfg.scramble_labels:
        files[_sibling(out, "original")] = ex.render_csv(ex.trajectory_rows(cells, "original"))
    for which in cfg.finetune_sets:
        files[_sibling(out, f"finetune-{which}")] = ex.render_csv(ex.trajectory_rows(cells, finetune_set=which))
    out.parent.mkdir(parents=True, exist_ok=True)
    for path, text in files.items():
        with open(path, "w", newline="") as fh:
            fh.write(text)
    run = cells[0].runs[0]
    if args.checkpoint and not run.error:
        save_checkpoint(cells[0].checkpoints[args.seed], args.checkpoint)
    summary = run.summary(cfg.train.eval_window) if run.trajectory else None
    payload = {
        "seed": args.seed,
        "out": str(out),
        "files": sorted(str(p) for p in files),
        "error": run.error,
        "summary": summary.to_dict() if summary else None,
    }
    text = f"wrote {', '.join(sorted(str(p) for p in files))}"
    if run.error:
        text += f"\nrun failed: {run.error}"
    elif summary:
        text += "\nlast-window means: " + ", ".join(f"{k}={v}" for k, v in summary.to_dict().items())
    _emit(args, payload, text)
    return FAILED if ex.failures(cells) else OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    cells, files = ex.run_sweep(cfg, args.out)
    fails = ex.failures(cells)
    payload = {"out": args.out, "files": sorted(files), "failures": [{"seed": s, "error": e} for _, s, e in fails]}
    text = f"wrote {len(files)} files to {args.out}"
    if fails:
        text += f"\n{len(fails)} run(s) failed; see failures.csv"
    _emit(args, payload, text)
    return FAILED if fails else OK


def cmd_metrics(args) -> int:
    try:
        log = read_log(args.log)
    except OSError as exc:
        raise UsageError(f"cannot read log: {exc}") from None
    _emit(args, compute_metrics(log).to_dict(include_acc=False))
    return OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON output")
    p = argparse.ArgumentParser(prog="noisylang", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-optimality", parents=[common], help="brute-force check that compositional languages minimise the channel loss")
    s.add_argument("--K", type=int, default=2)
    s.add_argument("--m", type=int, default=2, help="values per feature (= alphabet size)")
    s.add_argument("--eps", type=float, default=0.1)
    s.add_argument("--H", "--penalty", dest="penalty", choices=("linear-normalized", "linear", "power"), default="linear-normalized")
    s.add_argument("--gamma", type=float, default=1.0)
    s.set_defaults(fn=cmd_verify_optimality)

    s = sub.add_parser("verify-all", parents=[common], help="run every exact check")
    s.add_argument("--trials", type=int, default=100_000, help="Monte Carlo trials for the topo baseline")
    s.set_defaults(fn=cmd_verify_all)

    s = sub.add_parser("expected-topo", parents=[common], help="expected topo of a random bijection")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--ranks", choices=("avg", "min", "max"), default="avg")
    s.add_argument("--mc", type=int, default=0, help="also estimate by Monte Carlo with this many trials")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_expected_topo)

    s = sub.add_parser("train", parents=[common], help="train one seed and write its trajectory CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="also save the final state here (JSON)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", parents=[common], help="train every (noise level, seed) and write CSV and plot data")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("metrics", parents=[common], help="compositionality metrics of a message log")
    s.add_argument("--log", required=True)
    s.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code not in (0, None) else OK
    try:
        return args.fn(args)
    except (UsageError, DomainError) as exc:
        print(f"noisylang {args.command}: error: {exc}", file=sys.stderr)
        return USAGE
    except TrainingDiverged as exc:
        print(f"noisylang {args.command}: {exc}", file=sys.stderr)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
