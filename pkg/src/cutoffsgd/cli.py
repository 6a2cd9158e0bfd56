"""Command-line entry points: trace-gen, train, eval-pred, race, export."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import clustersim, sgdharness
from .errors import CutoffSGDError
from .predictor import evaluate_predictions
from .trace import load_trace, save_trace
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("cutoffsgd")

DEFAULT_POLICIES = "full_sync,static_cutoff,gaussian_order,model_cutoff,oracle,async_staleness"


def _sim_spec(args) -> clustersim.SimSpec:
    if args.spec:
        spec = clustersim.load_sim_spec(args.spec)
        if args.seed is not None:
            spec = spec.with_seed(args.seed)
    else:
        spec = clustersim.preset(args.preset, 0 if args.seed is None else args.seed)
    if getattr(args, "iterations", None):
        spec = spec.with_iterations(args.iterations)
    return spec


def cmd_trace_gen(args) -> int:
    spec = _sim_spec(args)
    trace = clustersim.simulate_trace(spec)
    save_trace(trace, args.out)
    print(f"wrote {trace.n_iterations} x {trace.n_workers} runtimes to {args.out}")
    return 0


def cmd_train(args) -> int:
    trace = load_trace(args.trace)
    stop = args.stop if args.stop is not None else trace.n_iterations
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, lr=args.lr,
        lag=args.lag, d_z=args.d_z, hidden=args.hidden, clip_norm=args.clip_norm,
        lr_final_fraction=args.lr_final_fraction, lookahead=args.lookahead,
    )

    def progress(epoch, value):
        log.info("epoch %d  mean ELBO %.4f", epoch, value)

    ckpt = train(trace.slice(0, stop), config, progress)
    save_checkpoint(ckpt, args.out)
    print(f"trained on rows [0, {stop}); final ELBO {ckpt.metadata['final_elbo']:.4f}; wrote {args.out}")
    return 0


def cmd_eval_pred(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    trace = load_trace(args.trace)
    report = evaluate_predictions(ckpt, trace, args.split, k=args.k, seed=args.seed)
    ratio = report.rmse / report.baseline_rmse
    print(f"steps {len(report.steps)}  model RMSE {report.rmse:.6f}  "
          f"carry-forward RMSE {report.baseline_rmse:.6f}  ratio {ratio:.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "rank", "predicted", "predicted_std", "observed", "carry_forward"])
            for i, t in enumerate(report.steps):
                for j in range(report.observed_sorted.shape[1]):
                    w.writerow([int(t), j + 1, repr(float(report.predicted_sorted[i, j])),
                                repr(float(report.predicted_sorted_std[i, j])),
                                repr(float(report.observed_sorted[i, j])),
                                repr(float(report.carry_forward_sorted[i, j]))])
    return 0


def cmd_race(args) -> int:
    if args.trace:
        source = load_trace(args.trace)
    else:
        source = clustersim.simulate_trace(_sim_spec(args))
    n = source.n_workers
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    task = sgdharness.TaskConfig(per_worker=args.per_worker, lr=args.lr, seed=args.task_seed).build(n)
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if ckpt is None:
        skipped = [p for p in names if p.startswith("model_cutoff")]
        if skipped:
            log.warning("no --ckpt given; skipping %s", ", ".join(skipped))
            names = [p for p in names if p not in skipped]
    policies = [sgdharness.make_policy(p, n, ckpt=ckpt, k=args.k) for p in names]
    os.makedirs(args.out, exist_ok=True)
    records = []
    for policy in policies:
        rec = sgdharness.run_experiment(task, policy, source, args.iters, seed=args.seed, overhead=args.overhead)
        records.append(rec)
        print(f"{rec.policy:22s} iterations {len(rec):5d}  time {rec.total_time:10.2f} s  "
              f"gradients/s {rec.gradients_per_second():8.2f}  final val loss {rec.rows[-1].val_loss:.5f}")
    path = os.path.join(args.out, "records.csv")
    sgdharness.write_records(records, path)
    print(f"wrote {path}")
    return 0


_EXPORTS = {
    "throughput": ("iteration", "throughput"),
    "convergence": ("cum_time_s", "val_loss"),
    "idle": ("iteration", "idle_s"),
}


def cmd_export(args) -> int:
    xcol, ycol = _EXPORTS[args.what]
    records = sgdharness.read_records(args.records)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["series", "x", "y"])
        for rec in records:
            for x, y in zip(rec.column(xcol), rec.column(ycol)):
                w.writerow([rec.policy, repr(x.item()), repr(y.item())])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cutoffsgd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_source(p, required=True):
        g = p.add_mutually_exclusive_group(required=required)
        g.add_argument("--spec", help="simulation spec file (INI)")
        g.add_argument("--preset", choices=sorted(clustersim.PRESETS))
        return g

    p = sub.add_parser("trace-gen", help="simulate a runtime trace")
    add_source(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int, help="truncate to this many iterations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace_gen)

    p = sub.add_parser("train", help="fit the runtime model to a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stop", type=int, help="train on rows [0, stop)")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--clip-norm", type=float, default=TrainConfig.clip_norm)
    p.add_argument("--lag", type=int, default=TrainConfig.lag)
    p.add_argument("--d-z", type=int, default=TrainConfig.d_z)
    p.add_argument("--hidden", type=int, default=TrainConfig.hidden)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-final-fraction", type=float, default=TrainConfig.lr_final_fraction,
                   help="cosine-decay lr to this fraction of --lr")
    p.add_argument("--lookahead", action="store_true", help="also fit the row after each window")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-pred", help="one-step predictive accuracy against carry-forward")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--split", type=int, required=True, help="first held-out iteration")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write per-rank predictions here")
    p.set_defaults(func=cmd_eval_pred)

    p = sub.add_parser("race", help="run SGD policies against a runtime trace")
    g = add_source(p)
    g.add_argument("--trace")
    p.add_argument("--ckpt")
    p.add_argument("--policies", default=DEFAULT_POLICIES)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--per-worker", type=int, default=sgdharness.TaskConfig.per_worker)
    p.add_argument("--lr", type=float, default=sgdharness.TaskConfig.lr)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--overhead", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_race)

    p = sub.add_parser("export", help="long-format series for plotting")
    p.add_argument("--records", required=True)
    p.add_argument("--what", choices=sorted(_EXPORTS), required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        # output piped into e.g. head
        return 0
    except (CutoffSGDError, OSError, ValueError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
