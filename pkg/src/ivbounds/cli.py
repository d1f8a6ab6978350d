"""Command-line interface.

Subcommands: generate, fit-nuisance, fit-partition, bounds, evaluate,
run, reproduce, checks. Exit codes: 0 success, 1 check failure, 2 I/O
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff, bounds, checks, data, experiments, metrics, naive, nuisance, partition
from .nets import TrainConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

_TRAIN_FLAGS = {
    "learning_rate": float,
    "max_epochs": int,
    "patience": int,
    "batch_size": int,
    "lam": float,
    "gamma": float,
    "temperature": float,
    "restarts": int,
}


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    for name, typ in _TRAIN_FLAGS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)


def _overrides(args: argparse.Namespace) -> dict:
    out = dict(getattr(args, "config_data", {}).get("train", {}))
    for name in _TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _load_config_file(args: argparse.Namespace) -> None:
    args.config_data = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            args.config_data = json.load(fh)
        for key, value in args.config_data.items():
            if key != "train" and hasattr(args, key) and getattr(args, key) is None:
                setattr(args, key, value)


def _split_dir(path: Path) -> data.DatasetSplit:
    train = data.read_csv(path / "train.csv")
    val = data.read_csv(path / "val.csv")
    test = data.read_csv(path / "test.csv")
    seed = 0
    manifest = path / "manifest.json"
    if manifest.exists():
        seed = json.loads(manifest.read_text())["config"].get("seed", 0)
    return data.DatasetSplit(train=train, val=val, test=test, seed=seed)


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = data.generate_dataset(args.dataset, args.n, args.seed)
    split = data.split_dataset(batch, args.seed)
    data.write_csv(split.train, out / "train.csv")
    data.write_csv(split.val, out / "val.csv")
    data.write_csv(split.test, out / "test.csv")
    experiments.write_manifest(out, "generate", {"dataset": args.dataset, "n": args.n, "seed": args.seed})
    print(f"wrote {out}/train.csv val.csv test.csv (n={args.n}, dataset {args.dataset}, seed {args.seed})")
    return EXIT_OK


def cmd_fit_nuisance(args) -> int:
    split = _split_dir(Path(args.data))
    config = experiments._train_config(args.seed if args.seed is not None else split.seed, args.k, _overrides(args))
    nuis = nuisance.fit_nuisances(split, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(nuis.mu, out / "mu.ckpt")
    save_checkpoint(nuis.pi, out / "pi.ckpt")
    save_checkpoint(nuis.eta, out / "eta.ckpt")
    experiments.write_manifest(out, "fit-nuisance", {"data": str(args.data), "train": asdict(config)})
    print(f"wrote {out}/mu.ckpt pi.ckpt eta.ckpt")
    return EXIT_OK


def _load_nuisances(path: Path) -> nuisance.NuisanceSet:
    return nuisance.NuisanceSet(
        mu=load_checkpoint(path / "mu.ckpt"),
        pi=load_checkpoint(path / "pi.ckpt"),
        eta=load_checkpoint(path / "eta.ckpt"),
    ).freeze()


def cmd_fit_partition(args) -> int:
    split = _split_dir(Path(args.data))
    nuis = _load_nuisances(Path(args.nuisance))
    config = experiments._train_config(args.seed if args.seed is not None else split.seed, args.k, _overrides(args))
    net, rows, stage2 = partition.train_partition(split, nuis, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "partition.ckpt")
    partition.write_train_log_csv(rows, out / "train_log.csv")
    experiments.write_manifest(out, "fit-partition", {
        "data": str(args.data), "nuisance": str(args.nuisance), "train": asdict(config),
        "chosen_restart": stage2.restart, "val_total": stage2.val_total,
    })
    print(f"wrote {out}/partition.ckpt (restart {stage2.restart}, val total {stage2.val_total:.4f})")
    return EXIT_OK


def cmd_bounds(args) -> int:
    split = _split_dir(Path(args.data))
    rng_range = data.outcome_range_from_train(split.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.method == "oracle":
        pair = metrics.oracle_bounds_dataset3(split.test.x, rng_range, n_u=2001)
    else:
        nuis = _load_nuisances(Path(args.nuisance))
        net = load_checkpoint(Path(args.partition))
        z_all = np.concatenate([split.train.z, split.val.z, split.test.z])
        a_all = np.concatenate([split.train.a, split.val.a, split.test.a])
        pair, _ = partition.evaluate_bounds(net, nuis, split.test, rng_range, agg_z=z_all, agg_a=a_all)
    pair.to_csv(out / "bounds.csv")
    experiments.write_manifest(out, "bounds", {
        "data": str(args.data), "method": args.method,
        "nuisance": str(args.nuisance) if args.nuisance else None,
        "partition": str(args.partition) if args.partition else None,
    })
    print(f"wrote {out}/bounds.csv ({len(pair.x)} query points)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pair = bounds.BoundPair.from_csv(args.bounds)
    split = _split_dir(Path(args.data))
    report = metrics.MetricsReport(
        dataset=args.dataset or 0,
        method=args.method or "unknown",
        k=args.k or 0,
        seed=args.seed if args.seed is not None else split.seed,
        coverage=metrics.coverage(pair, split.test.tau_true),
        mean_width=metrics.mean_width(pair),
        crossing_rate=metrics.crossing_rate(pair),
        min_cell_mass=float("nan"),
        mass_floor_violated=False,
    )
    if args.oracle_bounds:
        oracle = bounds.BoundPair.from_csv(args.oracle_bounds)
        report.oracle_mse, report.oracle_coverage = metrics.oracle_comparison(pair, oracle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    (out / "metrics.txt").write_text(report.render_text())
    print(report.render_text(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    report = experiments.run_experiment(
        args.dataset, args.method, args.k, args.seed, n=args.n,
        out_dir=Path(args.out) / f"d{args.dataset}_{args.method}_k{args.k}_seed{args.seed}",
        overrides=_overrides(args),
    )
    print(report.render_text(), end="")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    rows, _ = experiments.reproduce_table(
        args.table, Path(args.out), seeds=tuple(args.seeds), n=args.n, jobs=args.jobs,
        overrides=_overrides(args) or None,
    )
    print(experiments.render_table(rows), end="")
    print(f"wrote {args.out}/table{args.table}.csv and .txt")
    return EXIT_OK


def cmd_checks(args) -> int:
    if args.fast:
        results = []
        results.extend(checks.gradient_checks())
        results.extend(checks.bound_identity_checks())
        results.extend(checks.quadrature_agreement_check(n=20_000))
        results.extend(checks.variance_checks(replicates=2_000))
        results.extend(checks.decomposition_checks(replicates=400))
    else:
        results = checks.run_all_checks()
    failed = 0
    for result in results:
        print(result.line())
        failed += 0 if result.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivbounds", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val/test CSVs for a synthetic dataset")
    p.add_argument("--dataset", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-nuisance", help="first stage: fit mu/pi/eta nets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_fit_nuisance)

    p = sub.add_parser("fit-partition", help="second stage: train the partition net")
    p.add_argument("--data", required=True)
    p.add_argument("--nuisance", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_fit_partition)

    p = sub.add_parser("bounds", help="evaluate bounds on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("ours", "oracle"), default="ours")
    p.add_argument("--nuisance")
    p.add_argument("--partition")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("evaluate", help="metrics from a bounds CSV")
    p.add_argument("--bounds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-bounds")
    p.add_argument("--dataset", type=int)
    p.add_argument("--method")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="end-to-end single run")
    p.add_argument("--dataset", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--method", choices=("ours", "naive", "oracle"), default="ours")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reproduce", help="regenerate a results table over seed sweeps")
    p.add_argument("--table", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("checks", help="run the verification suite")
    p.add_argument("--fast", action="store_true", help="reduced replicate counts")
    p.set_defaults(func=cmd_checks)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _load_config_file(args)
        return args.func(args)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (
        autodiff.NonFiniteError,
        bounds.QuadratureError,
        bounds.EmptyCellError,
        FloatingPointError,
        ArithmeticError,
    ) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # argparse handles usage; anything else is a bug
        from .nets import TrainingAbort

        if isinstance(exc, TrainingAbort):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
