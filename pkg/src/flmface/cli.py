"""Command line entry point: ``flmface <subcommand> [flags]``.

Any subcommand accepts ``--config file.json`` whose keys are flag names
(dashes or underscores); flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attack import AttackConfig
from .defense import DefenseConfig, adversarial_train
from .facegen import read_dataset
from .harness import (
    BenchmarkConfig,
    ConfigError,
    ExperimentConfig,
    ReportError,
    SWEEP_VARIABLES,
    generate_benchmark_data,
    report,
    run_experiment,
    train_victim,
)
from .victim import ArchitectureDescriptor, TrainConfig, save_checkpoint

log = logging.getLogger("flmface")


def _int_list(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _on_off(text):
    v = str(text).lower()
    if v in ("1", "on", "true", "yes"):
        return True
    if v in ("0", "off", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_train_flags(p, epochs=30, weight_decay=3e-3):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=weight_decay)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flmface", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON file with flag values")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("gen-data", "render the synthetic face dataset")
    p.add_argument("--out", default="data")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--layout", choices=["compact", "full68"], default="compact")
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--split", type=float, default=0.8)

    p = command("train", "train the victim classifier")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="victim.fgck")
    _add_train_flags(p)

    p = command("advtrain", "adversarially train a defended victim")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="defended.fgck")
    p.add_argument("--kind", choices=["fgsm_at", "pgd_at"], default="fgsm_at")
    p.add_argument("--eps", type=float, default=0.03)
    p.add_argument("--pgd-steps", type=int, default=7)
    p.add_argument("--pgd-step-size", type=float, default=None)
    p.add_argument("--adv-fraction", type=float, default=0.5)
    _add_train_flags(p, epochs=10)

    p = command("attack", "run white-box, per-region or defense experiments")
    p.add_argument("--data", default="data")
    p.add_argument("--checkpoint", default="victim.fgck")
    p.add_argument("--out", default="results")
    p.add_argument("--experiment", choices=["whitebox", "per_region", "defense"], default="whitebox")
    p.add_argument("--method", default="flm,gflm", help="comma list of flm, gflm, fgsm")
    p.add_argument("--lambda-flow", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--regions", type=_int_list, default=None, help="comma list of group ids 1-5")
    p.add_argument("--symmetry", type=_on_off, default=True)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--timing-repeats", type=int, default=1)
    p.add_argument("--dump-images", type=int, default=0, help="visualize the first N samples")
    p.add_argument("--defended", action="append", default=None, metavar="NAME=CHECKPOINT")

    p = command("sweep", "probability of the true class while editing one facial property")
    p.add_argument("--data", default="data")
    p.add_argument("--checkpoint", default="victim.fgck")
    p.add_argument("--out", default="results")
    p.add_argument("--variables", type=_int_list, default=tuple(SWEEP_VARIABLES))
    p.add_argument("--range", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--max-samples", type=int, default=None)

    p = command("report", "print result tables from a results directory")
    p.add_argument("dir", nargs="?", default="results")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            values = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for key in ("regions", "variables"):
            if isinstance(values.get(key), list):
                values[key] = tuple(values[key])
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, momentum=args.momentum, epochs=args.epochs, batch=args.batch,
                       seed=args.seed, weight_decay=args.weight_decay)


def _attack_configs(args) -> list[AttackConfig]:
    configs = []
    for method in args.method.split(","):
        kw = {"method": method.strip(), "regions": args.regions, "symmetry": args.symmetry, "seed": args.seed}
        for name in ("eps", "lambda_flow", "max_iters"):
            if getattr(args, name) is not None:
                kw[name] = getattr(args, name)
        if kw["method"] == "fgsm":
            kw.setdefault("eps", 0.03)
            kw.setdefault("max_iters", 1)
        configs.append(AttackConfig(**kw))
    return configs


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ReportError, FileNotFoundError, ValueError) as exc:
        print(f"flmface: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gen-data":
        cfg = BenchmarkConfig(args.classes, args.per_class, args.size, args.layout, args.margin, args.split, args.seed)
        ds = generate_benchmark_data(cfg, args.out)
        print(f"wrote {len(ds)} samples to {args.out}")
    elif args.command == "train":
        ds = read_dataset(args.data)
        model = train_victim(ds, _train_config(args))
        save_checkpoint(model, args.out)
        m = model.metadata
        print(f"train acc {m['train_accuracy']:.4f} test acc {m.get('test_accuracy', float('nan')):.4f} -> {args.out}")
    elif args.command == "advtrain":
        ds = read_dataset(args.data)
        h, w, c = ds.images.shape[1:]
        d = ArchitectureDescriptor.default(ds.n_classes, (h, w, c))
        cfg = DefenseConfig(args.kind, args.eps, args.pgd_steps, args.pgd_step_size, args.adv_fraction, _train_config(args))
        model = adversarial_train(d, ds.x(ds.train_idx), ds.labels[ds.train_idx], cfg,
                                  ds.x(ds.test_idx), ds.labels[ds.test_idx])
        save_checkpoint(model, args.out)
        m = model.metadata
        print(f"{args.kind}: train acc {m['train_accuracy']:.4f} test acc {m.get('test_accuracy', float('nan')):.4f} -> {args.out}")
    elif args.command == "attack":
        defended = {}
        for item in args.defended or []:
            name, sep, path = item.partition("=")
            if not sep:
                raise ConfigError(f"--defended expects NAME=CHECKPOINT, got {item!r}")
            defended[name] = path
        cfg = ExperimentConfig(args.experiment, args.data, args.checkpoint, _attack_configs(args), args.out,
                               args.seed, args.max_samples, args.timing_repeats, args.dump_images,
                               defended=defended)
        run_experiment(cfg)
        sys.stdout.write(report(args.out))
    elif args.command == "sweep":
        cfg = ExperimentConfig("sweep", args.data, args.checkpoint, [], args.out, args.seed, args.max_samples,
                               sweep_variables=args.variables, sweep_range=args.range, sweep_steps=args.steps)
        run_experiment(cfg)
        sys.stdout.write(report(args.out))
    elif args.command == "report":
        out = Path(args.dir)
        sys.stdout.write(report(out) if out.is_dir() else "no results\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
