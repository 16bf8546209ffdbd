"""Build the desk-scale benchmark and run every experiment into one directory.

    python3 scripts/run_benchmark.py --out runs/bench
    python3 scripts/run_benchmark.py --out runs/quick --quick
"""

import argparse
import logging
import time
from pathlib import Path

from flmface import harness
from flmface.attack import AttackConfig
from flmface.defense import DefenseConfig, adversarial_train
from flmface.facegen import read_dataset
from flmface.harness import BenchmarkConfig, ExperimentConfig
from flmface.victim import TrainConfig, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=200, help="correctly classified test samples per experiment")
    ap.add_argument("--quick", action="store_true", help="small dataset and short training, for smoke runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    bench = BenchmarkConfig(seed=args.seed, train=TrainConfig(seed=args.seed, weight_decay=3e-3))
    defense_epochs = 10
    if args.quick:
        bench.n_classes, bench.per_class, bench.train.epochs = 5, 40, 8
        defense_epochs = 3
    out = args.out
    t0 = time.perf_counter()
    ds = harness.generate_benchmark_data(bench, out / "data")
    model = harness.train_victim(ds, bench.train)
    save_checkpoint(model, out / "victim.fgck")
    logging.info("victim: test accuracy %.4f (%.0fs)", model.metadata["test_accuracy"], time.perf_counter() - t0)

    defended = {"none": str(out / "victim.fgck")}
    ds = read_dataset(out / "data")
    for name, kind in (("FGSM-AT", "fgsm_at"), ("PGD-AT", "pgd_at")):
        cfg = DefenseConfig(kind, train=TrainConfig(epochs=defense_epochs, seed=args.seed, weight_decay=3e-3))
        m = adversarial_train(model.descriptor, ds.x(ds.train_idx), ds.labels[ds.train_idx], cfg,
                              ds.x(ds.test_idx), ds.labels[ds.test_idx])
        defended[name] = str(out / f"{kind}.fgck")
        save_checkpoint(m, defended[name])
        logging.info("%s: test accuracy %.4f", name, m.metadata["test_accuracy"])

    base = dict(dataset=str(out / "data"), checkpoint=str(out / "victim.fgck"), out=str(out / "results"),
                seed=args.seed, max_samples=args.samples)
    harness.run_whitebox(ExperimentConfig(**base, timing_repeats=3, dump_images=5))
    harness.run_per_region(ExperimentConfig(**base, kind="per_region"))
    harness.run_sweep(ExperimentConfig(**base, kind="sweep"))
    attacks = [AttackConfig("fgsm", eps=0.03, max_iters=1), AttackConfig("fgsm", eps=0.03, max_iters=10),
               AttackConfig("flm"), AttackConfig("gflm")]
    harness.run_defense_eval(ExperimentConfig(**base, kind="defense", attacks=attacks, defended=defended))
    print(harness.report(out / "results"), end="")
    logging.info("total %.0fs", time.perf_counter() - t0)


if __name__ == "__main__":
    main()
