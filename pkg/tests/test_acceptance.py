"""End-to-end acceptance checks on the frozen desk-scale benchmark.

The benchmark is 20 synthetic face classes at 64x64 with the 23-landmark
layout, generated and trained from fixed seeds inside this module. Each test
carries a ``criterion`` marker; the terminal summary prints one PASS/FAIL line
per criterion.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from flmface import harness, tps
from flmface.attack import ALPHA_MIN, AttackConfig, group_fit, total_loss, total_loss_grad
from flmface.defense import DefenseConfig, adversarial_train
from flmface.facegen import read_dataset
from flmface.harness import BenchmarkConfig, ExperimentConfig, read_csv
from flmface.tps import DegenerateConfigurationError
from flmface.victim import TrainConfig, load_checkpoint, save_checkpoint

from oracles import (
    central_difference,
    gradient_instance,
    numeric_group_fit,
    relative_error,
    small_victim,
)

EVAL_SAMPLES = 200
REGION_SAMPLES = 100
DEFENSE_SAMPLES = 100
SWEEP_SAMPLES = 100
DEFENSE_EPOCHS = 10


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# --- fixtures -----------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    cfg = BenchmarkConfig()
    start = time.perf_counter()
    ds = harness.generate_benchmark_data(cfg, root / "data")
    model = harness.train_victim(ds, cfg.train)
    save_checkpoint(model, root / "victim.fgck")
    return {"root": root, "cfg": cfg, "build_s": time.perf_counter() - start,
            "test_accuracy": model.metadata["test_accuracy"]}


def bench_exp(benchmark, out, **kw):
    root = benchmark["root"]
    base = dict(dataset=str(root / "data"), checkpoint=str(root / "victim.fgck"), out=str(root / out),
                seed=benchmark["cfg"].seed)
    return ExperimentConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def whitebox(benchmark):
    start = time.perf_counter()
    rows = harness.run_whitebox(bench_exp(benchmark, "whitebox", max_samples=EVAL_SAMPLES, timing_repeats=3))
    wb_s = time.perf_counter() - start
    start = time.perf_counter()
    regions = harness.run_per_region(bench_exp(benchmark, "per_region", max_samples=REGION_SAMPLES))
    return {"rows": {r.method: r for r in rows}, "regions": regions, "whitebox_s": wb_s,
            "regions_s": time.perf_counter() - start}


# --- 1: end-to-end gradient ------------------------------------------------------


@pytest.mark.criterion(1, "end-to-end gradient vs finite differences")
def test_gradient_oracle_suite(request):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for n in range(100):
        size = int(rng.integers(8, 33))
        k = int(rng.integers(4, 13))
        model = small_victim(size, n_classes=5, seed=n)
        x, P, P_adv = gradient_instance(rng, size, k)
        c = int(rng.integers(0, 5))
        lam = float(rng.choice([0.0, 1.0, 100.0]))
        g = total_loss_grad(P, P_adv, x, c, lam, model)
        fd = central_difference(lambda z: total_loss(P, z, x, c, lam, model), P_adv, 1e-7)
        worst = max(worst, relative_error(g, fd))
    elapsed = time.perf_counter() - start
    detail(request, f"100 instances, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 120


# --- 2: TPS ------------------------------------------------------------------------


@pytest.mark.criterion(2, "thin-plate spline suite")
def test_tps_suite(request):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst_interp = worst_radial = worst_identity = 0.0
    done = 0
    while done < 1000:
        k = int(rng.integers(3, 30))
        sites = rng.uniform(-1, 1, size=(k, 2))
        targets = sites + rng.normal(0, 0.1, size=sites.shape)
        try:
            t = tps.tps_fit(sites, targets)
        except DegenerateConfigurationError:
            continue
        worst_interp = max(worst_interp, np.max(np.abs(tps.tps_eval(t, sites) - targets)))
        A = rng.normal(size=(2, 2))
        b = rng.normal(size=2)
        affine = tps.tps_fit(sites, sites @ A.T + b)
        worst_radial = max(worst_radial, np.max(np.abs(affine.radial_weights)))
        if done % 10 == 0:
            x = rng.random((int(rng.integers(2, 20)), int(rng.integers(2, 20)), 1))
            worst_identity = max(worst_identity, np.max(np.abs(tps.warp_image(x, sites, sites) - x)))
        done += 1
    elapsed = time.perf_counter() - start
    detail(request, f"interp {worst_interp:.1e}, radial {worst_radial:.1e}, identity {worst_identity:.1e}, {elapsed:.1f}s")
    assert worst_interp < 1e-9
    assert worst_radial < 1e-10
    assert worst_identity < 1e-12
    assert elapsed < 30


# --- 3: closed-form group fit ----------------------------------------------------


@pytest.mark.criterion(3, "closed-form group fit")
def test_group_fit_suite(request):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_fit = worst_repro = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 21))
        P = rng.uniform(-0.9, 0.9, size=(n, 2))
        f = rng.normal(0, 0.03, size=(n, 2))
        a, b = group_fit(P, f)
        na, nb = numeric_group_fit(P, f, ALPHA_MIN)
        worst_fit = max(worst_fit, np.max(np.abs(a - na)), np.max(np.abs(b - nb)))
        alpha, beta = rng.uniform(0.5, 1.5, 2), rng.uniform(-0.5, 0.5, 2)
        target = alpha * (P - P.mean(axis=0)) + beta
        a, b = group_fit(P, target - P)
        worst_repro = max(worst_repro, np.max(np.abs(a * (P - P.mean(axis=0)) + b - target)))
    elapsed = time.perf_counter() - start
    detail(request, f"oracle gap {worst_fit:.1e}, reproduction {worst_repro:.1e}, {elapsed:.1f}s")
    assert worst_fit < 1e-8
    assert worst_repro < 1e-8
    assert elapsed < 10


# --- 4, 5, 8: white-box benchmark ------------------------------------------------


@pytest.mark.criterion(4, "undefended white-box success and iterations")
def test_undefended_whitebox(request, benchmark, whitebox):
    flm, gflm = whitebox["rows"]["flm"], whitebox["rows"]["gflm"]
    total = benchmark["build_s"] + whitebox["whitebox_s"] + whitebox["regions_s"]
    detail(request, f"FLM SR {flm.sr:.2f}% n_bar {flm.n_bar:.2f}; GFLM SR {gflm.sr:.2f}% n_bar {gflm.n_bar:.2f}; "
                    f"{flm.n_samples} samples; clean test acc {benchmark['test_accuracy']:.3f}; {total:.0f}s")
    assert flm.sr >= 95.0
    assert gflm.sr >= 95.0
    assert gflm.n_bar > flm.n_bar
    assert total < 600


@pytest.mark.criterion(5, "all regions beat every single region")
def test_per_region(request, whitebox):
    rows = whitebox["regions"]
    summary = []
    ok = True
    for method in ("flm", "gflm"):
        mine = {r.region: r.sr for r in rows if r.method == method}
        best_single = max(v for k, v in mine.items() if k != harness.ALL_REGIONS)
        ok &= mine[harness.ALL_REGIONS] > best_single
        summary.append(f"{method}: all {mine[harness.ALL_REGIONS]:.0f}% vs best single {best_single:.0f}%")
    detail(request, "; ".join(summary))
    assert ok


@pytest.mark.criterion(8, "attack wall time")
def test_timing(request, whitebox):
    flm, gflm = whitebox["rows"]["flm"], whitebox["rows"]["gflm"]
    detail(request, f"FLM {1000 * flm.time_s:.1f} ms, GFLM {1000 * gflm.time_s:.1f} ms (median of 3 per sample)")
    assert flm.time_s < gflm.time_s
    assert flm.time_s < 0.1


# --- 6: sweep ----------------------------------------------------------------------


@pytest.mark.criterion(6, "geometry sweep peaks at the true geometry")
def test_sweep_peaks(request, benchmark):
    start = time.perf_counter()
    cfg = bench_exp(benchmark, "sweep", kind="sweep", max_samples=SWEEP_SAMPLES)
    curves = harness.run_sweep(cfg)
    elapsed = time.perf_counter() - start
    zero = cfg.sweep_steps // 2
    peaks = {v: int(np.argmax(mean)) - zero for v, (_, mean) in curves.items()}
    detail(request, "peak step offsets " + " ".join(f"{v}:{p:+d}" for v, p in peaks.items()) + f"; {elapsed:.0f}s")
    assert all(abs(p) <= 2 for p in peaks.values())
    assert elapsed < 300


# --- 7: defenses -------------------------------------------------------------------


@pytest.mark.criterion(7, "attack ordering under adversarial training")
def test_defense_ordering(request, benchmark):
    root = benchmark["root"]
    start = time.perf_counter()
    ds = read_dataset(root / "data")
    descriptor = load_checkpoint(root / "victim.fgck").descriptor
    train_cfg = TrainConfig(epochs=DEFENSE_EPOCHS, weight_decay=benchmark["cfg"].train.weight_decay)
    defended = {}
    for name, kind in (("FGSM-AT", "fgsm_at"), ("PGD-AT", "pgd_at")):
        model = adversarial_train(descriptor, ds.x(ds.train_idx), ds.labels[ds.train_idx],
                                  DefenseConfig(kind, train=train_cfg))
        defended[name] = str(root / f"{kind}.fgck")
        save_checkpoint(model, defended[name])
    attacks = [AttackConfig("fgsm", eps=0.03, max_iters=1), AttackConfig("flm"), AttackConfig("gflm")]
    cfg = bench_exp(benchmark, "defense", kind="defense", attacks=attacks, defended=defended,
                    max_samples=DEFENSE_SAMPLES)
    table = harness.run_defense_eval(cfg)
    elapsed = time.perf_counter() - start
    sr = {(d, a): v for d, a, v, _ in table}
    detail(request, "; ".join(f"{d}: GFLM {sr[d, 'GFLM']:.0f} FLM {sr[d, 'FLM']:.0f} FGSM {sr[d, 'FGSM']:.0f}"
                              for d in defended) + f"; {elapsed:.0f}s")
    for d in defended:
        assert sr[d, "GFLM"] >= sr[d, "FLM"] + 5
        assert sr[d, "FLM"] >= sr[d, "FGSM"] + 5
    assert elapsed < 1200


# --- 9: determinism ----------------------------------------------------------------


def _pipeline(out: Path):
    cfg = BenchmarkConfig(n_classes=4, per_class=12, size=32, seed=5, train=TrainConfig(epochs=3, seed=5, weight_decay=3e-3))
    ds = harness.generate_benchmark_data(cfg, out / "data")
    save_checkpoint(harness.train_victim(ds, cfg.train), out / "victim.fgck")
    model = adversarial_train(load_checkpoint(out / "victim.fgck").descriptor, ds.x(ds.train_idx),
                              ds.labels[ds.train_idx],
                              DefenseConfig("pgd_at", pgd_steps=2, train=TrainConfig(epochs=1, seed=5)))
    save_checkpoint(model, out / "pgd.fgck")
    base = dict(dataset=str(out / "data"), checkpoint=str(out / "victim.fgck"), out=str(out / "res"), seed=5)
    few = [AttackConfig("flm", max_iters=5), AttackConfig("gflm", max_iters=5), AttackConfig("fgsm", eps=0.03)]
    harness.run_whitebox(ExperimentConfig(**base, attacks=few, dump_images=2))
    harness.run_per_region(ExperimentConfig(**base, kind="per_region", attacks=few[:2]))
    harness.run_sweep(ExperimentConfig(**base, kind="sweep", sweep_steps=5))
    harness.run_defense_eval(ExperimentConfig(**base, kind="defense", attacks=few, defended={"PGD-AT": str(out / "pgd.fgck")}))


def _without_time(path):
    meta, header, rows = read_csv(path)
    keep = [i for i, h in enumerate(header) if h != harness.TIME_COLUMN]
    return meta, [header[i] for i in keep], [[r[i] for i in keep] for r in rows]


@pytest.mark.criterion(9, "byte-identical reruns")
def test_determinism(request, tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    csvs = [f for f in files if f.suffix == ".csv"]
    mismatched = []
    for f in files:
        a, b = tmp_path / "a" / f, tmp_path / "b" / f
        if f.suffix == ".csv":
            same = _without_time(a) == _without_time(b)
        else:
            same = a.read_bytes() == b.read_bytes()
        if not same:
            mismatched.append(str(f))
    detail(request, f"{len(csvs)} CSVs and {len(files) - len(csvs)} other files compared; mismatches: {mismatched or 'none'}")
    assert len(csvs) >= 7
    assert not mismatched
