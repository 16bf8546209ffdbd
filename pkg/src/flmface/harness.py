"""Experiment orchestration: white-box runs, per-region runs, geometry sweeps,
defense evaluation, CSV persistence and the text report.

Every CSV starts with a ``# flmface format=<n> kind=<kind> seed=<seed>``
comment line, then a header row. Floats are written with six significant
digits, booleans as 0/1. Columns named ``time_s`` hold wall-clock timings and
are the only values that differ between reruns of the same config.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tps
from .attack import AttackConfig, AttackResult, run_attack
from .defense import evaluate_under_defense
from .facegen import GROUP_NAMES, Dataset, Jitter, build_dataset, make_classes, read_dataset
from .imagegrid import pixel_grid, write_pnm
from .tps import LandmarkSet
from .victim import ArchitectureDescriptor, TrainConfig, VictimModel, load_checkpoint, predict_logits, train

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TIME_COLUMN = "time_s"
ALL_REGIONS = "all"

SWEEP_VARIABLES = {
    1: "eye_distance",
    2: "eye_height",
    3: "nose_horizontal",
    4: "mouth_horizontal",
    5: "jaw_scale",
    6: "mouth_scale",
    7: "nose_scale",
    8: "eye_scale",
}

METRICS_COLUMNS = ["method", "region", "n_bar", "sr", "p_true", TIME_COLUMN, "n_samples"]
SAMPLE_COLUMNS = ["method", "region", "sample", "label", "success", "iterations", "p_true", "pred", TIME_COLUMN, "error"]


class ConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


# --- configs ------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """The frozen desk-scale benchmark: synthetic faces plus a trained victim."""

    n_classes: int = 20
    per_class: int = 200
    size: int = 64
    layout: str = "compact"
    margin: float = 0.5
    split: float = 0.8
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(weight_decay=3e-3))


@dataclass
class ExperimentConfig:
    kind: str = "whitebox"
    dataset: str = "data"
    checkpoint: str = "victim.fgck"
    attacks: list = field(default_factory=lambda: [AttackConfig("flm"), AttackConfig("gflm")])
    out: str = "results"
    seed: int = 0
    max_samples: int | None = None
    timing_repeats: int = 1
    dump_images: int = 0
    sweep_variables: tuple = tuple(SWEEP_VARIABLES)
    sweep_range: float = 0.3
    sweep_steps: int = 25
    defended: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("whitebox", "per_region", "sweep", "defense"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.timing_repeats < 1:
            raise ConfigError("timing_repeats must be >= 1")
        if self.sweep_steps < 2:
            raise ConfigError("sweep_steps must be >= 2")
        bad = set(self.sweep_variables) - set(SWEEP_VARIABLES)
        if bad:
            raise ConfigError(f"unknown sweep variables {sorted(bad)}")


@dataclass
class MetricsRow:
    method: str
    region: str
    n_bar: float
    sr: float
    p_true: float
    time_s: float
    n_samples: int

    def as_list(self):
        return [self.method, self.region, self.n_bar, self.sr, self.p_true, self.time_s, self.n_samples]


# --- CSV ------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.6g" % v
    return str(v)


def write_csv(path, kind: str, seed: int, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# flmface format={FORMAT_VERSION} kind={kind} seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    return path


def read_csv(path):
    """Return ``(meta, header, rows)``; rows are lists of strings."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("# flmface "):
        raise ReportError(f"{path}:1: missing '# flmface' metadata line")
    meta = {}
    for token in lines[0][len("# flmface "):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ReportError(f"{path}:1: malformed metadata token {token!r}")
        meta[key] = value
    if meta.get("format") != str(FORMAT_VERSION):
        raise ReportError(f"{path}:1: unsupported format {meta.get('format')!r}")
    body = [line for line in lines[1:]]
    if body and body[-1] == "":
        body.pop()
    if not body:
        raise ReportError(f"{path}:2: missing header row")
    parsed = list(csv.reader(body))
    header, rows = parsed[0], parsed[1:]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ReportError(f"{path}:{i + 3}: expected {len(header)} fields, got {len(row)}")
    return meta, header, rows


# --- data and models ------------------------------------------------------------


def generate_benchmark_data(cfg: BenchmarkConfig, out_dir) -> Dataset:
    templates = make_classes(cfg.n_classes, cfg.layout, cfg.seed, cfg.margin)
    return build_dataset(templates, cfg.per_class, cfg.split, cfg.seed, Jitter(), (cfg.size, cfg.size), out_dir)


def train_victim(ds: Dataset, cfg: TrainConfig) -> VictimModel:
    h, w, c = ds.images.shape[1:]
    d = ArchitectureDescriptor.default(ds.n_classes, (h, w, c))
    return train(d, ds.x(ds.train_idx), ds.labels[ds.train_idx], cfg, ds.x(ds.test_idx), ds.labels[ds.test_idx])


def _load_inputs(cfg: ExperimentConfig, checkpoint=None):
    data = Path(cfg.dataset)
    ck = Path(checkpoint or cfg.checkpoint)
    if not (data / "dataset.fgds").exists():
        raise ConfigError(f"dataset not found: {data / 'dataset.fgds'}")
    if not ck.exists():
        raise ConfigError(f"checkpoint not found: {ck}")
    return read_dataset(data), load_checkpoint(ck)


def correct_samples(ds: Dataset, model: VictimModel, max_samples=None) -> np.ndarray:
    """Test indices the model classifies correctly, evenly thinned to ``max_samples``."""
    idx = ds.test_idx
    pred = np.argmax(predict_logits(model, ds.x(idx)), axis=1) if len(idx) else np.array([], dtype=int)
    ok = idx[pred == ds.labels[idx]]
    if max_samples is not None and len(ok) > max_samples:
        stride = len(ok) // max_samples
        ok = ok[::stride][:max_samples]
    return ok


# --- metrics --------------------------------------------------------------------


def region_label(regions) -> str:
    if regions is None:
        return ALL_REGIONS
    return "+".join(GROUP_NAMES.get(r, str(r)) for r in regions)


def aggregate(method: str, region: str, results) -> MetricsRow:
    """n_bar averages iterations over successful samples only."""
    results = list(results)
    if not results:
        return MetricsRow(method, region, 0.0, 0.0, 0.0, 0.0, 0)
    wins = [r.iterations for r in results if r.success]
    return MetricsRow(
        method,
        region,
        float(np.mean(wins)) if wins else 0.0,
        100.0 * len(wins) / len(results),
        float(np.mean([r.p_true for r in results])),
        float(np.mean([r.duration for r in results])),
        len(results),
    )


def _timed_attack(x, P, c, model, acfg, repeats) -> AttackResult:
    res = run_attack(x, P, c, model, acfg)
    if repeats > 1:
        times = [res.duration] + [run_attack(x, P, c, model, acfg).duration for _ in range(repeats - 1)]
        res.duration = statistics.median(times)
    return res


def field_image(shape, P, P_adv, gain: float = 4.0) -> np.ndarray:
    """RGB picture of the backward-mapping displacement at every pixel."""
    h, w = shape[:2]
    grid = pixel_grid(h, w)
    disp = tps.tps_eval(tps.tps_fit(P_adv, P), grid) - grid
    rgb = np.empty((h * w, 3))
    rgb[:, :2] = 0.5 + gain * disp
    rgb[:, 2] = 0.5
    return np.clip(rgb, 0.0, 1.0).reshape(h, w, 3)


def _attack_set(ds, model, idx, acfg: AttackConfig, repeats: int):
    out = []
    for i in idx:
        out.append(_timed_attack(ds.x(i), ds.landmark_set(i), int(ds.labels[i]), model, acfg, repeats))
    return out


def _sample_rows(method, region, ds, idx, results):
    for i, r in zip(idx, results):
        yield [method, region, int(ds.sample_ids[i]), int(ds.labels[i]), r.success, r.iterations,
               r.p_true, r.pred_class, r.duration, r.error]


def _dump_images(out_dir, method, ds, idx, results, count):
    img_dir = Path(out_dir) / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, r in list(zip(idx, results))[:count]:
        sid = int(ds.sample_ids[i])
        write_pnm(img_dir / f"{sid:05d}_original.pgm", ds.x(i))
        write_pnm(img_dir / f"{sid:05d}_{method}_adversarial.pgm", np.clip(r.x_adv, 0.0, 1.0))
        if r.P_adv is not None:
            write_pnm(img_dir / f"{sid:05d}_{method}_field.ppm", field_image(r.x_adv.shape, ds.landmark_set(i).points, r.P_adv))


def _run_attacks(cfg: ExperimentConfig, configs, stem: str):
    ds, model = _load_inputs(cfg)
    idx = correct_samples(ds, model, cfg.max_samples)
    out = Path(cfg.out)
    metrics, samples = [], []
    for acfg in configs:
        region = region_label(acfg.regions)
        log.info("%s on %s: %d samples", acfg.method, region, len(idx))
        results = _attack_set(ds, model, idx, acfg, cfg.timing_repeats)
        metrics.append(aggregate(acfg.method, region, results))
        samples.extend(_sample_rows(acfg.method, region, ds, idx, results))
        if cfg.dump_images and stem == "whitebox":
            _dump_images(out, acfg.method, ds, idx, results, cfg.dump_images)
    if not len(idx):
        log.warning("no correctly classified test samples; metrics are empty")
    write_csv(out / f"{stem}_samples.csv", stem, cfg.seed, SAMPLE_COLUMNS, samples)
    write_csv(out / f"{stem}_metrics.csv", stem, cfg.seed, METRICS_COLUMNS, [m.as_list() for m in metrics])
    return metrics


def run_whitebox(cfg: ExperimentConfig) -> list[MetricsRow]:
    return _run_attacks(cfg, cfg.attacks, "whitebox")


def run_per_region(cfg: ExperimentConfig) -> list[MetricsRow]:
    """Each attack restricted to every single group in turn, then to all groups."""
    configs = []
    for acfg in cfg.attacks:
        n_groups = len(GROUP_NAMES)
        for r in list(range(1, n_groups + 1)) + [None]:
            configs.append(AttackConfig(**{**asdict(acfg), "regions": None if r is None else (r,)}))
    return _run_attacks(cfg, configs, "per_region")


# --- geometry sweep -------------------------------------------------------------


def edit_landmarks(P: LandmarkSet, variable: int, offset: float) -> np.ndarray:
    """Move one facial property of ``P`` by ``offset`` normalized units (or
    relative scale for the scale variables)."""
    pts = P.points.copy()
    if offset == 0.0:
        return pts
    eyes_r, eyes_l = P.members(2), P.members(3)

    def scale(idx):
        c = pts[idx].mean(axis=0)
        pts[idx] = c + (1.0 + offset) * (pts[idx] - c)

    if variable == 1:
        pts[eyes_r, 0] -= 0.5 * offset
        pts[eyes_l, 0] += 0.5 * offset
    elif variable == 2:
        pts[np.r_[eyes_r, eyes_l], 1] += offset
    elif variable == 3:
        pts[P.members(4), 0] += offset
    elif variable == 4:
        pts[P.members(5), 0] += offset
    elif variable == 5:
        scale(P.members(1))
    elif variable == 6:
        scale(P.members(5))
    elif variable == 7:
        scale(P.members(4))
    elif variable == 8:
        scale(eyes_r)
        scale(eyes_l)
    else:
        raise ValueError(f"unknown sweep variable {variable}")
    return pts


def sweep_offsets(cfg: ExperimentConfig) -> np.ndarray:
    offs = np.linspace(-cfg.sweep_range, cfg.sweep_range, cfg.sweep_steps)
    if cfg.sweep_steps % 2:
        offs[cfg.sweep_steps // 2] = 0.0
    return offs


def run_sweep(cfg: ExperimentConfig):
    """Mean true-class probability against each property offset.

    Returns ``{variable: (offsets, mean_curve)}`` and writes ``sweep.csv`` plus
    the per-sample ``sweep_samples.csv``.
    """
    ds, model = _load_inputs(cfg)
    idx = correct_samples(ds, model, cfg.max_samples)
    offsets = sweep_offsets(cfg)
    curves, summary, per_sample = {}, [], []
    for var in cfg.sweep_variables:
        probs = np.zeros((len(idx), len(offsets)))
        for row, i in enumerate(idx):
            x, P, c = ds.x(i), ds.landmark_set(i), int(ds.labels[i])
            batch = []
            for off in offsets:
                edited = edit_landmarks(P, var, off)
                batch.append(x if off == 0.0 else tps.warp_image(x, P.points, edited))
            logits = predict_logits(model, np.asarray(batch))
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs[row] = e[:, c] / e.sum(axis=1)
            for off, p in zip(offsets, probs[row]):
                per_sample.append([var, int(ds.sample_ids[i]), off, p])
        mean = probs.mean(axis=0) if len(idx) else np.zeros(len(offsets))
        curves[var] = (offsets, mean)
        for off, p in zip(offsets, mean):
            summary.append([var, SWEEP_VARIABLES[var], off, p, len(idx)])
    out = Path(cfg.out)
    write_csv(out / "sweep.csv", "sweep", cfg.seed, ["variable", "name", "offset", "mean_p_true", "n_samples"], summary)
    write_csv(out / "sweep_samples.csv", "sweep", cfg.seed, ["variable", "sample", "offset", "p_true"], per_sample)
    return curves


# --- defenses -------------------------------------------------------------------


def run_defense_eval(cfg: ExperimentConfig):
    """One row per (defense, attack): success rate over the samples that the
    defended model classifies correctly."""
    if not cfg.defended:
        raise ConfigError("no defended checkpoints given")
    table, samples = [], []
    attacks = {attack_name(a): a for a in cfg.attacks}
    for name, ck in cfg.defended.items():
        ds, model = _load_inputs(cfg, ck)
        idx = correct_samples(ds, model, cfg.max_samples)
        items = [(ds.x(i), ds.landmark_set(i), int(ds.labels[i])) for i in idx]
        report = evaluate_under_defense(model, items, attacks)
        for label in attacks:
            results = report.results.get(label, [])
            sr = report.rates.get(label, 0.0)
            assert sr == aggregate(label, ALL_REGIONS, results).sr
            table.append([name, label, sr, len(results)])
            samples.extend(_sample_rows(label, name, ds, idx, results))
    out = Path(cfg.out)
    write_csv(out / "defense.csv", "defense", cfg.seed, ["defense", "attack", "sr", "n_samples"], table)
    write_csv(out / "defense_samples.csv", "defense", cfg.seed,
              ["attack", "defense"] + SAMPLE_COLUMNS[2:], samples)
    return table


def attack_name(cfg: AttackConfig) -> str:
    if cfg.method == "fgsm" and cfg.max_iters > 1:
        return f"FGSM-{cfg.max_iters}"
    return cfg.method.upper()


def run_experiment(cfg: ExperimentConfig):
    return {
        "whitebox": run_whitebox,
        "per_region": run_per_region,
        "sweep": run_sweep,
        "defense": run_defense_eval,
    }[cfg.kind](cfg)


# --- report ---------------------------------------------------------------------


def _table(header, rows) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(line.rstrip() for line in lines)


def report(out_dir) -> str:
    """Text rendering of every metrics and defense CSV under ``out_dir``."""
    out = Path(out_dir)
    parts = []
    for path in sorted(out.glob("*_metrics.csv")):
        meta, header, rows = read_csv(path)
        if header != METRICS_COLUMNS:
            raise ReportError(f"{path}:2: unexpected columns {header}")
        shown = [[r[0], r[1], r[2], r[3], r[4], r[5]] for r in rows]
        title = f"{meta.get('kind', path.stem)} (seed {meta.get('seed', '?')})"
        parts.append(title + "\n" + _table(["method", "region", "n_bar", "SR%", "pT", "time_s"], shown))
    defense = out / "defense.csv"
    if defense.exists():
        meta, header, rows = read_csv(defense)
        if header != ["defense", "attack", "sr", "n_samples"]:
            raise ReportError(f"{defense}:2: unexpected columns {header}")
        attacks = list(dict.fromkeys(r[1] for r in rows))
        by_def = {}
        for r in rows:
            by_def.setdefault(r[0], {})[r[1]] = r[2]
        shown = [[d] + [cols.get(a, "") for a in attacks] for d, cols in by_def.items()]
        parts.append(f"defense (seed {meta.get('seed', '?')}), success rate %\n" + _table(["defense"] + attacks, shown))
    sweep = out / "sweep.csv"
    if sweep.exists():
        meta, header, rows = read_csv(sweep)
        peaks = {}
        for r in rows:
            key = (r[0], r[1])
            if key not in peaks or float(r[3]) > float(peaks[key][1]):
                peaks[key] = (r[2], r[3])
        shown = [[v, n, off, p] for (v, n), (off, p) in peaks.items()]
        parts.append(f"sweep peaks (seed {meta.get('seed', '?')})\n" + _table(["variable", "name", "peak_offset", "mean_pT"], shown))
    if not parts:
        return "no results\n"
    return "\n\n".join(parts) + "\n"
