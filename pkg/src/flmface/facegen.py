"""Synthetic schematic faces whose identity lives in landmark geometry.

Each class is a vector of geometric parameters (eye spacing, nose position,
mouth width, jaw size, ...). A class template places ``k`` landmarks in five
groups (1 jaw, 2 right eye+brow, 3 left eye+brow, 4 nose, 5 mouth); samples
apply a small random similarity transform and per-landmark noise, then
rasterize strokes and soft ellipses driven by the jittered landmarks.

Two layouts exist: ``compact`` (k=23: 7, 4, 4, 3, 5) and ``full68``
(k=68: 17, 11, 11, 9, 20). "Right" is the subject's right, i.e. the image
left (u < 0).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tps import LandmarkSet

DATASET_MAGIC = b"FGDS"
DATASET_VERSION = 1

GROUP_NAMES = {1: "jaw", 2: "right_eye", 3: "left_eye", 4: "nose", 5: "mouth"}
LAYOUT_SIZES = {"compact": (7, 4, 4, 3, 5), "full68": (17, 11, 11, 9, 20)}

# name -> (low, high); classes draw uniformly inside the box
PARAM_RANGES = {
    "eye_sep": (0.26, 0.40),
    "eye_v": (-0.32, -0.16),
    "eye_w": (0.07, 0.12),
    "brow_gap": (0.09, 0.16),
    "nose_u": (-0.07, 0.07),
    "nose_len": (0.18, 0.30),
    "nose_w": (0.06, 0.12),
    "mouth_u": (-0.07, 0.07),
    "mouth_v": (0.32, 0.46),
    "mouth_w": (0.12, 0.24),
    "jaw_w": (0.60, 0.78),
    "jaw_h": (0.62, 0.78),
}
JAW_CENTER_V = -0.05


@dataclass
class FaceTemplate:
    class_id: int
    layout: str
    params: dict
    landmarks: LandmarkSet


@dataclass
class Jitter:
    rotation_deg: float = 5.0
    scale: float = 0.05
    translation: float = 0.05
    noise: float = 0.005

    @classmethod
    def none(cls) -> "Jitter":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class Sample:
    image: np.ndarray
    landmarks: LandmarkSet
    class_id: int
    sample_id: int


# --- templates --------------------------------------------------------------


def _arc(cx, cy, ax, ay, t0, t1, n):
    t = np.linspace(t0, t1, n)
    return np.column_stack([cx + ax * np.cos(t), cy + ay * np.sin(t)])


def _eye_brow(p, side, layout):
    """Brow then eye landmarks for one side (-1 image-left, +1 image-right)."""
    cx, cy, w = side * p["eye_sep"], p["eye_v"], p["eye_w"]
    by = cy - p["brow_gap"]
    outer, inner = cx + side * w, cx - side * w
    if layout == "compact":
        return np.array([[cx + side * 1.2 * w, by + 0.02], [cx - side * 1.1 * w, by],
                         [outer, cy], [inner, cy]])
    brow = np.column_stack([np.linspace(cx + side * 1.3 * w, cx - side * 1.2 * w, 5),
                            by - 0.02 * (1 - np.linspace(-1, 1, 5) ** 2)])
    h = 0.45 * w
    eye = np.array([[outer, cy], [cx + side * 0.35 * w, cy - h], [cx - side * 0.35 * w, cy - h],
                    [inner, cy], [cx - side * 0.35 * w, cy + h], [cx + side * 0.35 * w, cy + h]])
    return np.vstack([brow, eye])


def template_landmarks(p: dict, layout: str = "compact") -> LandmarkSet:
    if layout not in LAYOUT_SIZES:
        raise ValueError(f"unknown layout {layout!r}")
    sizes = LAYOUT_SIZES[layout]
    jaw = _arc(0.0, JAW_CENTER_V, p["jaw_w"], p["jaw_h"], 0.0, np.pi, sizes[0])
    right = _eye_brow(p, -1, layout)
    left = _eye_brow(p, 1, layout)
    top_v = p["eye_v"] + 0.02
    tip_v = top_v + p["nose_len"]
    nu, nw = p["nose_u"], p["nose_w"]
    mu, mv, mw = p["mouth_u"], p["mouth_v"], p["mouth_w"]
    if layout == "compact":
        nose = np.array([[nu, top_v], [nu - nw, tip_v], [nu + nw, tip_v]])
        mouth = np.array([[mu - mw, mv], [mu, mv - 0.04], [mu + mw, mv], [mu, mv + 0.05], [mu, mv + 0.005]])
    else:
        bridge = np.column_stack([np.full(4, nu), np.linspace(top_v, tip_v - 0.03, 4)])
        nostrils = np.column_stack([np.linspace(nu - nw, nu + nw, 5),
                                    tip_v + 0.02 * (1 - np.linspace(-1, 1, 5) ** 2)])
        nose = np.vstack([bridge, nostrils])
        outer = _arc(mu, mv, mw, 0.06, np.pi, -np.pi, 13)[:12]
        inner = _arc(mu, mv, 0.7 * mw, 0.025, np.pi, -np.pi, 9)[:8]
        mouth = np.vstack([outer, inner])
    pts = np.vstack([jaw, right, left, nose, mouth])
    groups = np.repeat(np.arange(1, 6), sizes)
    return LandmarkSet(pts, groups)


def _param_vector(p: dict) -> np.ndarray:
    return np.array([(p[n] - lo) / (hi - lo) for n, (lo, hi) in PARAM_RANGES.items()])


def make_classes(n_classes: int, layout: str = "compact", seed: int = 0, margin: float = 0.5,
                 max_tries: int = 2000) -> list[FaceTemplate]:
    """Draw class geometries, pairwise at least ``margin`` apart in the
    normalized parameter cube."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng([seed, 7])
    accepted = []
    for _ in range(n_classes):
        for _ in range(max_tries):
            z = rng.random(len(PARAM_RANGES))
            if all(np.linalg.norm(z - a) >= margin for a in accepted):
                accepted.append(z)
                break
        else:
            raise ValueError(f"could not place {n_classes} classes {margin} apart; "
                             f"use fewer classes or a smaller margin")
    templates = []
    for cid, z in enumerate(accepted):
        params = {n: float(lo + zi * (hi - lo)) for zi, (n, (lo, hi)) in zip(z, PARAM_RANGES.items())}
        templates.append(FaceTemplate(cid, layout, params, template_landmarks(params, layout)))
    return templates


# --- rendering ----------------------------------------------------------------

# ("line", indices, closed) | ("ellipse", (a, b), aspect): ellipses are centered
# between landmarks a and b with that major axis
PARTS = {
    "compact": [
        ("line", range(0, 7), False),
        ("line", (7, 8), False), ("ellipse", (9, 10), 0.5),
        ("line", (11, 12), False), ("ellipse", (13, 14), 0.5),
        ("line", (16, 15, 17), False), ("ellipse", (16, 17), 0.35),
        ("line", (18, 19, 20, 21), True), ("line", (18, 22, 20), False),
    ],
    "full68": [
        ("line", range(0, 17), False),
        ("line", range(17, 22), False), ("line", range(22, 28), True), ("ellipse", (22, 25), 0.45),
        ("line", range(28, 33), False), ("line", range(33, 39), True), ("ellipse", (33, 36), 0.45),
        ("line", range(39, 43), False), ("line", range(43, 48), False), ("ellipse", (43, 47), 0.35),
        ("line", range(48, 60), True), ("line", range(60, 68), True),
    ],
}

BACKGROUND = 0.9
INK = 0.1
STROKE_HALF_WIDTH = 0.8


def _segment_coverage(px, a, b):
    ab = b - a
    t = np.clip(((px - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    d = np.linalg.norm(px - a - t[:, None] * ab, axis=1)
    return np.clip(STROKE_HALF_WIDTH + 0.5 - d, 0.0, 1.0)


def _ellipse_coverage(px, a, b, aspect):
    center = 0.5 * (a + b)
    axis = b - a
    semi = 0.5 * np.linalg.norm(axis)
    if semi < 1e-9:
        return np.zeros(len(px))
    e1 = axis / (2 * semi)
    e2 = np.array([-e1[1], e1[0]])
    rel = px - center
    minor = aspect * semi
    r = np.sqrt(((rel @ e1) / semi) ** 2 + ((rel @ e2) / minor) ** 2)
    return np.clip((1.0 - r) * minor + 0.5, 0.0, 1.0)


def rasterize(points, layout: str, size=(64, 64)) -> np.ndarray:
    """Draw a face from normalized landmarks; returns ``(H, W, 1)`` in [0, 1]."""
    h, w = size
    pts = np.column_stack([(points[:, 0] + 1) * 0.5 * (w - 1), (points[:, 1] + 1) * 0.5 * (h - 1)])
    rows, cols = np.mgrid[0:h, 0:w]
    px = np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)
    cover = np.zeros(h * w)
    for kind, idx, extra in PARTS[layout]:
        idx = list(idx)
        if kind == "line":
            chain = idx + [idx[0]] if extra else idx
            for i, j in zip(chain[:-1], chain[1:]):
                cover = np.maximum(cover, _segment_coverage(px, pts[i], pts[j]))
        else:
            cover = np.maximum(cover, _ellipse_coverage(px, pts[idx[0]], pts[idx[1]], extra))
    img = BACKGROUND - (BACKGROUND - INK) * cover
    return np.clip(img, 0.0, 1.0).reshape(h, w, 1)


def jitter_landmarks(points, jitter: Jitter, rng) -> np.ndarray:
    theta = np.deg2rad(rng.uniform(-jitter.rotation_deg, jitter.rotation_deg))
    s = 1.0 + rng.uniform(-jitter.scale, jitter.scale)
    t = rng.uniform(-jitter.translation, jitter.translation, size=2)
    noise = rng.normal(0.0, 1.0, size=points.shape) * jitter.noise
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return s * points @ rot.T + t + noise


def render(t: FaceTemplate, jitter: Jitter = Jitter(), seed: int = 0, sample_id: int = 0,
           size=(64, 64)) -> Sample:
    rng = np.random.default_rng([seed, t.class_id, sample_id])
    pts = jitter_landmarks(t.landmarks.points, jitter, rng)
    img = rasterize(pts, t.layout, size)
    return Sample(img, LandmarkSet(pts, t.landmarks.groups), t.class_id, sample_id)


# --- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    """Rendered samples, stored at single precision so files round-trip exactly."""

    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    landmarks: np.ndarray
    groups: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays = ("images", "labels", "sample_ids", "landmarks", "groups", "train_idx", "test_idx")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.images.dtype == other.images.dtype and self.manifest == other.manifest)

    def x(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float64)

    def landmark_set(self, i: int) -> LandmarkSet:
        return LandmarkSet(self.landmarks[i].astype(np.float64), self.groups)

    @property
    def n_classes(self) -> int:
        return int(self.manifest.get("n_classes", self.labels.max() + 1))


def build_dataset(templates, per_class: int = 200, split: float = 0.8, seed: int = 0,
                  jitter: Jitter = Jitter(), size=(64, 64), out_dir=None) -> Dataset:
    images, labels, ids, lms = [], [], [], []
    sid = 0
    for t in templates:
        for _ in range(per_class):
            s = render(t, jitter, seed, sid, size)
            images.append(s.image)
            labels.append(t.class_id)
            ids.append(sid)
            lms.append(s.landmarks.points)
            sid += 1
    labels = np.array(labels, dtype=np.int64)
    rng = np.random.default_rng([seed, 11])
    train_idx, test_idx = [], []
    for cid in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cid))
        n_train = int(round(split * len(members)))
        train_idx += members[:n_train].tolist()
        test_idx += members[n_train:].tolist()
    hist = np.bincount(labels).tolist()
    manifest = {
        "format_version": DATASET_VERSION,
        "seed": seed,
        "layout": templates[0].layout,
        "n_classes": len(templates),
        "per_class": per_class,
        "split": split,
        "jitter": asdict(jitter),
        "size": list(size),
        "class_histogram": hist,
        "class_params": [t.params for t in templates],
        "train_idx": sorted(train_idx),
        "test_idx": sorted(test_idx),
    }
    ds = Dataset(
        images=np.asarray(images, dtype=np.float32),
        labels=labels,
        sample_ids=np.array(ids, dtype=np.int64),
        landmarks=np.asarray(lms, dtype=np.float32),
        groups=templates[0].landmarks.groups.astype(np.uint8),
        train_idx=np.array(sorted(train_idx), dtype=np.int64),
        test_idx=np.array(sorted(test_idx), dtype=np.int64),
        manifest=manifest,
    )
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.images.shape
    k = ds.landmarks.shape[1]
    path = out / "dataset.fgds"
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, n))
        for i in range(n):
            fh.write(struct.pack("<6I", int(ds.labels[i]), int(ds.sample_ids[i]), h, w, c, k))
            fh.write(ds.images[i].astype("<f4").tobytes())
            fh.write(ds.landmarks[i].astype("<f4").tobytes())
            fh.write(ds.groups.astype(np.uint8).tobytes())
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_dataset(out_dir) -> Dataset:
    out = Path(out_dir)
    path = out / "dataset.fgds"
    try:
        raw = path.read_bytes()
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileNotFoundError(f"cannot read dataset in {out}: {exc}") from exc
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    labels, ids, images, lms, groups = [], [], [], [], None
    for _ in range(n):
        cls, sid, h, w, c, k = struct.unpack_from("<6I", raw, pos)
        pos += 24
        images.append(np.frombuffer(raw, "<f4", h * w * c, pos).reshape(h, w, c))
        pos += 4 * h * w * c
        lms.append(np.frombuffer(raw, "<f4", 2 * k, pos).reshape(k, 2))
        pos += 8 * k
        groups = np.frombuffer(raw, np.uint8, k, pos).copy()
        pos += k
        labels.append(cls)
        ids.append(sid)
    return Dataset(
        images=np.asarray(images, dtype=np.float32),
        labels=np.array(labels, dtype=np.int64),
        sample_ids=np.array(ids, dtype=np.int64),
        landmarks=np.asarray(lms, dtype=np.float32),
        groups=groups,
        train_idx=np.array(manifest["train_idx"], dtype=np.int64),
        test_idx=np.array(manifest["test_idx"], dtype=np.int64),
        manifest=manifest,
    )
