"""Small numpy CNN used as the white-box victim.

Layers are described by plain dicts so the architecture serializes to JSON::

    {"type": "conv", "filters": 8, "kernel": 3, "stride": 1}
    {"type": "relu"}
    {"type": "maxpool", "size": 2}
    {"type": "flatten"}
    {"type": "dense", "units": 64}

Convolutions are 'valid' (no padding). Tensors are NHWC, float64.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def default_layers(n_classes: int) -> list[dict]:
    return [
        {"type": "conv", "filters": 8, "kernel": 3, "stride": 1},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv", "filters": 16, "kernel": 3, "stride": 1},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "flatten"},
        {"type": "dense", "units": 64},
        {"type": "relu"},
        {"type": "dense", "units": n_classes},
    ]


@dataclass
class ArchitectureDescriptor:
    layers: list
    input_shape: tuple
    n_classes: int

    def __post_init__(self):
        self.layers = [dict(layer) for layer in self.layers]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.n_classes = int(self.n_classes)
        self.shapes()

    @classmethod
    def default(cls, n_classes: int, input_shape=(64, 64, 1)) -> "ArchitectureDescriptor":
        return cls(default_layers(n_classes), input_shape, n_classes)

    def shapes(self) -> list[tuple]:
        """Activation shape after every layer (input first). Raises on a broken chain."""
        shape = self.input_shape
        out = [shape]
        for layer in self.layers:
            kind = layer["type"]
            if kind == "conv":
                if len(shape) != 3:
                    raise ValueError("conv needs an HxWxC input")
                kk, s = layer["kernel"], layer.get("stride", 1)
                h, w = (shape[0] - kk) // s + 1, (shape[1] - kk) // s + 1
                if h < 1 or w < 1:
                    raise ValueError(f"conv kernel {kk} larger than input {shape}")
                shape = (h, w, layer["filters"])
            elif kind == "maxpool":
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise ValueError(f"maxpool needs HxWxC >= 2x2, got {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ValueError("dense needs a flat input; add a flatten layer")
                shape = (layer["units"],)
            elif kind != "relu":
                raise ValueError(f"unknown layer type {kind!r}")
            out.append(shape)
        if shape != (self.n_classes,):
            raise ValueError(f"network ends in shape {shape}, expected ({self.n_classes},)")
        return out

    def param_shapes(self) -> list[tuple]:
        shapes = []
        for layer, shape in zip(self.layers, self.shapes()):
            if layer["type"] == "conv":
                shapes += [(layer["kernel"], layer["kernel"], shape[2], layer["filters"]), (layer["filters"],)]
            elif layer["type"] == "dense":
                shapes += [(shape[0], layer["units"]), (layer["units"],)]
        return shapes

    def to_dict(self) -> dict:
        return {"layers": self.layers, "input_shape": list(self.input_shape), "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(d["layers"], d["input_shape"], d["n_classes"])


@dataclass
class VictimModel:
    descriptor: ArchitectureDescriptor
    params: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
        expected = self.descriptor.param_shapes()
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match descriptor {expected}")
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("non-finite parameters")

    @property
    def n_classes(self) -> int:
        return self.descriptor.n_classes


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def label(self) -> int:
        return int(np.argmax(self.logits))


def init_params(descriptor: ArchitectureDescriptor, seed: int) -> list:
    """He-style fan-in scaled normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in descriptor.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return params


# --- forward / backward ---------------------------------------------------


def _conv_forward(x, W, b, stride):
    kk = W.shape[0]
    win = sliding_window_view(x, (kk, kk), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    out = cols @ W.reshape(-1, W.shape[-1]) + b
    return out.reshape(n, ho, wo, -1), cols


def _conv_backward(dout, x_shape, cols, W, stride, need_params, need_input=True):
    kk, _, cin, f = W.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, f)
    grads = ((cols.T @ d2).reshape(W.shape), d2.sum(axis=0)) if need_params else (None, None)
    if not need_input:
        return None, grads
    dcols = (d2 @ W.reshape(-1, f).T).reshape(n, ho, wo, kk, kk, cin)
    dx = np.zeros(x_shape)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kk):
        for j in range(kk):
            dx[:, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, :, i, j]
    return dx, grads


def _pool_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = np.argmax(win, axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dout, x_shape, idx):
    n, h, w, c = x_shape
    h2, w2 = dout.shape[1:3]
    dwin = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :2 * h2, :2 * w2] = dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return dx


def forward_batch(descriptor, params, x):
    """Logits for a batch ``(N, H, W, C)`` plus the caches :func:`backward_batch` needs."""
    caches = []
    pi = 0
    for layer in descriptor.layers:
        kind = layer["type"]
        if kind == "conv":
            out, cols = _conv_forward(x, params[pi], params[pi + 1], layer.get("stride", 1))
            caches.append((x.shape, cols))
            pi += 2
        elif kind == "dense":
            out = x @ params[pi] + params[pi + 1]
            caches.append(x)
            pi += 2
        elif kind == "relu":
            out = np.maximum(x, 0.0)
            caches.append(x > 0)
        elif kind == "maxpool":
            out, idx = _pool_forward(x)
            caches.append((x.shape, idx))
        else:
            out = x.reshape(x.shape[0], -1)
            caches.append(x.shape)
        x = out
    return x, caches


def backward_batch(descriptor, params, caches, dlogits, need_params=True, need_input=True):
    """Reverse pass. Returns ``(d input, parameter gradients)``."""
    grads = [None] * len(params)
    pi = len(params)
    d = dlogits
    for depth, layer, cache in zip(range(len(caches) - 1, -1, -1), reversed(descriptor.layers), reversed(caches)):
        kind = layer["type"]
        if kind == "conv":
            pi -= 2
            x_shape, cols = cache
            d, (gw, gb) = _conv_backward(d, x_shape, cols, params[pi], layer.get("stride", 1),
                                         need_params, need_input or depth > 0)
            grads[pi], grads[pi + 1] = gw, gb
            if d is None:
                break
        elif kind == "dense":
            pi -= 2
            if need_params:
                grads[pi], grads[pi + 1] = cache.T @ d, d.sum(axis=0)
            d = d @ params[pi].T
        elif kind == "relu":
            d = d * cache
        elif kind == "maxpool":
            d = _pool_backward(d, *cache)
        else:
            d = d.reshape(cache)
    return d, grads


def cross_entropy(logits, labels):
    """Per-sample softmax cost and its gradient w.r.t. the logits."""
    lse = logsumexp(logits, axis=1)
    rows = np.arange(logits.shape[0])
    cost = lse - logits[rows, labels]
    dlogits = np.exp(logits - lse[:, None])
    dlogits[rows, labels] -= 1.0
    return cost, dlogits


def _check_input(model: VictimModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.descriptor.input_shape:
        raise ValueError(f"input shape {x.shape} does not match {model.descriptor.input_shape}")
    return x


def forward(model: VictimModel, x) -> Prediction:
    x = _check_input(model, x)
    logits, _ = forward_batch(model.descriptor, model.params, x[None])
    return Prediction(logits[0])


def predict_logits(model: VictimModel, xb, batch_size: int = 256) -> np.ndarray:
    xb = np.asarray(xb, dtype=np.float64)
    out = [forward_batch(model.descriptor, model.params, xb[i:i + batch_size])[0] for i in range(0, len(xb), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def softmax_cost(pred: Prediction, c: int) -> float:
    """``-log softmax(logits)[c]``, computed via log-sum-exp."""
    logits = np.asarray(pred.logits, dtype=np.float64)
    if not 0 <= c < logits.shape[0]:
        raise IndexError(f"class {c} out of range")
    return float(logsumexp(logits) - logits[c])


def input_gradient(model: VictimModel, xb, labels) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``(logits, d cost_i / d x_i)``."""
    logits, caches = forward_batch(model.descriptor, model.params, xb)
    _, dlogits = cross_entropy(logits, np.asarray(labels))
    dx, _ = backward_batch(model.descriptor, model.params, caches, dlogits, need_params=False)
    return logits, dx


def backward_to_input(model: VictimModel, x, c: int) -> np.ndarray:
    """Gradient of the softmax cost of class ``c`` w.r.t. every pixel of ``x``."""
    x = _check_input(model, x)
    _, dx = input_gradient(model, x[None], [c])
    return dx[0]


# --- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0


def accuracy(model: VictimModel, x, y) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict_logits(model, x), axis=1) == np.asarray(y)))


def train(descriptor: ArchitectureDescriptor, x, y, cfg: TrainConfig = TrainConfig(),
          x_test=None, y_test=None, augment=None) -> VictimModel:
    """Minibatch SGD with momentum on the mean softmax cost.

    ``augment(params, xb, yb) -> xb`` may rewrite a shuffled batch before the
    gradient step; adversarial training plugs in here.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if y.min() < 0 or y.max() >= descriptor.n_classes:
        raise ValueError("labels out of range")
    params = init_params(descriptor, cfg.seed)
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch):
            idx = order[start:start + cfg.batch]
            xb, yb = x[idx], y[idx]
            if augment is not None:
                xb = augment(params, xb, yb)
            logits, caches = forward_batch(descriptor, params, xb)
            cost, dlogits = cross_entropy(logits, yb)
            loss = float(cost.mean())
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {start}; lower lr (now {cfg.lr})")
            _, grads = backward_batch(descriptor, params, caches, dlogits / len(idx), need_input=False)
            for p, g, v in zip(params, grads, velocity):
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v -= cfg.lr * g
                p += v
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDivergedError(f"non-finite parameters at epoch {epoch}, batch starting {start}; lower lr (now {cfg.lr})")
            total += loss * len(idx)
        history.append(total / len(x))
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    model = VictimModel(descriptor, params)
    model.metadata = {
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "lr": cfg.lr,
        "momentum": cfg.momentum,
        "batch": cfg.batch,
        "weight_decay": cfg.weight_decay,
        "loss_history": history,
        "train_accuracy": accuracy(model, x, y),
    }
    if x_test is not None and len(x_test):
        model.metadata["test_accuracy"] = accuracy(model, x_test, y_test)
    return model


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(model: VictimModel, path) -> None:
    """``FGCK`` | u32 version | u32 json length | json | float32 LE tensors."""
    header = dict(model.descriptor.to_dict(), metadata=model.metadata)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> VictimModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
        descriptor = ArchitectureDescriptor.from_dict(header)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad descriptor: {exc}") from exc
    offset = 12 + n
    params = []
    for shape in descriptor.param_shapes():
        count = int(np.prod(shape))
        if offset + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data")
        params.append(np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float64))
        offset += 4 * count
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return VictimModel(descriptor, params, header.get("metadata", {}))
