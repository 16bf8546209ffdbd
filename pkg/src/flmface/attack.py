"""Landmark-manipulation attacks (FLM and grouped GFLM) and the FGSM baseline.

FLM runs signed-gradient ascent on a per-landmark displacement field ``f``:

    L(f) = J(g(warp(x, P, P + f)), c) - lambda_flow * mean_i |f_i|^2
    f <- f + eps * sign(dL/dP_adv)

GFLM takes the same step, then projects each semantic group of the raw field
onto an axis-aligned scale about the group centroid plus a translation (a
closed-form least-squares fit), optionally tying the scale and vertical
position of the two eye groups together.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tps
from .tps import DegenerateConfigurationError, LandmarkSet
from .victim import VictimModel, cross_entropy, forward_batch, backward_batch, input_gradient

DENOM_TOL = 1e-12
# fitted scales are kept positive so a group never folds over its centroid
ALPHA_MIN = 0.1

# (right eye+brow, left eye+brow) in the five-group face layout
EYE_PAIR = (2, 3)


@dataclass
class AttackConfig:
    method: str = "flm"
    eps: float = 0.01
    lambda_flow: float | None = None
    max_iters: int = 50
    regions: tuple | None = None
    symmetry: bool = True
    symmetric_pairs: tuple = (EYE_PAIR,)
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("flm", "gflm", "fgsm"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lambda_flow is None:
            self.lambda_flow = 100.0 if self.method == "flm" else 0.0
        if self.lambda_flow < 0:
            raise ValueError("lambda_flow must be >= 0")
        if self.regions is not None:
            self.regions = tuple(sorted(int(r) for r in self.regions))

    def region_mask(self, landmarks: LandmarkSet) -> np.ndarray:
        if self.regions is None:
            return np.ones(landmarks.k, dtype=bool)
        return np.isin(landmarks.groups, self.regions)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    P_adv: np.ndarray | None
    iterations: int
    success: bool
    p_true: float
    pred_class: int
    duration: float = 0.0
    error: str | None = None


@dataclass
class GroupParams:
    """Per-group scale ``alpha``, translation ``beta`` and centroid, each ``(m, 2)``."""

    alpha: np.ndarray
    beta: np.ndarray
    centroids: np.ndarray


# --- losses -----------------------------------------------------------------


def flow_loss(f) -> float:
    f = np.asarray(f, dtype=np.float64)
    return float(np.sum(f * f) / f.shape[0])


def _points(P):
    return P.points if isinstance(P, LandmarkSet) else np.asarray(P, dtype=np.float64)


def total_loss(P, P_adv, x, c, lambda_flow, model: VictimModel) -> float:
    P, P_adv = _points(P), np.asarray(P_adv, dtype=np.float64)
    x_adv = tps.warp_image(x, P, P_adv)
    logits, _ = forward_batch(model.descriptor, model.params, x_adv[None])
    cost, _ = cross_entropy(logits, np.array([c]))
    return float(cost[0]) - lambda_flow * flow_loss(P_adv - P)


class _Objective:
    """Evaluates the warped image, its prediction and (lazily) the landmark gradient."""

    def __init__(self, model, x, P, c, lambda_flow):
        self.model, self.x, self.P, self.c, self.lam = model, np.asarray(x, dtype=np.float64), P, c, lambda_flow

    def evaluate(self, P_adv):
        self.P_adv = P_adv
        if np.array_equal(P_adv, self.P):
            self.x_adv = self.x.copy()
        else:
            self.x_adv = tps.warp_image(self.x, self.P, P_adv)
        self.logits, self._caches = forward_batch(self.model.descriptor, self.model.params, self.x_adv[None])
        return self.logits[0]

    def gradient(self):
        _, dlogits = cross_entropy(self.logits, np.array([self.c]))
        dx, _ = backward_batch(self.model.descriptor, self.model.params, self._caches, dlogits, need_params=False)
        grad = tps.warp_jacobian(self.x, self.P, self.P_adv, dx[0])
        k = self.P.shape[0]
        return grad - self.lam * (2.0 / k) * (self.P_adv - self.P)


def total_loss_grad(P, P_adv, x, c, lambda_flow, model: VictimModel) -> np.ndarray:
    """Gradient of :func:`total_loss` w.r.t. ``P_adv``, shape ``(k, 2)``."""
    obj = _Objective(model, x, _points(P), c, lambda_flow)
    obj.evaluate(np.asarray(P_adv, dtype=np.float64))
    return obj.gradient()


# --- update rules -------------------------------------------------------------


def flm_step(f, grad, eps, region_mask=None) -> np.ndarray:
    """``f + eps * sign(grad)``; rows outside ``region_mask`` stay put."""
    step = eps * np.sign(grad)
    if region_mask is not None:
        step = step * np.asarray(region_mask, dtype=bool)[:, None]
    return np.asarray(f, dtype=np.float64) + step


def group_fit(points, f):
    """Least-squares axis scale and translation reproducing ``points + f``.

    Returns ``(alpha, beta)``, each of shape ``(2,)``. An axis along which all
    points coincide carries no scale information and gets ``alpha = 1``.
    Scales below ``ALPHA_MIN`` are raised to it.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    f = np.asarray(f, dtype=np.float64).reshape(-1, 2)
    centroid = points.mean(axis=0)
    centered = points - centroid
    denom = np.sum(centered * centered, axis=0)
    numer = np.sum(centered * (points + f), axis=0)
    alpha = np.ones(2)
    ok = denom >= DENOM_TOL
    alpha[ok] = np.maximum(numer[ok] / denom[ok], ALPHA_MIN)
    beta = centroid + f.mean(axis=0)
    return alpha, beta


def fit_groups(P: LandmarkSet, f, groups=None) -> GroupParams:
    m = P.n_groups
    alpha = np.ones((m, 2))
    beta = np.zeros((m, 2))
    centroids = np.zeros((m, 2))
    f = np.asarray(f, dtype=np.float64)
    for g in range(1, m + 1):
        idx = P.members(g)
        centroids[g - 1] = P.points[idx].mean(axis=0)
        beta[g - 1] = centroids[g - 1]
        if groups is None or g in groups:
            alpha[g - 1], beta[g - 1] = group_fit(P.points[idx], f[idx])
    return GroupParams(alpha, beta, centroids)


def symmetrize(params: GroupParams, pairs=(EYE_PAIR,)) -> GroupParams:
    """Equal scale and equal vertical position for each pair of groups."""
    alpha, beta = params.alpha.copy(), params.beta.copy()
    for a, b in pairs:
        i, j = a - 1, b - 1
        if max(i, j) >= alpha.shape[0]:
            continue
        alpha[i] = alpha[j] = 0.5 * (alpha[i] + alpha[j])
        beta[i, 1] = beta[j, 1] = 0.5 * (beta[i, 1] + beta[j, 1])
    return GroupParams(alpha, beta, params.centroids)


def apply_groups(P: LandmarkSet, params: GroupParams, symmetry: bool = False, pairs=(EYE_PAIR,)) -> np.ndarray:
    if symmetry:
        params = symmetrize(params, pairs)
    out = np.empty_like(P.points)
    for g in range(1, P.n_groups + 1):
        idx = P.members(g)
        out[idx] = params.alpha[g - 1] * (P.points[idx] - params.centroids[g - 1]) + params.beta[g - 1]
    return out


# --- attack loops -------------------------------------------------------------


def _result(x_adv, P_adv, logits, c, iterations, error=None):
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    pred = int(np.argmax(logits))
    return AttackResult(x_adv, P_adv, iterations, pred != c, float(probs[c]), pred, error=error)


def _landmark_attack(x, P: LandmarkSet, c: int, model: VictimModel, cfg: AttackConfig, grouped: bool) -> AttackResult:
    start = time.perf_counter()
    mask = cfg.region_mask(P)
    groups = None if cfg.regions is None else set(cfg.regions)
    pairs = [p for p in cfg.symmetric_pairs if groups is None or set(p) <= groups]
    obj = _Objective(model, x, P.points, c, cfg.lambda_flow)
    f = np.zeros_like(P.points)
    logits = obj.evaluate(P.points)
    iteration = 0
    error = None
    while int(np.argmax(logits)) == c and iteration < cfg.max_iters:
        x_keep, logits_keep = obj.x_adv, logits
        try:
            f_next = flm_step(f, obj.gradient(), cfg.eps, mask)
            if grouped:
                params = fit_groups(P, f_next, groups)
                # groups outside the region stay bit-exact rather than round-tripping
                f_next = np.where(mask[:, None], apply_groups(P, params, cfg.symmetry, pairs) - P.points, 0.0)
            logits = obj.evaluate(P.points + f_next)
        except DegenerateConfigurationError as exc:
            obj.x_adv, logits = x_keep, logits_keep
            error = f"degenerate landmarks at iteration {iteration + 1}: {exc}"
            break
        f = f_next
        iteration += 1
    res = _result(obj.x_adv, P.points + f, logits, c, iteration, error)
    res.duration = time.perf_counter() - start
    return res


def run_flm(x, P: LandmarkSet, c: int, model: VictimModel, cfg: AttackConfig | None = None) -> AttackResult:
    cfg = cfg or AttackConfig("flm")
    return _landmark_attack(x, P, c, model, cfg, grouped=False)


def run_gflm(x, P: LandmarkSet, c: int, model: VictimModel, cfg: AttackConfig | None = None) -> AttackResult:
    cfg = cfg or AttackConfig("gflm")
    return _landmark_attack(x, P, c, model, cfg, grouped=True)


def run_fgsm(x, c: int, model: VictimModel, eps: float = 0.03, iters: int = 1) -> AttackResult:
    """Iterated fast gradient sign steps in pixel space, clipped to ``[0, 1]``."""
    start = time.perf_counter()
    x_adv = np.asarray(x, dtype=np.float64).copy()
    iteration = 0
    while True:
        logits, dx = input_gradient(model, x_adv[None], [c])
        if int(np.argmax(logits[0])) != c or iteration == iters:
            break
        x_adv = np.clip(x_adv + eps * np.sign(dx[0]), 0.0, 1.0)
        iteration += 1
    res = _result(x_adv, None, logits[0], c, iteration)
    res.duration = time.perf_counter() - start
    return res


def run_attack(x, P: LandmarkSet, c: int, model: VictimModel, cfg: AttackConfig) -> AttackResult:
    if cfg.method == "flm":
        return run_flm(x, P, c, model, cfg)
    if cfg.method == "gflm":
        return run_gflm(x, P, c, model, cfg)
    return run_fgsm(x, c, model, cfg.eps, cfg.max_iters)
