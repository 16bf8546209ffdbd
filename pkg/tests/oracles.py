"""Independent reference computations shared by the test modules."""

import numpy as np

from flmface import tps
from flmface.imagegrid import norm_to_pixel, pixel_grid

KINK_MARGIN_PX = 1e-4


def central_difference(fn, z, step):
    """Gradient of scalar ``fn`` at array ``z`` by central differences."""
    z = np.asarray(z, dtype=np.float64)
    grad = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        plus, minus = z.copy(), z.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (fn(plus) - fn(minus)) / (2.0 * step)
    return grad


def sample_kink_distance(shape, P, P_adv):
    """Smallest pixel-unit distance from any backward-mapped sample location to a
    bilinear cell edge or the clamp border. Finite differences are only a valid
    oracle when this exceeds the perturbation the step induces."""
    h, w = shape[:2]
    t = tps.tps_fit(P_adv, P)
    src = tps.tps_eval(t, pixel_grid(h, w))
    rows, cols = norm_to_pixel(src[:, 0], src[:, 1], h, w)
    return float(min(np.min(np.abs(cols - np.round(cols))), np.min(np.abs(rows - np.round(rows)))))


def relative_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def group_residual(points, f, alpha, beta):
    """Per-axis squared error of ``alpha * (p - mean) + beta`` against ``p + f``."""
    points = np.asarray(points, dtype=np.float64)
    target = points + np.asarray(f, dtype=np.float64)
    pred = np.asarray(alpha) * (points - points.mean(axis=0)) + np.asarray(beta)
    return np.sum((pred - target) ** 2, axis=0)


def coordinate_descent_2d(fn, start, sweeps=20, h=1.0, a_min=-np.inf):
    """Minimize ``fn(a, b)`` subject to ``a >= a_min`` by alternating 1-D moves.
    Each move fits a parabola through three probes spaced ``h`` apart and
    jumps to its vertex, projected onto the feasible side."""
    a, b = start

    def vertex(g, x):
        lo, mid, hi = g(x - h), g(x), g(x + h)
        curv = lo - 2.0 * mid + hi
        return x if curv <= 0 else x - 0.5 * h * (hi - lo) / curv

    for _ in range(sweeps):
        a = max(vertex(lambda s: fn(s, b), a), a_min)
        b = vertex(lambda s: fn(a, s), b)
    return a, b


def numeric_group_fit(points, f, alpha_min=-np.inf):
    """Least-squares ``(alpha, beta)`` found by coordinate descent, one axis at
    a time, optionally with a lower bound on ``alpha``."""
    points = np.asarray(points, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    alpha, beta = np.zeros(2), np.zeros(2)
    for d in range(2):
        p, t = points[:, d], points[:, d] + f[:, d]
        c = p - p.mean()

        def resid(a, b):
            return float(np.sum((a * c + b - t) ** 2))

        alpha[d], beta[d] = coordinate_descent_2d(resid, (1.0, 0.0), a_min=alpha_min)
    return alpha, beta


def small_victim(size, n_classes=4, seed=0, channels=1):
    """Untrained CNN sized for ``size x size`` inputs."""
    from flmface.victim import ArchitectureDescriptor, VictimModel, init_params

    layers = [
        {"type": "conv", "filters": 3, "kernel": 3, "stride": 1},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "flatten"},
        {"type": "dense", "units": 6},
        {"type": "relu"},
        {"type": "dense", "units": n_classes},
    ]
    d = ArchitectureDescriptor(layers, (size, size, channels), n_classes)
    return VictimModel(d, init_params(d, seed))


def gradient_instance(rng, size, k, spread=0.8, jitter=0.05):
    """Random ``(x, P, P_adv)`` whose backward-mapped samples sit clear of
    bilinear cell edges, so central differences are trustworthy."""
    while True:
        x = rng.random((size, size, 1))
        P = rng.uniform(-spread, spread, size=(k, 2))
        P_adv = P + rng.normal(0.0, jitter, size=P.shape)
        try:
            if sample_kink_distance(x.shape, P, P_adv) > KINK_MARGIN_PX:
                return x, P, P_adv
        except tps.DegenerateConfigurationError:
            pass
