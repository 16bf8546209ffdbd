"""Thin-plate splines: fitting, evaluation, image warping and landmark gradients.

A spline with sites ``c_j`` maps a point ``p = (u, v)`` to

    W(p) = a_0 + a_1 * u + a_2 * v + sum_j w_j * U(|p - c_j|)

per output axis, with ``U(r) = r^2 log(r^2)`` and ``U(0) = 0``. Fitting solves
the usual ``(k+3) x (k+3)`` bordered system

    [K  Q] [w]   [targets]
    [Q' 0] [a] = [   0   ]

with ``K_ij = U(|c_i - c_j|)`` and ``Q = [1, u, v]``.

Images are warped by backward mapping: the spline is fitted from the
adversarial landmarks to the original ones and every output pixel samples the
source image at its mapped location.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from .imagegrid import bilinear_sample, bilinear_sample_grad, pixel_grid

PIVOT_TOL = 1e-12


class DegenerateConfigurationError(ValueError):
    """Raised when spline sites are collinear or coincide."""


@dataclass(frozen=True)
class LandmarkSet:
    """``k`` normalized landmarks with 1-based contiguous group labels."""

    points: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        grp = np.asarray(self.groups, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError(f"need at least 3 points of shape (k, 2), got {pts.shape}")
        if grp.shape != (pts.shape[0],):
            raise ValueError("one group id per landmark is required")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks must be finite")
        ids = np.unique(grp)
        if ids[0] != 1 or not np.array_equal(ids, np.arange(1, ids[-1] + 1)):
            raise ValueError(f"group ids must be contiguous 1..m, got {ids.tolist()}")
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise DegenerateConfigurationError("landmarks are collinear")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "groups", grp)

    @property
    def k(self) -> int:
        return self.points.shape[0]

    @property
    def n_groups(self) -> int:
        return int(self.groups.max())

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.groups == group)

    def moved(self, points) -> "LandmarkSet":
        return LandmarkSet(points, self.groups)


@dataclass(frozen=True)
class TpsTransform:
    """Fitted spline. ``affine`` is ``2 x 3`` acting on ``(u, v, 1)``."""

    sites: np.ndarray
    affine: np.ndarray
    radial_weights: np.ndarray
    _lu: tuple = field(repr=False, compare=False, default=None)

    @property
    def n_params(self) -> int:
        return 2 * (self.sites.shape[0] + 3)

    @property
    def coef(self) -> np.ndarray:
        """Stacked ``(k+3, 2)`` coefficients: radial weights, then ``[1, u, v]`` rows."""
        a = self.affine
        return np.vstack([self.radial_weights, a[:, 2], a[:, 0], a[:, 1]])


def kernel(d2):
    """``U`` as a function of the squared distance: ``d2 * log(d2)``, 0 at 0."""
    return scipy.special.xlogy(d2, d2)


def kernel_deriv(d2):
    """``dU/d(d2) = log(d2) + 1``; set to 0 at coincident points (the chain
    factor ``2 * (p - c)`` is 0 there anyway)."""
    d2 = np.asarray(d2, dtype=np.float64)
    pos = d2 > 0
    return np.log(np.where(pos, d2, 1.0)) + pos


def _diffs(a, b):
    du = a[:, None, 0] - b[None, :, 0]
    dv = a[:, None, 1] - b[None, :, 1]
    return du, dv


def _sq_dists(a, b):
    du, dv = _diffs(a, b)
    return du * du + dv * dv


def system_matrix(sites) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.float64)
    k = sites.shape[0]
    L = np.zeros((k + 3, k + 3))
    L[:k, :k] = kernel(_sq_dists(sites, sites))
    L[:k, k] = 1.0
    L[:k, k + 1:] = sites
    L[k, :k] = 1.0
    L[k + 1:, :k] = sites.T
    return L


def _factor(sites):
    with warnings.catch_warnings():
        # singularity is reported through the pivot check below
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(system_matrix(sites), check_finite=False)
    if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
        raise DegenerateConfigurationError("spline sites are collinear or duplicated")
    return lu, piv


def _as_points(p):
    if isinstance(p, LandmarkSet):
        return p.points
    return np.asarray(p, dtype=np.float64)


def tps_fit(sites, targets) -> TpsTransform:
    """Interpolating spline taking each ``sites[i]`` to ``targets[i]``."""
    sites = _as_points(sites)
    targets = _as_points(targets)
    k = sites.shape[0]
    if targets.shape != (k, 2):
        raise ValueError(f"expected {k} target points, got shape {targets.shape}")
    lu = _factor(sites)
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = targets
    coef = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    a = coef[k:]
    affine = np.column_stack([a[1], a[2], a[0]])
    return TpsTransform(sites.copy(), affine, coef[:k].copy(), lu)


def basis(t: TpsTransform, points) -> np.ndarray:
    """Rows ``[U(|p - c_1|), ..., U(|p - c_k|), 1, u, v]`` for each point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return _basis_from_d2(_sq_dists(points, t.sites), points)


def _basis_from_d2(d2, points, log_d2=None):
    n, k = d2.shape
    phi = np.empty((n, k + 3))
    phi[:, :k] = kernel(d2) if log_d2 is None else d2 * log_d2
    phi[:, k] = 1.0
    phi[:, k + 1:] = points
    return phi


def tps_eval(t: TpsTransform, points) -> np.ndarray:
    """Map ``points`` (``(2,)`` or ``(n, 2)``) through the spline."""
    points = np.asarray(points, dtype=np.float64)
    out = basis(t, points) @ t.coef
    return out.reshape(points.shape)


def warp_image(x, P, P_adv) -> np.ndarray:
    """Warp ``x`` so that content at ``P`` moves to ``P_adv``."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    back = tps_fit(_as_points(P_adv), _as_points(P))
    src = tps_eval(back, pixel_grid(h, w))
    return bilinear_sample(x, src).reshape(h, w, c)


def warp_jacobian(x, P, P_adv, upstream, method: str = "analytic", step: float = 1e-5) -> np.ndarray:
    """Pull ``d loss / d warp_image(x, P, P_adv)`` back to the ``(k, 2)`` sites.

    ``method="fd"`` uses central differences on ``sum(upstream * warp)`` and
    exists as a reference for the analytic path.
    """
    x = np.asarray(x, dtype=np.float64)
    P = _as_points(P)
    P_adv = _as_points(P_adv)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(x.shape)
    if method == "fd":
        return _warp_jacobian_fd(x, P, P_adv, upstream, step)
    if method != "analytic":
        raise ValueError(f"unknown method {method!r}")

    h, w, ch = x.shape
    k = P_adv.shape[0]
    t = tps_fit(P_adv, P)
    grid = pixel_grid(h, w)
    du, dv = _diffs(grid, P_adv)
    d2 = du * du + dv * dv
    pos = d2 > 0
    log_d2 = np.log(np.where(pos, d2, 1.0))
    phi = _basis_from_d2(d2, grid, log_d2)
    coef = t.coef
    src = phi @ coef

    # d loss / d source location for each output pixel
    g = np.einsum("nc,ncd->nd", upstream.reshape(-1, ch), bilinear_sample_grad(x, src))

    # kernel terms depend directly on the sites
    s = (g @ coef[:k].T) * (log_d2 + pos)
    direct = -2.0 * np.stack([np.sum(s * du, axis=0), np.sum(s * dv, axis=0)], axis=1)

    # coefficients depend on the sites through the system matrix
    G = phi.T @ g
    lam = scipy.linalg.lu_solve(t._lu, G, check_finite=False)
    M = -lam @ coef.T
    Msym = M + M.T
    cdiff = P_adv[:, None, :] - P_adv[None, :, :]
    cd2 = np.einsum("ijd,ijd->ij", cdiff, cdiff)
    via_k = 2.0 * np.einsum("ij,ijd->id", Msym[:k, :k] * kernel_deriv(cd2), cdiff)
    via_q = Msym[:k, k + 1:]
    return direct + via_k + via_q


def _warp_jacobian_fd(x, P, P_adv, upstream, step):
    grad = np.zeros_like(P_adv)
    for i in range(P_adv.shape[0]):
        for d in range(2):
            plus = P_adv.copy()
            minus = P_adv.copy()
            plus[i, d] += step
            minus[i, d] -= step
            fp = np.sum(upstream * warp_image(x, P, plus))
            fm = np.sum(upstream * warp_image(x, P, minus))
            grad[i, d] = (fp - fm) / (2.0 * step)
    return grad
