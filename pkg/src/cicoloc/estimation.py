"""Gaussian estimates in moment and information form, and covariance intersection.

An estimate is stored either as ``(mean, covariance)`` or as
``(information mean, information matrix)``.  Infinite variance along some
coordinate is only representable in information form, as a zero row and
column of the information matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateFusion,
    DimensionMismatch,
    SingularCovariance,
    SingularInformation,
    SingularInnovation,
)

EIG_FLOOR = 1e-12
PSD_TOL = 1e-9

MOMENT = "moment"
INFORMATION = "information"


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def min_eig(a: np.ndarray) -> float:
    if a.size == 0:
        return np.inf
    return float(np.min(np.linalg.eigvalsh(symmetrize(a))[..., 0]))


def spd_inv(a: np.ndarray, floor: float = EIG_FLOOR, exc=SingularCovariance) -> np.ndarray:
    """Inverse of symmetric positive-definite matrices (leading axes are batch
    axes); raises ``exc`` if any eigenvalue is below ``floor``.

    The smallest eigenvalue is bounded below by 1 / trace(inverse), which is
    what gets compared with ``floor``; matrices within a factor n of the floor
    are therefore rejected as well.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    if a.size == 0:
        return a.copy()
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise exc("matrix is not positive definite") from e
    inv = np.linalg.inv(a)
    tr = np.trace(inv, axis1=-2, axis2=-1)
    if not np.all(np.isfinite(tr)) or np.max(tr) * floor > 1.0:
        raise exc(f"smallest eigenvalue below floor {floor:.1e}")
    return symmetrize(inv)


@dataclass(frozen=True, eq=False)
class GaussianEstimate:
    """A Gaussian estimate.

    ``vector``/``matrix`` hold mean/covariance in moment form and information
    mean/information matrix in information form.
    """

    vector: np.ndarray
    matrix: np.ndarray
    form: str = MOMENT

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=float).reshape(-1)
        mat = np.asarray(self.matrix, dtype=float)
        if mat.shape != (vec.size, vec.size):
            raise DimensionMismatch(f"vector of size {vec.size} with matrix of shape {mat.shape}")
        if self.form not in (MOMENT, INFORMATION):
            raise ValueError(f"unknown form {self.form!r}")
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def moment(cls, mean, cov) -> "GaussianEstimate":
        return cls(mean, cov, MOMENT)

    @classmethod
    def information(cls, info_mean, info_matrix) -> "GaussianEstimate":
        return cls(info_mean, info_matrix, INFORMATION)

    @property
    def dim(self) -> int:
        return self.vector.size

    @property
    def mean(self) -> np.ndarray:
        self._require(MOMENT)
        return self.vector

    @property
    def cov(self) -> np.ndarray:
        self._require(MOMENT)
        return self.matrix

    @property
    def info_mean(self) -> np.ndarray:
        self._require(INFORMATION)
        return self.vector

    @property
    def info_matrix(self) -> np.ndarray:
        self._require(INFORMATION)
        return self.matrix

    def _require(self, form):
        if self.form != form:
            raise AttributeError(f"estimate is in {self.form} form, not {form}")


@dataclass(frozen=True, eq=False)
class CIWeights:
    """Convex coefficients for covariance intersection."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise ValueError("empty weight vector")
        if np.any(w < 0):
            raise ValueError(f"negative CI weight in {w}")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"CI weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def __getitem__(self, k):
        return self.weights[k]

    @classmethod
    def equal(cls, n: int) -> "CIWeights":
        return cls(np.full(n, 1.0 / n))


def to_information(est: GaussianEstimate, floor: float = EIG_FLOOR) -> GaussianEstimate:
    if est.form == INFORMATION:
        return est
    info = spd_inv(est.cov, floor, SingularCovariance)
    return GaussianEstimate.information(info @ est.mean, info)


def from_information(est: GaussianEstimate, floor: float = EIG_FLOOR) -> GaussianEstimate:
    """Convert back to moment form.

    Raises SingularInformation when any direction carries no information;
    such estimates have to be fused with something first.
    """
    if est.form == MOMENT:
        return est
    cov = spd_inv(est.info_matrix, floor, SingularInformation)
    return GaussianEstimate.moment(cov @ est.info_mean, cov)


def _check_same_dim(estimates: Sequence[GaussianEstimate]) -> int:
    if not estimates:
        raise ValueError("no estimates given")
    dim = estimates[0].dim
    for e in estimates[1:]:
        if e.dim != dim:
            raise DimensionMismatch(f"estimates of dimension {dim} and {e.dim}")
    return dim


def ci_fuse(estimates: Sequence[GaussianEstimate], w: CIWeights | Sequence[float],
            floor: float = EIG_FLOOR) -> GaussianEstimate:
    """Covariance intersection: convex combination in information space.

    Inputs may be in either form; the result is in information form.
    """
    if not isinstance(w, CIWeights):
        w = CIWeights(w)
    dim = _check_same_dim(estimates)
    if len(w) != len(estimates):
        raise DimensionMismatch(f"{len(estimates)} estimates but {len(w)} weights")
    info = np.zeros((dim, dim))
    info_mean = np.zeros(dim)
    for c, e in zip(w.weights, estimates):
        if c == 0.0:
            continue
        e = to_information(e, floor)
        info += c * e.info_matrix
        info_mean += c * e.info_mean
    info = symmetrize(info)
    if min_eig(info) < floor:
        raise DegenerateFusion("fused information matrix is singular")
    return GaussianEstimate.information(info_mean, info)


def information_sum(estimates: Sequence[GaussianEstimate]) -> GaussianEstimate:
    """Naive fusion that treats the inputs as independent.

    Over-confident whenever the inputs are correlated; kept as a negative
    control for consistency experiments.
    """
    dim = _check_same_dim(estimates)
    info = np.zeros((dim, dim))
    info_mean = np.zeros(dim)
    for e in estimates:
        e = to_information(e)
        info += e.info_matrix
        info_mean += e.info_mean
    return GaussianEstimate.information(info_mean, symmetrize(info))


# --- weight selection -------------------------------------------------------

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _fused_trace(infos: Sequence[np.ndarray], c: np.ndarray) -> float:
    m = sum(ci * I for ci, I in zip(c, infos))
    w = np.linalg.eigvalsh(symmetrize(m))
    if w[0] < EIG_FLOOR:
        return np.inf
    return float(np.sum(1.0 / w))


def _golden_min(f, lo, hi, iters=60):
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def _line_search(f, grid_step=0.01):
    """Minimize f on [0, 1]: grid, then golden refinement around the best cell.

    Ties on the grid go to the point nearest 0.5 so symmetric problems
    return symmetric weights.
    """
    grid = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)
    vals = np.array([f(x) for x in grid])
    best = np.min(vals)
    if not np.isfinite(best):
        return 0.5, best
    tie = np.flatnonzero(vals <= best + 1e-12 * max(1.0, abs(best)))
    k = tie[np.argmin(np.abs(grid[tie] - 0.5))]
    x, fx = grid[k], vals[k]
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    xr, fr = _golden_min(f, lo, hi)
    if fr < fx - 1e-12 * max(1.0, abs(fx)):
        x, fx = xr, fr
    return float(x), float(fx)


def min_trace_pair_batch(a: np.ndarray, b: np.ndarray, grid_step: float = 0.01,
                         newton_iters: int = 8) -> np.ndarray:
    """Weight on ``a`` minimizing trace((w a + (1-w) b)^-1), for stacks of
    information-matrix pairs with ``a`` positive definite.

    Both matrices are diagonalized together, which turns the trace into
    sum_k s_k / (w + (1-w) mu_k), a convex function of w.  It is evaluated
    on a grid (ties go to the point nearest 0.5) and then polished by
    Newton steps kept inside the neighbouring grid cells.
    """
    L = np.linalg.cholesky(a)
    Linv = np.linalg.inv(L)
    M = Linv @ b @ np.swapaxes(Linv, -1, -2)
    mu, U = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    mu = np.clip(mu, 0.0, None)
    V = np.swapaxes(Linv, -1, -2) @ U
    scale = np.sum(V * V, axis=-2)

    def trace_at(x):
        # x: (..., G) -> (..., G)
        d = x[..., None] + (1.0 - x[..., None]) * mu[..., None, :]
        ok = np.all(d > EIG_FLOOR, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.sum(scale[..., None, :] / np.where(d > EIG_FLOOR, d, 1.0), axis=-1)
        return np.where(ok, val, np.inf)

    grid = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)
    batch = mu.shape[:-1]
    vals = trace_at(np.broadcast_to(grid, batch + grid.shape))
    best = vals.min(axis=-1, keepdims=True)
    finite = np.isfinite(best[..., 0])
    tie = vals <= best + 1e-12 * np.maximum(1.0, np.abs(np.where(np.isfinite(best), best, 0.0)))
    k = np.argmin(np.where(tie, np.abs(grid - 0.5), np.inf), axis=-1)
    x0 = grid[k]
    f0 = np.take_along_axis(vals, k[..., None], axis=-1)[..., 0]
    lo = np.maximum(grid[np.maximum(k - 1, 0)], EIG_FLOOR)
    hi = grid[np.minimum(k + 1, grid.size - 1)]

    x = x0.copy()
    one_minus_mu = 1.0 - mu
    for _ in range(newton_iters):
        d = x[..., None] + (1.0 - x[..., None]) * mu
        d = np.maximum(d, EIG_FLOOR)
        g1 = -np.sum(scale * one_minus_mu / d**2, axis=-1)
        g2 = 2.0 * np.sum(scale * one_minus_mu**2 / d**3, axis=-1)
        step = np.where(g2 > 0, g1 / np.where(g2 > 0, g2, 1.0), 0.0)
        x = np.clip(x - step, lo, hi)
    fx = trace_at(x[..., None])[..., 0]
    better = fx < f0 - 1e-12 * np.maximum(1.0, np.abs(np.where(np.isfinite(f0), f0, 0.0)))
    w = np.where(better, x, x0)
    return np.where(finite, w, 0.5)


def min_trace_pair(a: np.ndarray, b: np.ndarray, grid_step: float = 0.01) -> np.ndarray:
    """Weights [w, 1-w] minimizing the trace of the CI fusion of two information matrices."""
    for first, second, flip in ((a, b, False), (b, a, True)):
        try:
            w = float(min_trace_pair_batch(first[None], second[None], grid_step)[0])
        except np.linalg.LinAlgError:
            continue
        return np.array([1.0 - w, w]) if flip else np.array([w, 1.0 - w])
    infos = [a, b]
    c, _ = _line_search(lambda x: _fused_trace(infos, np.array([x, 1.0 - x])), grid_step)
    return np.array([c, 1.0 - c])


def select_ci_weights(estimates: Sequence[GaussianEstimate], strategy: str = "equal",
                      max_iter: int = 100) -> CIWeights:
    """Choose CI weights.

    ``equal`` gives 1/N each.  ``min_trace`` minimizes the trace of the fused
    covariance: a grid plus golden-section search for two inputs, projected
    coordinate descent from the equal-weight point otherwise.
    """
    n = len(estimates)
    if n == 0:
        raise ValueError("no estimates given")
    if strategy == "equal" or n == 1:
        return CIWeights.equal(n)
    if strategy != "min_trace":
        raise ValueError(f"unknown weight strategy {strategy!r}")

    infos = [to_information(e).info_matrix for e in estimates]
    if n == 2:
        return CIWeights(min_trace_pair(infos[0], infos[1]))

    w = np.full(n, 1.0 / n)
    fw = _fused_trace(infos, w)
    for _ in range(max_iter):
        improved = False
        for k in range(n):
            rest = w.copy()
            rest[k] = 0.0
            s = rest.sum()
            if s <= 0.0:
                continue
            rest /= s

            def along(t, k=k, rest=rest):
                c = (1.0 - t) * rest
                c[k] += t
                return _fused_trace(infos, c)

            t, ft = _line_search(along, grid_step=0.05)
            if ft < fw - 1e-12 * max(1.0, abs(fw)):
                w = (1.0 - t) * rest
                w[k] += t
                fw = ft
                improved = True
        if not improved:
            break
    w = np.clip(w, 0.0, None)
    return CIWeights(w / w.sum())


def is_consistent_of(candidate: GaussianEstimate, reference: GaussianEstimate,
                     mean_tol: float) -> bool:
    """True when ``candidate`` has the reference mean and no smaller covariance."""
    if candidate.dim != reference.dim:
        raise DimensionMismatch(f"dimensions {candidate.dim} and {reference.dim}")
    if np.linalg.norm(candidate.mean - reference.mean) > mean_tol:
        return False
    return min_eig(candidate.cov - reference.cov) >= -PSD_TOL


def kalman_update(mean: np.ndarray, cov: np.ndarray, H: np.ndarray, R: np.ndarray,
                  residual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """EKF measurement update in Joseph form.

    Algebraically identical to adding ``H^T R^-1 H`` to the information
    matrix, but also valid for singular priors.  Leading axes are batch axes.
    """
    Ht = np.swapaxes(H, -1, -2)
    PHt = cov @ Ht
    S = H @ PHt + R
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    K = np.swapaxes(np.linalg.solve(S, np.swapaxes(PHt, -1, -2)), -1, -2)
    A = np.eye(cov.shape[-1]) - K @ H
    new_cov = A @ cov @ np.swapaxes(A, -1, -2) + K @ R @ np.swapaxes(K, -1, -2)
    new_cov = 0.5 * (new_cov + np.swapaxes(new_cov, -1, -2))
    return mean + (K @ residual[..., None])[..., 0], new_cov
