"""PCA rotation and Lloyd k-means with an incremental-dimension schedule.

The staged k-means (``improved_kmeans``) rotates data into PCA space and
runs Lloyd iterations on a growing prefix of the rotated coordinates:
clustering structure found on the high-variance directions warm-starts
the clustering on the full space. Trailing coordinates of each centroid
are still updated as assigned-point means on every stage so that no
information is thrown away between stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .validation import check_vectors

__all__ = [
    "PcaModel",
    "Centroids",
    "pca_fit",
    "dimension_schedule",
    "lloyd_kmeans",
    "improved_kmeans",
    "quantization_error",
]


@dataclass(frozen=True)
class PcaModel:
    """Orthonormal rotation with rows ordered by descending variance."""

    rotation: np.ndarray            # (d, d) float64, rows are components
    mean: np.ndarray                # (d,) float64
    explained_variance: np.ndarray  # (d,) float64, non-increasing

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.rotation.T

    def inverse_transform(self, Y) -> np.ndarray:
        return np.asarray(Y, dtype=np.float64) @ self.rotation + self.mean


@dataclass
class Centroids:
    """k centroids plus the per-point nearest-centroid assignment.

    ``objective_trace`` records the mean squared distance (restricted to
    the active dimensions) measured at the start of each Lloyd iteration.
    """

    points: np.ndarray      # (k, d) float64
    assignment: np.ndarray  # (n,) int64
    objective_trace: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.points.shape[0]


def _complete_basis(components: np.ndarray, d: int) -> np.ndarray:
    """Extend a (r, d) orthonormal row set to a full (d, d) basis."""
    rows = [components[i] for i in range(components.shape[0])]
    for j in range(d):
        if len(rows) == d:
            break
        v = np.zeros(d)
        v[j] = 1.0
        for _ in range(2):  # re-orthogonalize for stability
            for u in rows:
                v -= (v @ u) * u
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            rows.append(v / norm)
    if len(rows) != d:
        raise RuntimeError("failed to complete an orthonormal basis")
    return np.vstack(rows)


def pca_fit(data) -> PcaModel:
    """Fit a full orthonormal PCA rotation of the (centered) data.

    Uses the covariance eigendecomposition when n > d and the Gram-matrix
    route otherwise; any missing directions (rank deficiency) are filled
    by Gram-Schmidt completion so the rotation is always invertible.
    """
    X = check_vectors(data, dtype=np.float64, name="data")
    n, d = X.shape
    if n < 2:
        raise ValueError(f"PCA needs at least 2 vectors, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if n > d:
        cov = (Xc.T @ Xc) / (n - 1)
        w, V = np.linalg.eigh(cov)
        order = np.argsort(w, kind="stable")[::-1]
        rotation = V[:, order].T
        variances = np.maximum(w[order], 0.0)
    else:
        gram = Xc @ Xc.T
        w, U = np.linalg.eigh(gram)
        order = np.argsort(w, kind="stable")[::-1]
        w = np.maximum(w[order], 0.0)
        U = U[:, order]
        tol = max(w[0], 1.0) * 1e-10 if w.size else 0.0
        keep = w > tol
        comps = (Xc.T @ U[:, keep]) / np.sqrt(w[keep])[None, :]
        rotation = _complete_basis(comps.T, d)
        variances = np.zeros(d)
        variances[: keep.sum()] = w[keep] / (n - 1)
    return PcaModel(rotation=rotation, mean=mean, explained_variance=variances)


def dimension_schedule(d: int, i_count: int = 10) -> list[int]:
    """Strictly increasing dimension-adding sequence ending at d.

    Stage i of i_count targets ceil(d ** (i / i_count)); duplicates are
    dropped and the final entry is forced to d.
    """
    if d < 1 or i_count < 1:
        raise ValueError("d and i_count must be >= 1")
    dims = []
    for i in range(1, i_count + 1):
        v = min(d, math.ceil(d ** (i / i_count)))
        if not dims or v > dims[-1]:
            dims.append(v)
    if dims[-1] != d:
        dims.append(d)
    return dims


def _centroid_points(init) -> np.ndarray:
    pts = init.points if isinstance(init, Centroids) else init
    return np.asarray(pts, dtype=np.float64)


def _assign(X_active, C_active):
    """Nearest centroid over the active coordinates; ties pick the lower index."""
    d2 = (
        (X_active * X_active).sum(axis=1)[:, None]
        - 2.0 * (X_active @ C_active.T)
        + (C_active * C_active).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    assign = np.argmin(d2, axis=1)
    return assign, d2[np.arange(X_active.shape[0]), assign]


def _group_means(X, assign, k):
    """Per-cluster means over all coordinates; empty clusters yield zero rows."""
    n, d = X.shape
    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, d))
    nonempty = np.flatnonzero(counts)
    if nonempty.size:
        boundaries = np.concatenate([[0], np.cumsum(counts[nonempty])[:-1]])
        sums[nonempty] = np.add.reduceat(X[order], boundaries, axis=0)
    means = sums / np.maximum(counts, 1)[:, None]
    return means, counts


def lloyd_kmeans(data, init, active_dims: int | None = None, max_iters: int = 30) -> Centroids:
    """Lloyd iterations using only the leading active_dims coordinates.

    Distances and the objective use the active prefix of the coordinates;
    centroid updates average assigned points over all coordinates. Empty
    clusters are re-seeded at the points with the largest current
    quantization error. Stops when assignments are stable or after
    max_iters; max_iters=0 just computes a fresh assignment for init.
    """
    X = np.asarray(data, dtype=np.float64)
    C = _centroid_points(init).copy()
    n, d = X.shape
    k = C.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    if active_dims is None:
        active_dims = d
    if not 1 <= active_dims <= d:
        raise ValueError(f"active_dims={active_dims} must be in [1, {d}]")
    Xa = X[:, :active_dims]
    trace: list[float] = []
    assign, errs = _assign(Xa, C[:, :active_dims])
    trace.append(float(errs.mean()))
    for _ in range(max_iters):
        means, counts = _group_means(X, assign, k)
        filled = np.flatnonzero(counts > 0)
        C[filled] = means[filled]
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # seed empties at the worst-quantized points, one point each
            worst = np.argsort(errs, kind="stable")[::-1][: empty.size]
            C[empty] = X[worst]
        new_assign, errs = _assign(Xa, C[:, :active_dims])
        trace.append(float(errs.mean()))
        stable = np.array_equal(new_assign, assign)
        assign = new_assign
        if stable:
            break
    return Centroids(points=C, assignment=assign.astype(np.int64), objective_trace=trace)


def quantization_error(data, centroids, active_dims: int | None = None) -> float:
    """Mean squared distance from each point to its nearest centroid."""
    X = np.asarray(data, dtype=np.float64)
    C = _centroid_points(centroids)
    a = X.shape[1] if active_dims is None else active_dims
    _, errs = _assign(X[:, :a], C[:, :a])
    return float(errs.mean())


def improved_kmeans(
    data,
    init,
    schedule: list[int] | None = None,
    max_iters: int = 30,
) -> Centroids:
    """Staged k-means in PCA space with a growing dimension prefix.

    Fits PCA on the data, rotates data and init, runs lloyd_kmeans at each
    schedule stage (warm-starting from the previous stage), and rotates the
    result back. Guaranteed not to increase the full-dimension quantization
    error relative to init: if the staged result ends up worse (possible on
    adversarial inputs), init is returned with a fresh assignment.
    """
    X = np.asarray(data, dtype=np.float64)
    C0 = _centroid_points(init)
    d = X.shape[1]
    if schedule is None:
        schedule = dimension_schedule(d)
    if schedule[-1] != d:
        raise ValueError(f"schedule must end at d={d}, got {schedule}")
    pca = pca_fit(X)
    Xr = pca.transform(X)
    Cr = pca.transform(C0)
    fit = None
    for dims in schedule:
        fit = lloyd_kmeans(Xr, Cr, active_dims=dims, max_iters=max_iters)
        Cr = fit.points
    C = pca.inverse_transform(Cr)
    final_assign, final_errs = _assign(X, C)
    init_assign, init_errs = _assign(X, C0)
    if final_errs.mean() <= init_errs.mean():
        return Centroids(points=C, assignment=final_assign.astype(np.int64),
                         objective_trace=fit.objective_trace)
    return Centroids(points=C0.copy(), assignment=init_assign.astype(np.int64),
                     objective_trace=[float(init_errs.mean())])
