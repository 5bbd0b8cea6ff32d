"""Dataset ingestion, synthetic data, and exact nearest-neighbor ground truth.

File formats follow the texmex corpus conventions: every record is a
little-endian i32 dimension header followed by the payload (f32 values for
fvecs, raw bytes for bvecs, i32 values for ivecs). All records in a file
must share one dimensionality.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .validation import FormatError, check_vectors

__all__ = [
    "GroundTruth",
    "read_fvecs",
    "write_fvecs",
    "read_bvecs",
    "read_ivecs",
    "write_ivecs",
    "brute_force_knn",
    "generate_synthetic",
]


@dataclass(frozen=True)
class GroundTruth:
    """Exact top-r neighbors per query: ids ascending by true distance.

    Ties on distance resolve to the lower id. Immutable once built and
    safe to share across threads.
    """

    ids: np.ndarray        # (nq, r) int64
    distances: np.ndarray  # (nq, r) float64, squared L2, non-decreasing per row

    @property
    def n_queries(self) -> int:
        return self.ids.shape[0]

    @property
    def depth(self) -> int:
        return self.ids.shape[1]


def _parse_records(raw: bytes, path, payload_bytes_per_value: int):
    """Split a dim-header record stream; returns (n, d, payload byte view).

    payload_bytes_per_value is 4 for fvecs/ivecs, 1 for bvecs.
    """
    size = len(raw)
    if size == 0:
        return 0, 0, memoryview(b"")
    if size < 4:
        raise FormatError(f"{path}: truncated record header at byte offset 0")
    d = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if d <= 0:
        raise FormatError(f"{path}: invalid dimension header {d} at byte offset 0")
    record = 4 + d * payload_bytes_per_value
    n = size // record
    # all full-record headers must agree with the first (checked before the
    # trailing-bytes complaint so a mid-file dimension switch is named)
    if n:
        u8 = np.frombuffer(raw, dtype=np.uint8)[: n * record].reshape(n, record)
        headers = u8[:, :4].copy().view("<i4").ravel()
        bad = np.flatnonzero(headers != d)
        if bad.size:
            i = int(bad[0])
            raise FormatError(
                f"{path}: inconsistent dimensions {d} and {int(headers[i])} "
                f"at byte offset {i * record}"
            )
    leftover = size - n * record
    if leftover:
        base = n * record
        if leftover < 4:
            raise FormatError(f"{path}: truncated record header at byte offset {base}")
        d_last = int(np.frombuffer(raw, dtype="<i4", count=1, offset=base)[0])
        if d_last != d:
            raise FormatError(
                f"{path}: inconsistent dimensions {d} and {d_last} at byte offset {base}"
            )
        raise FormatError(f"{path}: truncated record at byte offset {base + 4}")
    return n, d, raw


def read_fvecs(path) -> np.ndarray:
    """Read an fvecs file into an (n, d) float32 array, bit-exact.

    An empty file yields an empty (0, 0) array.
    """
    with open(path, "rb") as f:
        raw = f.read()
    n, d, _ = _parse_records(raw, path, 4)
    if n == 0:
        return np.empty((0, 0), dtype=np.float32)
    flat = np.frombuffer(raw, dtype="<f4").reshape(n, d + 1)
    out = np.ascontiguousarray(flat[:, 1:], dtype=np.float32)
    if not np.isfinite(out).all():
        raise FormatError(f"{path}: non-finite value in payload")
    return out


def write_fvecs(path, X) -> None:
    """Write an (n, d) float array as fvecs; read_fvecs round-trips it."""
    X = check_vectors(X, name="X", allow_empty=True)
    n, d = X.shape
    with open(path, "wb") as f:
        if n == 0:
            return
        rec = np.empty((n, d + 1), dtype="<f4")
        rec[:, 0:1] = np.frombuffer(
            np.full(n, d, dtype="<i4").tobytes(), dtype="<f4"
        ).reshape(n, 1)
        rec[:, 1:] = X
        f.write(rec.tobytes())


def read_bvecs(path) -> np.ndarray:
    """Read a bvecs file, widening unsigned bytes exactly to float32."""
    with open(path, "rb") as f:
        raw = f.read()
    n, d, _ = _parse_records(raw, path, 1)
    if n == 0:
        return np.empty((0, 0), dtype=np.float32)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, 4 + d)
    return rec[:, 4:].astype(np.float32)


def read_ivecs(path) -> np.ndarray:
    """Read an ivecs file into an (n, d) int64 array."""
    with open(path, "rb") as f:
        raw = f.read()
    n, d, _ = _parse_records(raw, path, 4)
    if n == 0:
        return np.empty((0, 0), dtype=np.int64)
    flat = np.frombuffer(raw, dtype="<i4").reshape(n, d + 1)
    return flat[:, 1:].astype(np.int64)


def write_ivecs(path, rows) -> None:
    """Write a rectangular integer matrix as ivecs (i32 range enforced)."""
    rows = np.asarray(rows)
    if rows.ndim == 1 and rows.size == 0:
        rows = rows.reshape(0, 0)
    if rows.ndim != 2:
        raise ValueError(f"rows must be rectangular 2-D, got shape {rows.shape}")
    n, d = rows.shape
    if rows.size and (rows.min() < np.iinfo(np.int32).min or rows.max() > np.iinfo(np.int32).max):
        raise ValueError("rows contain values outside the i32 range")
    try:
        with open(path, "wb") as f:
            if n == 0:
                return
            rec = np.empty((n, d + 1), dtype="<i4")
            rec[:, 0] = d
            rec[:, 1:] = rows
            f.write(rec.tobytes())
    except OSError as e:
        raise OSError(f"failed writing {path}: {e}") from e


def _knn_block(base64, base_sq, queries, r):
    """Exact top-r for one block of queries (float64 expansion arithmetic)."""
    q = queries.astype(np.float64, copy=False)
    d2 = np.maximum(
        (q * q).sum(axis=1)[:, None] - 2.0 * (q @ base64.T) + base_sq[None, :], 0.0
    )
    nq = d2.shape[0]
    ids = np.empty((nq, r), dtype=np.int64)
    dists = np.empty((nq, r), dtype=np.float64)
    for i in range(nq):
        row = d2[i]
        kth = np.partition(row, r - 1)[r - 1]
        cand = np.flatnonzero(row <= kth)
        order = np.lexsort((cand, row[cand]))[:r]  # distance, then lower id
        sel = cand[order]
        ids[i] = sel
        dists[i] = row[sel]
    return ids, dists


def brute_force_knn(base, queries, r: int, n_jobs: int = 1) -> GroundTruth:
    """Exact squared-L2 top-r per query; ties broken by lower id.

    Parallelizes over query blocks when n_jobs > 1; results are identical
    to the sequential computation.
    """
    base = check_vectors(base, name="base")
    queries = check_vectors(queries, name="queries")
    if base.shape[1] != queries.shape[1]:
        raise ValueError(
            f"dimension mismatch: base d={base.shape[1]}, queries d={queries.shape[1]}"
        )
    if r < 1 or r > base.shape[0]:
        raise ValueError(f"r={r} must be in [1, {base.shape[0]}]")
    base64 = base.astype(np.float64)
    base_sq = (base64 * base64).sum(axis=1)
    nq = queries.shape[0]
    block = max(1, min(nq, int(2e7) // max(base.shape[0], 1)))
    starts = list(range(0, nq, block))
    if n_jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(
                pool.map(lambda s: _knn_block(base64, base_sq, queries[s : s + block], r), starts)
            )
    else:
        parts = [_knn_block(base64, base_sq, queries[s : s + block], r) for s in starts]
    ids = np.vstack([p[0] for p in parts])
    dists = np.vstack([p[1] for p in parts])
    return GroundTruth(ids=ids, distances=dists)


def generate_synthetic(
    n: int,
    d: int,
    mode: str = "gaussian-mixture",
    clusters: int = 16,
    spread: float = 0.05,
    seed: int = 0,
) -> np.ndarray:
    """Deterministic synthetic vectors; float32, shape (n, d).

    "gaussian-mixture" draws cluster centers uniformly in [0, 1]^d and
    adds isotropic gaussian noise with standard deviation ``spread``.
    "uniform" fills [0, 1]^d.
    """
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        return rng.random((n, d)).astype(np.float32)
    if mode != "gaussian-mixture":
        raise ValueError(f"unknown mode {mode!r}")
    if clusters < 1 or clusters > n:
        raise ValueError(f"clusters={clusters} must be in [1, n={n}]")
    centers = rng.random((clusters, d))
    which = rng.integers(0, clusters, size=n)
    X = centers[which] + spread * rng.standard_normal((n, d))
    return X.astype(np.float32)
