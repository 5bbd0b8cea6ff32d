"""Entropy diagnostics for encodings plus the recall/latency harness.

The MI matrix uses the jackknifed plug-in entropy estimator: the raw
plug-in has a severe downward bias on sparse joint histograms (a K=256
pair table holds 65536 cells), which shows up as ~0.5 bits of spurious
mutual information between independent parts at 1e5 samples. The
jackknife removes the first-order bias while remaining a pure function of
the count histogram, so degenerate cases stay exact: identical parts give
I(a;b) = H(a) and constant parts give zero. The locality profile instead
chains raw plug-in joint entropies, whose monotonicity keeps every
conditional-entropy layer non-negative; it is consumed comparatively, so
its bias cancels across methods.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .codebook import EncodedDataset
from .data import GroundTruth
from .validation import substream

__all__ = [
    "MiMatrix",
    "LocalityProfile",
    "EvalReport",
    "entropy_bits",
    "mi_matrix",
    "locality_profile",
    "evaluate",
    "write_report_csv",
    "write_report_json",
    "write_matrix_csv",
]


def entropy_bits(counts, estimator: str = "jackknife") -> float:
    """Entropy in bits from a count histogram (zeros ignored).

    "plugin" is the empirical-frequency estimate; "jackknife" (default)
    is the leave-one-out debiased version. Both depend only on the
    multiset of nonzero counts.
    """
    n = np.asarray(counts, dtype=np.float64).ravel()
    n = n[n > 0]
    total = n.sum()
    if total <= 0 or n.size == 1:
        return 0.0
    logn = np.log2(n)
    plug = np.log2(total) - float((n * logn).sum()) / total
    if estimator == "plugin":
        return plug
    if estimator != "jackknife":
        raise ValueError(f"unknown estimator {estimator!r}")
    if total < 2:
        return plug
    # closed-form leave-one-out mean: removing one sample from cell i
    nm1 = np.where(n > 1, n - 1, 1.0)
    t_all = float((n * logn).sum())
    t_loo = t_all - n * logn + (n - 1) * np.log2(nm1)
    h_loo = np.log2(total - 1) - t_loo / (total - 1)
    h_mean = float((n * h_loo).sum()) / total
    return total * plug - (total - 1) * h_mean


@dataclass(frozen=True)
class MiMatrix:
    """M x M matrix: diagonal H(I_m), off-diagonal I(I_a; I_b), in bits."""

    values: np.ndarray
    sample_size: int

    @property
    def m_count(self) -> int:
        return self.values.shape[0]


def _pair_counts(a, b, k_count):
    keys = a.astype(np.int64) * k_count + b.astype(np.int64)
    return np.unique(keys, return_counts=True)[1]


def mi_matrix(encoded: EncodedDataset, sample_cap: int = 100_000, seed: int = 0) -> MiMatrix:
    """Entropy/mutual-information matrix of the code parts.

    Uses a seeded uniform subsample of at most sample_cap rows. Each
    unordered pair is estimated once and mirrored, so the matrix is
    exactly symmetric.
    """
    if encoded.n < 2:
        raise ValueError("need at least 2 encoded vectors")
    codes = encoded.codes
    if encoded.n > sample_cap:
        rows = substream(seed, "diagnostics.mi").choice(encoded.n, size=sample_cap,
                                                        replace=False)
        rows.sort()
        codes = codes[rows]
    M = encoded.m_count
    K = encoded.k_count
    out = np.zeros((M, M))
    marg = []
    for m in range(M):
        counts = np.unique(codes[:, m], return_counts=True)[1]
        h = entropy_bits(counts)
        marg.append(h)
        out[m, m] = h
    for a in range(M):
        for b in range(a + 1, M):
            h_ab = entropy_bits(_pair_counts(codes[:, a], codes[:, b], K))
            mi = (marg[a] + marg[b]) - h_ab
            out[a, b] = mi
            out[b, a] = mi
    return MiMatrix(values=out, sample_size=codes.shape[0])


@dataclass(frozen=True)
class LocalityProfile:
    """Per-layer conditional entropy of codes over pooled neighborhoods.

    per_layer[m] estimates how much of part m remains undetermined once
    the parts before it are known, within near-neighbor populations; a
    fast decay means prefixes aggregate local vectors.
    """

    per_layer: np.ndarray      # (M,) bits
    mi: MiMatrix               # neighborhood-restricted MI matrix
    anchor_count: int
    pooled_size: int

    @property
    def joint_entropy(self) -> float:
        return float(self.per_layer.sum())


def locality_profile(
    encoded: EncodedDataset,
    ground_truth: GroundTruth,
    neighborhood_k: int,
    anchor_cap: int = 10_000,
    seed: int = 0,
    exclude_ids=None,
) -> LocalityProfile:
    """Conditional code entropies over pooled anchor neighborhoods.

    Pools the codes of each sampled anchor's neighborhood_k nearest
    neighbors (dropping the anchor itself when ``exclude_ids`` gives the
    anchors' own base ids) and chain-rules the prefix joint entropies on
    that population. The prefix histograms are sparse.
    """
    if neighborhood_k < 1 or neighborhood_k > ground_truth.depth:
        raise ValueError(
            f"neighborhood_k={neighborhood_k} exceeds ground-truth depth "
            f"{ground_truth.depth}"
        )
    nq = ground_truth.n_queries
    anchors = np.arange(nq)
    if nq > anchor_cap:
        anchors = substream(seed, "diagnostics.locality").choice(nq, size=anchor_cap,
                                                                 replace=False)
        anchors.sort()
    neigh = ground_truth.ids[anchors]
    if exclude_ids is not None:
        exclude_ids = np.asarray(exclude_ids)[anchors]
        keep = neigh != exclude_ids[:, None]
        # drop at most one self match per row, then take the first k columns
        pooled_rows = [row[k][:neighborhood_k] for row, k in zip(neigh, keep)]
        neighbor_ids = np.concatenate(pooled_rows)
    else:
        neighbor_ids = neigh[:, :neighborhood_k].ravel()
    pool = encoded.codes[neighbor_ids].astype(np.int64)
    M = encoded.m_count
    K = encoded.k_count
    # plug-in entropies here: the chain needs monotone joint entropies so
    # every layer value is >= 0, and the profile is used comparatively
    # (bias cancels across methods at fixed sample size)
    per_layer = np.zeros(M)
    prev_h = 0.0
    gid = np.zeros(pool.shape[0], dtype=np.int64)
    for m in range(M):
        keys = gid * K + pool[:, m]
        _, gid = np.unique(keys, return_inverse=True)
        counts = np.bincount(gid)
        h = entropy_bits(counts, estimator="plugin")
        per_layer[m] = h - prev_h
        prev_h = h
    restricted = mi_matrix(
        EncodedDataset(pool.astype(encoded.codes.dtype), K),
        sample_cap=pool.shape[0], seed=seed,
    )
    return LocalityProfile(per_layer=per_layer, mi=restricted,
                           anchor_count=anchors.size, pooled_size=pool.shape[0])


@dataclass
class EvalReport:
    """Recall and latency summary for one searcher configuration."""

    recalls: dict                      # r -> recall@r (true 1-NN found in top r)
    mean_latency_s: float
    median_latency_s: float
    n_queries: int
    nodes_visited_mean: float | None = None
    nodes_visited_max: int | None = None
    params: dict = field(default_factory=dict)

    def rows(self):
        for r in sorted(self.recalls):
            yield {"metric": f"recall@{r}", "value": self.recalls[r]}
        yield {"metric": "mean_latency_s", "value": self.mean_latency_s}
        yield {"metric": "median_latency_s", "value": self.median_latency_s}
        yield {"metric": "n_queries", "value": self.n_queries}
        if self.nodes_visited_mean is not None:
            yield {"metric": "nodes_visited_mean", "value": self.nodes_visited_mean}
            yield {"metric": "nodes_visited_max", "value": self.nodes_visited_max}
        for k, v in self.params.items():
            yield {"metric": f"param.{k}", "value": v}


def evaluate(
    searcher,
    queries,
    ground_truth: GroundTruth,
    r: int = 100,
    recall_points=(1, 10, 100),
    params: dict | None = None,
) -> EvalReport:
    """Run every query through a searcher and score recall@r points.

    ``searcher`` needs kneighbors(Q, n_neighbors) -> (distances, ids); a
    searcher that also exposes ``last_stats_`` (one SearchStats per query)
    contributes nodes-visited statistics. recall@r is the fraction of
    queries whose true nearest neighbor appears among the r returned.
    Latency is wall-clock per query, excluding ground-truth work.
    """
    queries = np.asarray(queries)
    nq = queries.shape[0]
    if ground_truth.n_queries != nq:
        raise ValueError("ground truth does not cover the query set")
    points = sorted({p for p in recall_points if p <= r} | {r})
    true_nn = ground_truth.ids[:, 0]
    hits = {p: 0 for p in points}
    latencies = np.empty(nq)
    visited = []
    for i in range(nq):
        t0 = time.perf_counter()
        _, ids = searcher.kneighbors(queries[i : i + 1], n_neighbors=r)
        latencies[i] = time.perf_counter() - t0
        row = ids[0]
        stats = getattr(searcher, "last_stats_", None)
        if stats:
            visited.append(stats[-1].nodes_visited)
        where = np.flatnonzero(row == true_nn[i])
        if where.size:
            rank = int(where[0])
            for p in points:
                if rank < p:
                    hits[p] += 1
    recalls = {p: hits[p] / nq for p in points}
    return EvalReport(
        recalls=recalls,
        mean_latency_s=float(latencies.mean()),
        median_latency_s=float(np.median(latencies)),
        n_queries=nq,
        nodes_visited_mean=float(np.mean(visited)) if visited else None,
        nodes_visited_max=int(np.max(visited)) if visited else None,
        params=dict(params or {}),
    )


def write_report_csv(path, rows, fieldnames=None) -> None:
    """Dict-row CSV (RFC 4180 quoting); header from the first row."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else ["metric", "value"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_report_json(path, payload: dict) -> None:
    payload = {"schema_version": 1, **payload}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_matrix_csv(path, matrix) -> None:
    """Plot-ready CSV grid for an M x M matrix."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in matrix:
            writer.writerow([f"{v:.6f}" for v in row])
