"""Prefix tree over encodings with O(1) incremental query-node distances.

The tree is a trie over the M-part codes. Any maximal single-child chain
that ends in a leaf is compressed into the leaf as a suffix list; internal
single-child chains that branch again deeper stay as ordinary nodes.
Duplicate full codes collapse into one leaf holding several vector ids.

Every node (and every compressed suffix step) stores the scalar

    epsilon = c_m(p_m) . sum_{i<m} c_i(p_i)

for its position on the path p, so the squared distance between a query
and the node's partial reconstruction T extends the parent distance with
one table lookup and three additions:

    ||q - T||^2 = ||q - T'||^2 + table[m][p_m] - ||q||^2 + 2 epsilon

Search walks the layers breadth-first, keeping at most L_i candidates per
layer by distance; with unbounded budgets it reproduces exhaustive ADC.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import _traverse
from .codebook import Codebook, CrossProductTable, EncodedDataset, adc_table
from .validation import FormatError, check_query

__all__ = [
    "ATree",
    "SearchParams",
    "SearchStats",
    "build_atree",
    "node_distance",
    "atree_search",
    "serialize_atree",
    "deserialize_atree",
]

TREE_MAGIC = b"HCLT"
TREE_VERSION = 1


@dataclass(frozen=True)
class SearchParams:
    """Per-layer candidate budgets, explicit or geometric (l0 * ls ** i)."""

    l0: int = 8
    ls: float = 2.0
    r: int = 10
    budgets: tuple | None = None  # explicit per-layer override

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.budgets is None and (self.l0 < 1 or self.ls <= 0):
            raise ValueError("l0 must be >= 1 and ls > 0")

    def layer_budgets(self, m_count: int) -> np.ndarray:
        if self.budgets is not None:
            b = np.asarray(self.budgets, dtype=np.int64)
            if b.shape != (m_count,) or (b < 1).any():
                raise ValueError(f"budgets must be {m_count} positive ints")
            return b
        i = np.arange(1, m_count + 1, dtype=np.float64)
        vals = np.floor(self.l0 * self.ls ** i + 0.5)
        return np.maximum(vals, 1.0).astype(np.int64)


@dataclass
class SearchStats:
    """Work accounting for one query.

    nodes_visited counts distinct tree nodes scored (each leaf once, at
    entry); table_lookups additionally counts the per-layer distance
    updates inside compressed suffixes, one lookup per update.
    """

    nodes_visited: int = 0
    table_lookups: int = 0
    per_layer_sizes: list = field(default_factory=list)
    table_seconds: float = 0.0
    traversal_seconds: float = 0.0


@dataclass
class ATree:
    """Flat-array tree; children of a node occupy a contiguous id range.

    Node ids are assigned level by level in code order, so child lookup is
    a range scan. ``leaf_ref[v] >= 0`` marks node v as a leaf and indexes
    the leaf tables (compressed suffix plus vector ids). Immutable after
    build; concurrent searches need no coordination.
    """

    codebook_hash: bytes
    m_count: int
    k_count: int
    n_root_children: int
    code: np.ndarray         # (n_nodes,) int32
    eps: np.ndarray          # (n_nodes,) float32
    child_lo: np.ndarray     # (n_nodes,) int64
    child_hi: np.ndarray     # (n_nodes,) int64
    leaf_ref: np.ndarray     # (n_nodes,) int64, -1 for internal nodes
    suffix_lo: np.ndarray    # (n_leaves,) int64
    suffix_hi: np.ndarray    # (n_leaves,) int64
    suffix_code: np.ndarray  # (total_suffix,) int32
    suffix_eps: np.ndarray   # (total_suffix,) float32
    ids_lo: np.ndarray       # (n_leaves,) int64
    ids_hi: np.ndarray       # (n_leaves,) int64
    leaf_ids: np.ndarray     # (n_ids,) int64

    @property
    def leaf_count(self) -> int:
        return self.suffix_lo.shape[0]

    @property
    def internal_count(self) -> int:
        return self.code.shape[0] - self.leaf_count

    @property
    def node_count(self) -> int:
        """Leaf plus internal nodes; the code-less root is not counted."""
        return self.code.shape[0]

    @property
    def n_ids(self) -> int:
        return self.leaf_ids.shape[0]


def _select_smallest(values: np.ndarray, count: int) -> np.ndarray:
    """Indices of the count smallest values; boundary ties keep lower index."""
    if values.size <= count:
        return np.arange(values.size)
    part = np.argpartition(values, count - 1)[:count]
    kth = values[part].max()
    strict = np.flatnonzero(values < kth)
    need = count - strict.size
    boundary = np.flatnonzero(values == kth)[:need]
    keep = np.concatenate([strict, boundary])
    keep.sort()
    return keep


def _prefix_epsilons(cross: CrossProductTable, prefixes, m: int) -> np.ndarray:
    """epsilon for depth-m nodes: rows of (.., m+1) code prefixes."""
    out = np.zeros(prefixes.shape[0])
    for i in range(m):
        out += cross.products[i, m][prefixes[:, i], prefixes[:, m]]
    return out


def build_atree(encoded: EncodedDataset, codebook: Codebook,
                cross: CrossProductTable | None = None) -> ATree:
    """Build the prefix tree for an encoded dataset.

    The codebook must be the one (and in the same dictionary order) that
    produced the codes; when the encoded dataset carries a codebook hash
    it is checked here.
    """
    from .codebook import cross_products

    cb_hash = codebook.content_hash()
    if encoded.codebook_hash is not None and encoded.codebook_hash != cb_hash:
        raise FormatError("encoded dataset was produced by a different codebook",
                          exit_code=2)
    if encoded.m_count != codebook.m_count or encoded.k_count != codebook.k_count:
        raise ValueError("encoded shape does not match the codebook")
    if cross is None:
        cross = cross_products(codebook)
    M = codebook.m_count
    n = encoded.n
    ids = (np.arange(n, dtype=np.int64) if encoded.id_map is None
           else encoded.id_map)
    empty32 = np.empty(0, dtype=np.int32)
    emptyf = np.empty(0, dtype=np.float32)
    empty64 = np.empty(0, dtype=np.int64)
    if n == 0:
        return ATree(cb_hash, M, codebook.k_count, 0, empty32, emptyf,
                     empty64, empty64, empty64, empty64, empty64,
                     empty32, emptyf, empty64, empty64, empty64)

    codes = encoded.codes.astype(np.int64)
    row_order = np.lexsort(tuple(codes[:, m] for m in reversed(range(M))))
    S = codes[row_order]
    sorted_ids = ids[row_order]

    # collapse duplicate full codes into groups
    if n > 1:
        new_code_row = np.concatenate([[True], (S[1:] != S[:-1]).any(axis=1)])
    else:
        new_code_row = np.array([True])
    U = S[new_code_row]                      # (g, M) distinct codes, lex order
    g = U.shape[0]
    group_start = np.flatnonzero(new_code_row)
    group_end = np.append(group_start[1:], n)

    # per-depth distinct-prefix boundaries over U
    new_at = np.empty((M, g), dtype=bool)
    new_at[:, 0] = True
    if g > 1:
        acc = np.zeros(g - 1, dtype=bool)
        for m in range(M):
            acc = acc | (U[1:, m] != U[:-1, m])
            new_at[m, 1:] = acc

    # walk levels: a prefix is materialized only while no ancestor became a leaf
    level_nodes = []         # per level: dict of arrays describing nodes
    alive = None             # bool over level-(m) prefixes
    parent_node_index = None # for alive prefixes: index of parent within previous level's nodes
    total_nodes = 0
    for m in range(M):
        starts = np.flatnonzero(new_at[m])
        sizes = np.append(starts[1:], g) - starts  # distinct codes under each prefix
        if m == 0:
            alive = np.ones(starts.size, dtype=bool)
            parent_of = np.zeros(starts.size, dtype=np.int64)  # root
        else:
            prev = level_nodes[m - 1]
            prev_pos = prev["position_of_prefix"]  # maps prefix idx -> node slot or -1
            parent_prefix = prev["prefix_id_full"][starts]
            parent_slot = prev_pos[parent_prefix]
            alive = (parent_slot >= 0) & prev["is_internal_by_slot_padded"][
                np.maximum(parent_slot, 0)
            ]
            parent_of = parent_slot
        node_starts = starts[alive]
        node_sizes = sizes[alive]
        node_parents = parent_of[alive]
        is_leaf = node_sizes == 1
        position_of_prefix = np.full(starts.size, -1, dtype=np.int64)
        position_of_prefix[np.flatnonzero(alive)] = np.arange(node_starts.size)
        prefix_id_full = np.cumsum(new_at[m]) - 1  # row -> prefix index at this depth
        level_nodes.append({
            "starts": node_starts,            # representative row in U per node
            "sizes": node_sizes,
            "parents": node_parents,          # slot in previous level (or 0 for root)
            "is_leaf": is_leaf,
            "position_of_prefix": position_of_prefix,
            "prefix_id_full": prefix_id_full,
            "is_internal_by_slot_padded": ~is_leaf if node_starts.size else np.zeros(1, dtype=bool),
        })
        total_nodes += node_starts.size

    # assign global node ids level by level and fill the flat arrays
    code_arr = np.empty(total_nodes, dtype=np.int32)
    eps_arr = np.empty(total_nodes, dtype=np.float32)
    child_lo = np.zeros(total_nodes, dtype=np.int64)
    child_hi = np.zeros(total_nodes, dtype=np.int64)
    leaf_ref = np.full(total_nodes, -1, dtype=np.int64)
    leaf_rows = []    # representative U row per leaf, with its depth
    leaf_depths = []
    base = 0
    level_base = []
    for m in range(M):
        lv = level_nodes[m]
        cnt = lv["starts"].size
        level_base.append(base)
        rows = lv["starts"]
        code_arr[base : base + cnt] = U[rows, m]
        eps_arr[base : base + cnt] = _prefix_epsilons(cross, U[rows][:, : m + 1], m)
        if m > 0:
            # children are contiguous and in code order by construction
            prev_base = level_base[m - 1]
            counts = np.bincount(lv["parents"], minlength=level_nodes[m - 1]["starts"].size)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            child_lo[prev_base : prev_base + counts.size] = base + offsets[:-1]
            child_hi[prev_base : prev_base + counts.size] = base + offsets[1:]
        leaf_here = np.flatnonzero(lv["is_leaf"])
        if leaf_here.size:
            leaf_slot_base = sum(len(r) for r in leaf_rows)
            leaf_ref[base + leaf_here] = leaf_slot_base + np.arange(leaf_here.size)
            leaf_rows.append(rows[leaf_here])
            leaf_depths.append(np.full(leaf_here.size, m, dtype=np.int64))
        base += cnt

    is_leaf_node = leaf_ref >= 0
    child_lo[is_leaf_node] = 0
    child_hi[is_leaf_node] = 0
    leaf_row = np.concatenate(leaf_rows) if leaf_rows else empty64
    leaf_depth = np.concatenate(leaf_depths) if leaf_depths else empty64
    n_leaves = leaf_row.size

    # compressed suffixes: codes and epsilons for depths depth+1 .. M-1
    suf_len = (M - 1) - leaf_depth
    suffix_lo = np.concatenate([[0], np.cumsum(suf_len)])[:-1]
    suffix_hi = suffix_lo + suf_len
    total_suffix = int(suf_len.sum())
    suffix_code = np.empty(total_suffix, dtype=np.int32)
    suffix_eps = np.empty(total_suffix, dtype=np.float32)
    for t in range(1, M):
        # leaves whose suffix covers absolute depth t
        sel = np.flatnonzero(leaf_depth < t)
        if sel.size == 0:
            continue
        pos = suffix_lo[sel] + (t - 1 - leaf_depth[sel])
        rows = leaf_row[sel]
        suffix_code[pos] = U[rows, t]
        suffix_eps[pos] = _prefix_epsilons(cross, U[rows][:, : t + 1], t)

    # ids per leaf (ascending within a leaf)
    id_counts = group_end[leaf_row] - group_start[leaf_row]
    ids_lo = np.concatenate([[0], np.cumsum(id_counts)])[:-1]
    ids_hi = ids_lo + id_counts
    total_ids = int(id_counts.sum())
    reps = np.repeat(np.arange(n_leaves), id_counts)
    flat = np.repeat(group_start[leaf_row] - ids_lo, id_counts) + np.arange(total_ids)
    vals = sorted_ids[flat]
    leaf_ids = vals[np.lexsort((vals, reps))]

    return ATree(
        codebook_hash=cb_hash, m_count=M, k_count=codebook.k_count,
        n_root_children=level_nodes[0]["starts"].size,
        code=code_arr, eps=eps_arr, child_lo=child_lo, child_hi=child_hi,
        leaf_ref=leaf_ref, suffix_lo=suffix_lo.astype(np.int64),
        suffix_hi=suffix_hi.astype(np.int64), suffix_code=suffix_code,
        suffix_eps=suffix_eps, ids_lo=ids_lo.astype(np.int64),
        ids_hi=ids_hi.astype(np.int64), leaf_ids=leaf_ids,
    )


def node_distance(parent_dist: float, table, code: int, epsilon: float,
                  layer: int, q_sq_norm: float) -> float:
    """Extend a parent's squared distance by one path step.

    ``table`` is the AdcTable values array (M, K); exactly one lookup.
    """
    return parent_dist + table[layer, code] - q_sq_norm + 2.0 * epsilon


def atree_search(tree: ATree, codebook: Codebook, q, params: SearchParams,
                 use_kernel: bool | None = None):
    """Non-exhaustive top-R search; returns (ids, distances, SearchStats).

    Candidate lists are truncated to the layer budget by distance (stable
    order among ties). With budgets >= n the result matches exhaustive ADC
    on the same encoded dataset. The traversal runs through a compiled
    kernel when numba is available (use_kernel=False forces the plain
    array path; both produce identical results).
    """
    if tree.codebook_hash != codebook.content_hash():
        raise FormatError("tree was built against a different codebook", exit_code=2)
    q = check_query(q, codebook.dim)
    stats = SearchStats()
    t0 = time.perf_counter()
    table = adc_table(codebook, q)
    stats.table_seconds = time.perf_counter() - t0
    t1 = time.perf_counter()
    budgets = params.layer_budgets(tree.m_count)
    tab = table.values
    q_sq = table.q_sq_norm

    if tree.node_count == 0:
        stats.traversal_seconds = time.perf_counter() - t1
        return np.empty(0, dtype=np.int64), np.empty(0), stats

    if use_kernel is None:
        use_kernel = _traverse.HAVE_NUMBA
    if use_kernel:
        ids, dists, visited, lookups, per_layer = _traverse.traverse(
            tab - q_sq, q_sq, tree.code, tree.eps, tree.child_lo, tree.child_hi,
            tree.leaf_ref, tree.suffix_lo, tree.suffix_hi, tree.suffix_code,
            tree.suffix_eps, tree.ids_lo, tree.ids_hi, tree.leaf_ids,
            tree.n_root_children, budgets, params.r,
        )
        stats.nodes_visited = int(visited)
        stats.table_lookups = int(lookups)
        stats.per_layer_sizes = per_layer.tolist()
        stats.traversal_seconds = time.perf_counter() - t1
        return ids, dists, stats

    # fold the -||q||^2 step constant into the table once
    ts = tab - q_sq
    M = tree.m_count
    child_lo, child_hi = tree.child_lo, tree.child_hi
    code, eps, leaf_ref = tree.code, tree.eps, tree.leaf_ref
    suffix_code, suffix_eps = tree.suffix_code, tree.suffix_eps

    # frontier: internal nodes (ids, dists) and in-suffix leaves (leaf idx, dists, pos)
    int_ids = np.empty(0, dtype=np.int64)
    int_dist = np.empty(0)
    leaf_idx = np.empty(0, dtype=np.int64)
    leaf_dist = np.empty(0)
    leaf_pos = np.empty(0, dtype=np.int64)

    for layer in range(M):
        if layer == 0:
            # root expands to its children; parent distance is ||q||^2
            new_nodes = np.arange(tree.n_root_children, dtype=np.int64)
            new_dists = q_sq + ts[0, code[new_nodes]] + 2.0 * eps[new_nodes]
        else:
            # once only leaves remain and no later budget can prune, resolve
            # the remaining suffix steps of every survivor in one pass
            if int_ids.size == 0 and leaf_idx.size <= int(budgets[layer:].min()):
                rem = M - layer  # identical for every in-suffix leaf
                flat = (leaf_pos[:, None] + np.arange(rem)).ravel()
                layers = np.tile(np.arange(layer, M), leaf_idx.size)
                contrib = ts[layers, suffix_code[flat]] + 2.0 * suffix_eps[flat]
                leaf_dist = leaf_dist + contrib.reshape(-1, rem).sum(axis=1)
                stats.table_lookups += leaf_idx.size * rem
                stats.per_layer_sizes.extend([leaf_idx.size] * rem)
                break
            # expand internal survivors into their children (contiguous ranges)
            if int_ids.size:
                lo = child_lo[int_ids]
                lens = child_hi[int_ids] - lo
                total = int(lens.sum())
                reps = np.repeat(np.arange(int_ids.size), lens)
                new_nodes = np.repeat(lo - np.concatenate([[0], np.cumsum(lens)[:-1]]),
                                      lens) + np.arange(total)
                new_dists = int_dist[reps] + ts[layer, code[new_nodes]] \
                    + 2.0 * eps[new_nodes]
            else:
                new_nodes = np.empty(0, dtype=np.int64)
                new_dists = np.empty(0)
            # advance in-suffix leaves one step
            if leaf_idx.size:
                leaf_dist = leaf_dist + ts[layer, suffix_code[leaf_pos]] \
                    + 2.0 * suffix_eps[leaf_pos]
                leaf_pos = leaf_pos + 1
                stats.table_lookups += leaf_idx.size

        stats.nodes_visited += new_nodes.size
        stats.table_lookups += new_nodes.size

        # truncate to the layer budget before splitting the fresh children;
        # selection instead of a full sort, boundary ties kept in
        # enumeration order (children before carried-over leaves)
        budget = int(budgets[layer])
        size = new_nodes.size + leaf_idx.size
        stats.per_layer_sizes.append(min(size, budget))
        if size > budget:
            all_dist = np.concatenate([new_dists, leaf_dist]) if leaf_idx.size else new_dists
            keep = _select_smallest(all_dist, budget)
            keep_new = keep[keep < new_nodes.size]
            keep_leaf = keep[keep >= new_nodes.size] - new_nodes.size
            new_nodes, new_dists = new_nodes[keep_new], new_dists[keep_new]
            leaf_idx, leaf_dist, leaf_pos = (
                leaf_idx[keep_leaf], leaf_dist[keep_leaf], leaf_pos[keep_leaf]
            )

        # split surviving fresh children into internals and entering leaves
        if new_nodes.size:
            is_leaf = leaf_ref[new_nodes] >= 0
            enter_leaf = leaf_ref[new_nodes[is_leaf]]
            if leaf_idx.size:
                leaf_idx = np.concatenate([enter_leaf, leaf_idx])
                leaf_pos = np.concatenate([tree.suffix_lo[enter_leaf], leaf_pos])
                leaf_dist = np.concatenate([new_dists[is_leaf], leaf_dist])
            else:
                leaf_idx = enter_leaf
                leaf_pos = tree.suffix_lo[enter_leaf].copy()
                leaf_dist = new_dists[is_leaf]
            int_ids = new_nodes[~is_leaf]
            int_dist = new_dists[~is_leaf]
        else:
            int_ids = np.empty(0, dtype=np.int64)
            int_dist = np.empty(0)

    # all survivors are fully resolved leaves; expand ids
    counts = tree.ids_hi[leaf_idx] - tree.ids_lo[leaf_idx]
    total = int(counts.sum())
    reps = np.repeat(np.arange(leaf_idx.size), counts)
    flat = np.repeat(tree.ids_lo[leaf_idx] - np.concatenate([[0], np.cumsum(counts)[:-1]]),
                     counts) + np.arange(total)
    out_ids = tree.leaf_ids[flat]
    out_dist = leaf_dist[reps]
    order = np.lexsort((out_ids, out_dist))[: params.r]
    stats.traversal_seconds = time.perf_counter() - t1
    return out_ids[order], out_dist[order], stats


# ---------------------------------------------------------------------------
# serialization


def serialize_atree(path, tree: ATree) -> None:
    """Preorder node stream with explicit child counts; round-trips bit-exactly."""
    parts = [TREE_MAGIC, struct.pack("<I", TREE_VERSION), tree.codebook_hash]
    parts.append(struct.pack(
        "<6Q", tree.node_count, tree.leaf_count, tree.internal_count,
        tree.n_ids, tree.m_count, tree.k_count,
    ))
    parts.append(struct.pack("<I", tree.n_root_children))
    stack = list(range(tree.n_root_children))[::-1]
    while stack:
        v = stack.pop()
        ref = int(tree.leaf_ref[v])
        if ref < 0:
            lo, hi = int(tree.child_lo[v]), int(tree.child_hi[v])
            parts.append(struct.pack("<IfBI", int(tree.code[v]),
                                     float(tree.eps[v]), 0, hi - lo))
            stack.extend(range(lo, hi)[::-1])
        else:
            slo, shi = int(tree.suffix_lo[ref]), int(tree.suffix_hi[ref])
            ilo, ihi = int(tree.ids_lo[ref]), int(tree.ids_hi[ref])
            parts.append(struct.pack("<IfBI", int(tree.code[v]),
                                     float(tree.eps[v]), 1, shi - slo))
            parts.append(tree.suffix_code[slo:shi].astype("<u4").tobytes())
            parts.append(tree.suffix_eps[slo:shi].astype("<f4").tobytes())
            parts.append(struct.pack("<Q", ihi - ilo))
            parts.append(tree.leaf_ids[ilo:ihi].astype("<u8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, count, what):
        if self.pos + count > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_atree(path) -> ATree:
    with open(path, "rb") as f:
        raw = f.read()
    rd = _Reader(raw, path)
    magic = rd.take(4, "magic")
    if magic != TREE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TREE_MAGIC!r}",
                          exit_code=2)
    (version,) = rd.unpack("<I", "version")
    if version != TREE_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    cb_hash = rd.take(32, "codebook hash")
    node_count, leaf_count, internal_count, n_ids, M, K = rd.unpack("<6Q", "counts")
    (n_root,) = rd.unpack("<I", "root child count")

    code = np.empty(node_count, dtype=np.int32)
    eps = np.empty(node_count, dtype=np.float32)
    child_lo = np.zeros(node_count, dtype=np.int64)
    child_hi = np.zeros(node_count, dtype=np.int64)
    leaf_ref = np.full(node_count, -1, dtype=np.int64)
    depth_of = np.empty(node_count, dtype=np.int64)
    parent_of = np.empty(node_count, dtype=np.int64)
    children_of: list[list[int]] = [[] for _ in range(node_count + 1)]
    suffix_chunks, eps_chunks, id_chunks = [], [], []
    leaf_nodes = []

    # preorder parse; stack holds (parent slot, depth, remaining children)
    stack = [[node_count, 0, n_root]]  # virtual root slot == node_count
    next_slot = 0
    while stack:
        top = stack[-1]
        if top[2] == 0:
            stack.pop()
            continue
        top[2] -= 1
        v = next_slot
        next_slot += 1
        if v >= node_count:
            raise FormatError(f"{path}: more nodes than the header count")
        c, e, flag, count = rd.unpack("<IfBI", "node record")
        code[v], eps[v] = c, e
        depth_of[v] = top[1]
        parent_of[v] = top[0]
        children_of[top[0]].append(v)
        if flag == 0:
            stack.append([v, top[1] + 1, count])
        elif flag == 1:
            leaf_ref[v] = len(leaf_nodes)
            leaf_nodes.append(v)
            suffix_chunks.append(np.frombuffer(rd.take(4 * count, "suffix codes"),
                                               dtype="<u4").astype(np.int32))
            eps_chunks.append(np.frombuffer(rd.take(4 * count, "suffix epsilons"),
                                            dtype="<f4").copy())
            (idc,) = rd.unpack("<Q", "leaf id count")
            id_chunks.append(np.frombuffer(rd.take(8 * idc, "leaf ids"),
                                           dtype="<u8").astype(np.int64))
        else:
            raise FormatError(f"{path}: invalid node flag {flag}")
    if next_slot != node_count:
        raise FormatError(f"{path}: node stream ended early "
                          f"({next_slot} of {node_count})")
    if rd.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - rd.pos} trailing bytes")
    if len(leaf_nodes) != leaf_count:
        raise FormatError(f"{path}: leaf count mismatch")

    # re-layout into the canonical level-order used by build_atree
    order = np.lexsort((np.arange(node_count), depth_of))  # stable by depth
    # preorder within one parent already lists children in code order, and
    # parents appear in id order per level, so stable depth sort reproduces
    # the build layout.
    remap = np.empty(node_count + 1, dtype=np.int64)
    remap[order] = np.arange(node_count)
    remap[node_count] = node_count

    code2 = code[order]
    eps2 = eps[order]
    leafref_src = leaf_ref[order]
    child_lo2 = np.zeros(node_count, dtype=np.int64)
    child_hi2 = np.zeros(node_count, dtype=np.int64)
    for v_old in range(node_count):
        kids = children_of[v_old]
        v_new = remap[v_old]
        if kids:
            mapped = remap[np.asarray(kids, dtype=np.int64)]
            child_lo2[v_new] = mapped.min()
            child_hi2[v_new] = mapped.max() + 1

    # leaves in new order
    new_leaf_order = [int(leafref_src[v]) for v in range(node_count) if leafref_src[v] >= 0]
    leaf_ref2 = np.full(node_count, -1, dtype=np.int64)
    pos = 0
    for v in range(node_count):
        if leafref_src[v] >= 0:
            leaf_ref2[v] = pos
            pos += 1
    suffix_chunks = [suffix_chunks[i] for i in new_leaf_order]
    eps_chunks = [eps_chunks[i] for i in new_leaf_order]
    id_chunks = [id_chunks[i] for i in new_leaf_order]
    suf_len = np.array([s.size for s in suffix_chunks], dtype=np.int64)
    idc = np.array([s.size for s in id_chunks], dtype=np.int64)
    suffix_lo = np.concatenate([[0], np.cumsum(suf_len)])[:-1].astype(np.int64)
    ids_lo = np.concatenate([[0], np.cumsum(idc)])[:-1].astype(np.int64)
    tree = ATree(
        codebook_hash=cb_hash, m_count=int(M), k_count=int(K),
        n_root_children=int(n_root),
        code=code2, eps=eps2, child_lo=child_lo2, child_hi=child_hi2,
        leaf_ref=leaf_ref2,
        suffix_lo=suffix_lo, suffix_hi=suffix_lo + suf_len,
        suffix_code=(np.concatenate(suffix_chunks) if suffix_chunks
                     else np.empty(0, dtype=np.int32)),
        suffix_eps=(np.concatenate(eps_chunks) if eps_chunks
                    else np.empty(0, dtype=np.float32)),
        ids_lo=ids_lo, ids_hi=ids_lo + idc,
        leaf_ids=(np.concatenate(id_chunks) if id_chunks
                  else np.empty(0, dtype=np.int64)),
    )
    if tree.n_ids != n_ids or tree.internal_count != internal_count:
        raise FormatError(f"{path}: header counts disagree with the node stream")
    return tree
