"""Compiled per-query tree traversal.

Same algorithm and tie rules as the array path in atree.atree_search;
that path stays as the readable reference and the fallback when numba is
unavailable. Equivalence of the two is pinned by tests.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def _keep_smallest(dists, count):
    """Boolean keep-mask for the count smallest; boundary ties keep the
    earliest entries (matches the stable selection of the array path)."""
    n = dists.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    if n <= count:
        for i in range(n):
            keep[i] = True
        return keep
    kth = np.partition(dists.copy(), count - 1)[count - 1]
    strict = 0
    for i in range(n):
        if dists[i] < kth:
            keep[i] = True
            strict += 1
    need = count - strict
    for i in range(n):
        if need == 0:
            break
        if dists[i] == kth:
            keep[i] = True
            need -= 1
    return keep


@njit(cache=True)
def traverse(
    ts,            # (M, K) float64, shifted table: ||q-c||^2 - ||q||^2
    q_sq,          # float64
    code,          # (n_nodes,) int32
    eps,           # (n_nodes,) float32
    child_lo, child_hi, leaf_ref,       # (n_nodes,) int64
    suffix_lo, suffix_hi,               # (n_leaves,) int64
    suffix_code,   # int32
    suffix_eps,    # float32
    ids_lo, ids_hi, leaf_ids,           # leaf id tables, int64
    n_root,        # int64
    budgets,       # (M,) int64
    r,             # int64
):
    M = ts.shape[0]
    # frontier buffers: kind 0 = internal node id, kind 1 = leaf index
    cap = n_root
    ent_node = np.empty(cap, dtype=np.int64)
    ent_dist = np.empty(cap, dtype=np.float64)
    n_int = 0
    leaf_buf = np.empty(cap, dtype=np.int64)
    leaf_pos = np.empty(cap, dtype=np.int64)
    leaf_dist = np.empty(cap, dtype=np.float64)
    n_leaf = 0

    nodes_visited = 0
    table_lookups = 0
    per_layer = np.zeros(M, dtype=np.int64)

    # layer 0: root expands to its children (node ids 0 .. n_root)
    new_nodes = np.empty(n_root, dtype=np.int64)
    new_dists = np.empty(n_root, dtype=np.float64)
    n_new = 0
    for v in range(n_root):
        new_nodes[n_new] = v
        new_dists[n_new] = q_sq + ts[0, code[v]] + 2.0 * eps[v]
        n_new += 1

    for layer in range(M):
        if layer > 0:
            # early full resolution: only leaves left and no later pruning
            min_budget = budgets[layer]
            for t in range(layer, M):
                if budgets[t] < min_budget:
                    min_budget = budgets[t]
            if n_int == 0 and n_leaf <= min_budget:
                rem = M - layer
                for j in range(n_leaf):
                    p = leaf_pos[j]
                    acc = leaf_dist[j]
                    for t in range(rem):
                        acc += ts[layer + t, suffix_code[p + t]] \
                            + 2.0 * suffix_eps[p + t]
                    leaf_dist[j] = acc
                table_lookups += n_leaf * rem
                for t in range(layer, M):
                    per_layer[t] = n_leaf
                break
            # expand internal survivors
            total = 0
            for j in range(n_int):
                total += child_hi[ent_node[j]] - child_lo[ent_node[j]]
            new_nodes = np.empty(total, dtype=np.int64)
            new_dists = np.empty(total, dtype=np.float64)
            n_new = 0
            for j in range(n_int):
                v = ent_node[j]
                pd = ent_dist[j]
                for c in range(child_lo[v], child_hi[v]):
                    new_nodes[n_new] = c
                    new_dists[n_new] = pd + ts[layer, code[c]] + 2.0 * eps[c]
                    n_new += 1
            # advance in-suffix leaves one step
            for j in range(n_leaf):
                p = leaf_pos[j]
                leaf_dist[j] += ts[layer, suffix_code[p]] + 2.0 * suffix_eps[p]
                leaf_pos[j] = p + 1
            table_lookups += n_leaf

        nodes_visited += n_new
        table_lookups += n_new

        # truncate to the layer budget: fresh children first, then leaves
        budget = budgets[layer]
        size = n_new + n_leaf
        per_layer[layer] = size if size < budget else budget
        if size > budget:
            all_dist = np.empty(size, dtype=np.float64)
            for i in range(n_new):
                all_dist[i] = new_dists[i]
            for j in range(n_leaf):
                all_dist[n_new + j] = leaf_dist[j]
            keep = _keep_smallest(all_dist, budget)
            w = 0
            for i in range(n_new):
                if keep[i]:
                    new_nodes[w] = new_nodes[i]
                    new_dists[w] = new_dists[i]
                    w += 1
            n_new = w
            w = 0
            for j in range(n_leaf):
                if keep[size - n_leaf + j]:
                    leaf_buf[w] = leaf_buf[j]
                    leaf_pos[w] = leaf_pos[j]
                    leaf_dist[w] = leaf_dist[j]
                    w += 1
            n_leaf = w

        # split fresh children into internals and leaves entering suffixes;
        # entering leaves precede carried-over ones, as in the array path
        if n_new == 0:
            n_int = 0
        else:
            n_enter = 0
            for i in range(n_new):
                if leaf_ref[new_nodes[i]] >= 0:
                    n_enter += 1
            grown = n_leaf + n_enter
            nl_buf = np.empty(grown, dtype=np.int64)
            nl_pos = np.empty(grown, dtype=np.int64)
            nl_dist = np.empty(grown, dtype=np.float64)
            w = 0
            ni = 0
            ent_node2 = np.empty(n_new, dtype=np.int64)
            ent_dist2 = np.empty(n_new, dtype=np.float64)
            for i in range(n_new):
                ref = leaf_ref[new_nodes[i]]
                if ref >= 0:
                    nl_buf[w] = ref
                    nl_pos[w] = suffix_lo[ref]
                    nl_dist[w] = new_dists[i]
                    w += 1
                else:
                    ent_node2[ni] = new_nodes[i]
                    ent_dist2[ni] = new_dists[i]
                    ni += 1
            for j in range(n_leaf):
                nl_buf[w] = leaf_buf[j]
                nl_pos[w] = leaf_pos[j]
                nl_dist[w] = leaf_dist[j]
                w += 1
            leaf_buf, leaf_pos, leaf_dist, n_leaf = nl_buf, nl_pos, nl_dist, w
            ent_node, ent_dist, n_int = ent_node2, ent_dist2, ni

    # expand ids of surviving leaves and take the r best by (distance, id)
    total_ids = 0
    for j in range(n_leaf):
        total_ids += ids_hi[leaf_buf[j]] - ids_lo[leaf_buf[j]]
    out_ids = np.empty(total_ids, dtype=np.int64)
    out_dist = np.empty(total_ids, dtype=np.float64)
    w = 0
    for j in range(n_leaf):
        ref = leaf_buf[j]
        for p in range(ids_lo[ref], ids_hi[ref]):
            out_ids[w] = leaf_ids[p]
            out_dist[w] = leaf_dist[j]
            w += 1
    take = r if r < total_ids else total_ids
    if take < total_ids:
        # top-take by (distance, id): strictly closer first, boundary ties
        # resolved by the lowest ids (ids are unique)
        kth = np.partition(out_dist.copy(), take - 1)[take - 1]
        w = 0
        n_bound = 0
        for i in range(total_ids):
            if out_dist[i] < kth:
                w += 1
            elif out_dist[i] == kth:
                n_bound += 1
        need = take - w
        bid = np.empty(n_bound, dtype=np.int64)
        b = 0
        for i in range(total_ids):
            if out_dist[i] == kth:
                bid[b] = out_ids[i]
                b += 1
        id_cut = np.partition(bid, need - 1)[need - 1] if need > 0 else np.int64(-1)
        w = 0
        for i in range(total_ids):
            if out_dist[i] < kth or (out_dist[i] == kth and out_ids[i] <= id_cut):
                out_ids[w] = out_ids[i]
                out_dist[w] = out_dist[i]
                w += 1
    else:
        w = total_ids
    # sort the kept results by (distance, id): insertion-style since r is small
    order = np.argsort(out_dist[:w])
    res_ids = np.empty(w, dtype=np.int64)
    res_dist = np.empty(w, dtype=np.float64)
    for i in range(w):
        res_ids[i] = out_ids[order[i]]
        res_dist[i] = out_dist[order[i]]
    # stabilize ties on distance by ascending id
    i = 0
    while i < w:
        j = i + 1
        while j < w and res_dist[j] == res_dist[i]:
            j += 1
        if j - i > 1:
            res_ids[i:j] = np.sort(res_ids[i:j])
        i = j
    return res_ids, res_dist, nodes_visited, table_lookups, per_layer
