"""Exact short-cycle counting on Tanner graphs.

Cycles are enumerated by a depth-limited DFS that only extends simple paths.
For general graphs each cycle is counted from its smallest node; for
quasi-cyclic lifts every node of a variable-node block lies on the same
number of cycles (the block-wise cyclic shift is a graph automorphism), so
one DFS per base column suffices.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _count_from(indptr, indices, start, max_len, min_node, counts, visited, stack_node, stack_ptr):
    # counts[L] accumulates directed closed simple paths through `start`
    depth = 0
    stack_node[0] = start
    stack_ptr[0] = indptr[start]
    visited[start] = True
    while depth >= 0:
        u = stack_node[depth]
        p = stack_ptr[depth]
        if p < indptr[u + 1]:
            stack_ptr[depth] = p + 1
            w = indices[p]
            if w == start:
                if depth >= 2:
                    counts[depth + 1] += 1
                continue
            if visited[w] or w < min_node or depth + 2 > max_len:
                continue
            depth += 1
            stack_node[depth] = w
            stack_ptr[depth] = indptr[w]
            visited[w] = True
        else:
            visited[u] = False
            depth -= 1


def _graph(edge_vn, edge_cn, n, m):
    a = np.concatenate([edge_vn, n + edge_cn])
    b = np.concatenate([n + edge_cn, edge_vn])
    order = np.lexsort((b, a))
    a, b = a[order], b[order]
    indptr = np.zeros(n + m + 1, dtype=np.int64)
    np.add.at(indptr, a + 1, 1)
    return np.cumsum(indptr), b.astype(np.int64)


def _run(indptr, indices, starts, max_len, general):
    num_nodes = indptr.size - 1
    visited = np.zeros(num_nodes, dtype=np.bool_)
    stack_node = np.zeros(max_len + 1, dtype=np.int64)
    stack_ptr = np.zeros(max_len + 1, dtype=np.int64)
    per_start = []
    for s in starts:
        counts = np.zeros(max_len + 1, dtype=np.int64)
        _count_from(indptr, indices, int(s), max_len, int(s) if general else 0,
                    counts, visited, stack_node, stack_ptr)
        per_start.append(counts)
    return per_start


def count_cycles_bipartite(edge_vn, edge_cn, n, m, max_len):
    """Exact simple-cycle counts {4: .., 6: .., ...} for an arbitrary Tanner graph."""
    indptr, indices = _graph(np.asarray(edge_vn), np.asarray(edge_cn), n, m)
    total = np.sum(_run(indptr, indices, range(n + m), max_len, True), axis=0)
    return {L: int(total[L] // 2) for L in range(4, max_len + 1, 2)}


def count_cycles_quasi_cyclic(edge_vn, edge_cn, n, m, Z, n_blocks, max_len):
    """Cycle counts of a circulant Z-lift using one DFS start per VN block."""
    indptr, indices = _graph(np.asarray(edge_vn), np.asarray(edge_cn), n, m)
    per_block = _run(indptr, indices, [c * Z for c in range(n_blocks)], max_len, False)
    total = Z * np.sum(per_block, axis=0)
    out = {}
    for L in range(4, max_len + 1, 2):
        # each L-cycle has L/2 variable nodes and is walked in two directions
        q, r = divmod(int(total[L]), L)
        if r:
            raise RuntimeError("cycle count not consistent with the quasi-cyclic structure")
        out[L] = q
    return out
