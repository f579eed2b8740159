"""Exact s-t max-flow / min-cut on sparse graphs with int64 capacities.

Dinic's algorithm over a CSR residual structure, JIT-compiled.  Arcs are
added in antiparallel pairs so the residual bookkeeping is uniform; the
min-cut side is the set of nodes reachable from the source in the final
residual graph.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _dinic(indptr, indices, cap, rev, source, sink):  # pragma: no cover
    n = indptr.shape[0] - 1
    level = np.empty(n, dtype=np.int32)
    current = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int32)
    path_edges = np.empty(n, dtype=np.int64)
    path_nodes = np.empty(n + 1, dtype=np.int32)
    total = np.int64(0)

    while True:
        level[:] = -1
        level[source] = 0
        queue[0] = source
        head, tail = 0, 1
        while head < tail:
            x = queue[head]
            head += 1
            for e in range(indptr[x], indptr[x + 1]):
                y = indices[e]
                if cap[e] > 0 and level[y] < 0:
                    level[y] = level[x] + 1
                    queue[tail] = y
                    tail += 1
        if level[sink] < 0:
            return total

        for i in range(n):
            current[i] = indptr[i]

        while True:
            # current-arc DFS for one augmenting path in the level graph
            depth = 0
            path_nodes[0] = source
            x = source
            found = False
            while True:
                if x == sink:
                    found = True
                    break
                e = current[x]
                stop = indptr[x + 1]
                while e < stop:
                    y = indices[e]
                    if cap[e] > 0 and level[y] == level[x] + 1:
                        break
                    e += 1
                current[x] = e
                if e < stop:
                    path_edges[depth] = e
                    depth += 1
                    path_nodes[depth] = indices[e]
                    x = indices[e]
                else:
                    level[x] = -1  # dead end in this phase
                    if depth == 0:
                        break
                    depth -= 1
                    x = path_nodes[depth]
                    current[x] += 1
            if not found:
                break
            bottleneck = cap[path_edges[0]]
            for i in range(1, depth):
                if cap[path_edges[i]] < bottleneck:
                    bottleneck = cap[path_edges[i]]
            for i in range(depth):
                e = path_edges[i]
                cap[e] -= bottleneck
                cap[rev[e]] += bottleneck
            total += bottleneck


@njit(cache=True)
def _reachable(indptr, indices, cap, source):  # pragma: no cover
    n = indptr.shape[0] - 1
    seen = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int32)
    seen[source] = True
    stack[0] = source
    top = 1
    while top > 0:
        top -= 1
        x = stack[top]
        for e in range(indptr[x], indptr[x + 1]):
            y = indices[e]
            if cap[e] > 0 and not seen[y]:
                seen[y] = True
                stack[top] = y
                top += 1
    return seen


def min_cut(n_nodes: int, tail: np.ndarray, head: np.ndarray,
            capacity: np.ndarray, source: int, sink: int) -> np.ndarray:
    """Source side of a minimum s-t cut.

    ``tail``/``head``/``capacity`` describe directed arcs; a zero-capacity
    reverse arc is created for each one automatically.  Capacities must be
    nonnegative int64.
    """
    m = tail.shape[0]
    frm = np.empty(2 * m, dtype=np.int64)
    to = np.empty(2 * m, dtype=np.int64)
    cap = np.zeros(2 * m, dtype=np.int64)
    frm[0::2] = tail
    to[0::2] = head
    cap[0::2] = capacity
    frm[1::2] = head
    to[1::2] = tail

    order = np.argsort(frm, kind="stable")
    position = np.empty(2 * m, dtype=np.int64)
    position[order] = np.arange(2 * m)
    # mutual reverses sit at paired slots 2j / 2j+1 before sorting
    pair = np.arange(2 * m) ^ 1
    rev = position[pair][order]

    indices = to[order].astype(np.int64)
    cap_sorted = cap[order].copy()
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, frm + 1, 1)
    indptr = np.cumsum(indptr)

    _dinic(indptr, indices, cap_sorted, rev, source, sink)
    return np.asarray(_reachable(indptr, indices, cap_sorted, source))
