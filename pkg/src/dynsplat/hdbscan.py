"""Density-based hierarchical clustering (HDBSCAN core semantics).

Pipeline: core distances -> mutual-reachability graph -> minimum spanning
tree -> single-linkage hierarchy -> condensed tree (min_cluster_size) ->
excess-of-mass stability selection. Points in no selected cluster are noise.

The root cluster is an eligible candidate, so a single coherent blob comes
back as one cluster with no noise. `max_scale`, when given, makes clusters
whose internal coherence scale (the largest merge distance inside them)
exceeds it unselectable; a sparse scatter whose spacing exceeds that scale
then comes back as all noise, while tight blobs stay selectable however far
apart they sit.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import pdist, squareform

from .errors import TooFewPoints

_INF_LAMBDA = 1e12


def hdbscan_labels(points: np.ndarray, min_cluster_size: int = 10,
                   min_samples: int | None = None,
                   max_scale: float | None = None) -> np.ndarray:
    """Cluster points; returns labels (N,), -1 for noise."""
    X = np.asarray(points, dtype=float)
    n = X.shape[0]
    if n < 2 * min_cluster_size:
        raise TooFewPoints(f"{n} points, need >= {2 * min_cluster_size}")
    if min_samples is None:
        min_samples = min_cluster_size

    D = squareform(pdist(X))
    k = min(min_samples, n - 1)
    core = np.sort(D, axis=1)[:, k]  # distance to k-th other point
    mreach = np.maximum(D, np.maximum(core[:, None], core[None, :]))

    mst = minimum_spanning_tree(mreach).tocoo()
    edges = sorted(zip(mst.data, mst.row, mst.col))

    # single-linkage dendrogram via union-find; internal node ids start at n
    parent = list(range(2 * n - 1))
    comp_node = list(range(n))  # union-find root -> dendrogram node id

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    merges = []  # (left_node, right_node, dist, size)
    sizes = {i: 1 for i in range(n)}
    nxt = n
    for w, i, j in edges:
        ri, rj = find(int(i)), find(int(j))
        li, lj = comp_node[ri], comp_node[rj]
        merges.append((li, lj, float(w), sizes[li] + sizes[lj]))
        parent[rj] = ri
        comp_node[ri] = nxt
        sizes[nxt] = sizes[li] + sizes[lj]
        nxt += 1

    if not merges:
        return np.full(n, -1, dtype=int)

    children = {n + m: (mg[0], mg[1]) for m, mg in enumerate(merges)}
    dist = {n + m: mg[2] for m, mg in enumerate(merges)}
    size = {i: 1 for i in range(n)}
    size.update({n + m: mg[3] for m, mg in enumerate(merges)})
    root = nxt - 1

    def node_points(node):
        out = []
        stack = [node]
        while stack:
            v = stack.pop()
            if v < n:
                out.append(v)
            else:
                stack.extend(children[v])
        return out

    # condense: walk the dendrogram top-down, spawning condensed clusters only
    # at splits where both sides reach min_cluster_size
    birth_dist = {0: dist[root]}
    stability = {0: 0.0}
    kids = {0: []}
    coherence = {}  # cid -> top-most merge distance inside the cluster
    point_cluster = np.zeros(n, dtype=int)
    next_cid = 1
    stack = [(root, 0)]
    while stack:
        node, cid = stack.pop()
        if node >= n and cid not in coherence:
            coherence[cid] = dist[node]
        if node < n:
            lam = 1.0 / max(birth_dist[cid], 1e-300)
            stability[cid] += min(lam, _INF_LAMBDA) - _lam(birth_dist[cid])
            point_cluster[node] = cid
            continue
        l, r = children[node]
        lam = _lam(dist[node])
        big = [c for c in (l, r) if size[c] >= min_cluster_size]
        if len(big) == 2:
            stability[cid] += (size[node]) * (lam - _lam(birth_dist[cid]))
            for c in (l, r):
                ncid = next_cid
                next_cid += 1
                birth_dist[ncid] = dist[node]
                stability[ncid] = 0.0
                kids[ncid] = []
                kids[cid].append(ncid)
                stack.append((c, ncid))
        else:
            for c in (l, r):
                if size[c] >= min_cluster_size:
                    stack.append((c, cid))
                else:
                    pts = node_points(c)
                    stability[cid] += len(pts) * (lam - _lam(birth_dist[cid]))
                    for p in pts:
                        point_cluster[p] = cid

    # excess-of-mass selection, children before parents
    order = sorted(kids.keys(), reverse=True)
    selected = set()
    subtree_stab = {}
    for c in order:
        child_sum = sum(subtree_stab[k] for k in kids[c])
        eligible = max_scale is None or coherence.get(c, 0.0) <= max_scale
        if kids[c] and (not eligible or stability[c] < child_sum):
            subtree_stab[c] = child_sum
        elif eligible:
            selected.add(c)
            _deselect_descendants(c, kids, selected)
            subtree_stab[c] = stability[c]
        else:
            subtree_stab[c] = 0.0

    # label: nearest selected ancestor-or-self of each point's cluster
    parent_of = {}
    for c, ks in kids.items():
        for k2 in ks:
            parent_of[k2] = c
    label_of = {}
    for c in kids:
        cur = c
        lab = -1
        while True:
            if cur in selected:
                lab = cur
                break
            if cur not in parent_of:
                break
            cur = parent_of[cur]
        label_of[c] = lab

    raw = np.array([label_of[int(c)] for c in point_cluster])
    labels = np.full(n, -1, dtype=int)
    for new, old in enumerate(sorted(set(raw[raw >= 0]))):
        labels[raw == old] = new
    return labels


def _lam(d: float) -> float:
    return min(1.0 / max(d, 1e-300), _INF_LAMBDA)


def _deselect_descendants(c, kids, selected):
    stack = list(kids[c])
    while stack:
        v = stack.pop()
        selected.discard(v)
        stack.extend(kids[v])
