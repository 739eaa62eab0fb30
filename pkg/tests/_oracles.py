"""Test-side reference computations, written independently of the package code."""

import itertools
import math
from collections import Counter


def mi_nats(xs, ys):
    n = len(xs)
    if n == 0:
        return 0.0
    pxy = Counter(zip(xs, ys))
    px = Counter(xs)
    py = Counter(ys)
    total = 0.0
    for (x, y), c in pxy.items():
        total += c / n * math.log(c * n / (px[x] * py[y]))
    return max(total, 0.0)


def prufer_trees(n):
    """Every labelled spanning tree on ``n`` nodes as a list of edges."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for s in seq:
            degree[s] += 1
        edges = []
        seq = list(seq)
        for s in seq:
            leaf = min(i for i in range(n) if degree[i] == 1)
            edges.append((leaf, s))
            degree[leaf] -= 1
            degree[s] -= 1
        u, v = [i for i in range(n) if degree[i] == 1]
        edges.append((u, v))
        yield edges


def best_tree_weight(weights):
    n = len(weights)
    return max(sum(weights[i][j] for i, j in t) for t in prufer_trees(n))


def capped_vectors(total, cap, slots):
    """Count vectors over ``slots`` values, each entry <= cap, summing to ``total``."""
    def rec(left, remaining):
        if remaining == 0:
            if left == 0:
                yield ()
            return
        for c in range(0, min(cap, left) + 1):
            for tail in rec(left - c, remaining - 1):
                yield (c,) + tail
    yield from rec(total, slots)


def max_three_way(totals, caps, slots=5):
    """Largest sum_v a_v b_v c_v over realisations with the given totals and per-value caps."""
    best = 0
    cvecs = list(capped_vectors(totals[2], caps[2], slots))
    for a in capped_vectors(totals[0], caps[0], slots):
        for b in capped_vectors(totals[1], caps[1], slots):
            w = [x * y for x, y in zip(a, b)]
            best = max(best, max(sum(wi * ci for wi, ci in zip(w, c)) for c in cvecs))
    return best


def brute_tree_marginal(root_p, cpts, edges, n_states, open_nodes, evidence):
    """Marginal over ``open_nodes`` by enumerating every joint assignment of a small tree."""
    parent = {c: (p, e) for e, (p, c) in enumerate(edges)}
    out = {}
    for assign in itertools.product(*[range(s) for s in n_states]):
        p = root_p[assign[0]]
        for node in range(1, len(n_states)):
            par, e = parent[node]
            p *= cpts[e][assign[par]][assign[node]]
        for node, lam in evidence.items():
            p *= lam[assign[node]]
        key = tuple(assign[v] for v in open_nodes)
        out[key] = out.get(key, 0.0) + p
    return out
