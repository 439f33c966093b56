"""Independent reference implementations used as test oracles.

These are deliberately naive: quadratic loops, explicit enumeration, no
shared code with the package beyond plain data.
"""
import itertools
import math
from collections import deque

import numpy as np


def reachable_ancestors(nodes, edges, label):
    """Breadth-first search backwards along edges."""
    parents = {n: [] for n in nodes}
    for p, c in edges:
        parents[c].append(p)
    seen = set()
    queue = deque(parents[label])
    while queue:
        n = queue.popleft()
        if n not in seen:
            seen.add(n)
            queue.extend(parents[n])
    return seen


def all_topological_orders(nodes, edges):
    """Every topological order of a small DAG, by brute-force permutation."""
    nodes = list(nodes)
    out = []
    for perm in itertools.permutations(nodes):
        pos = {n: i for i, n in enumerate(perm)}
        if all(pos[p] < pos[c] for p, c in edges):
            out.append(list(perm))
    return out


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def pairwise_auroc(scores, truths):
    """Fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    pos = [s for s, t in zip(scores, truths) if t]
    neg = [s for s, t in zip(scores, truths) if not t]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def curve_average_precision(scores, truths):
    """Sum of (recall step) x (precision) over every distinct threshold."""
    scores = [float(s) for s in scores]
    n_pos = sum(1 for t in truths if t)
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [t for s, t in zip(scores, truths) if s >= thr]
        tp = sum(1 for t in sel if t)
        recall = tp / n_pos
        precision = tp / len(sel)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_dag(rng, n_nodes, p_edge=0.3, prefix="n"):
    """Random DAG: edges only go from lower to higher index."""
    nodes = [f"{prefix}{i}" for i in range(n_nodes)]
    edges = [(nodes[i], nodes[j]) for j in range(n_nodes) for i in range(j)
             if rng.random() < p_edge]
    return nodes, edges


def brute_mask(labels, instances, parents):
    """(instance, head) inclusion by direct subset test."""
    return np.array([[set(parents[l]) <= set(inst.labels) for l in labels] for inst in instances])
