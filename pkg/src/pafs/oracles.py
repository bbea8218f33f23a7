"""Naive scalar-loop reference implementations and finite differences.

Nothing here imports the fast-path modules; inputs are plain nested lists
(or anything indexable) of floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def _sqdist(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += (a - b) * (a - b)
    return s


def naive_prototypes(rows, labels, n_classes):
    dim = len(rows[0])
    protos = []
    for c in range(n_classes):
        acc = [0.0] * dim
        count = 0
        for row, y in zip(rows, labels):
            if y == c:
                count += 1
                for j in range(dim):
                    acc[j] += row[j]
        protos.append([v / count for v in acc])
    return protos


def naive_sq_distances(queries, protos):
    return [[_sqdist(q, p) for p in protos] for q in queries]


def naive_fs_loss(queries, labels, protos, squared=True):
    total = 0.0
    for q, y in zip(queries, labels):
        d = [_sqdist(q, p) for p in protos]
        if not squared:
            d = [math.sqrt(v) for v in d]
        denom = 0.0
        for v in d:
            denom += math.exp(-v)
        total += -math.log(math.exp(-d[y]) / denom)
    return total / len(queries)


def naive_cpl(protos, queries, labels, negatives, temperature):
    """``negatives[i]``: negative query indices for the term with positive i."""
    n = len(protos)
    total = 0.0
    for c in range(n):
        for i, y in enumerate(labels):
            if y != c:
                continue
            sim_pos = math.exp(_dot(protos[c], queries[i]) / temperature)
            sim_neg = 0.0
            for t in negatives[i]:
                sim_neg += math.exp(_dot(protos[c], queries[t]) / temperature)
            total += -math.log(sim_pos / (sim_pos + sim_neg))
    return total / len(queries)


def naive_angle_deg(xa, xp, xn):
    xc = [(a + p) / 2 for a, p in zip(xa, xp)]
    nc = math.sqrt(_sqdist(xn, xc))
    if nc == 0.0:
        return 90.0
    return math.degrees(math.atan(math.sqrt(_sqdist(xp, xa)) / (2 * nc)))


def naive_mine(rows, labels, is_proto, alpha_deg, anchor_mode):
    out = []
    b = len(rows)
    for a in range(b):
        if anchor_mode == "prototypes" and not is_proto[a]:
            continue
        for p in range(b):
            if p == a or labels[p] != labels[a]:
                continue
            for n in range(b):
                if labels[n] == labels[a]:
                    continue
                if naive_angle_deg(rows[a], rows[p], rows[n]) > alpha_deg:
                    out.append((a, p, n))
    return out


def naive_apl(rows, triplets, alpha_deg):
    t2 = math.tan(math.radians(alpha_deg)) ** 2
    pairs = {}
    for a, p, n in triplets:
        s = [x + y for x, y in zip(rows[a], rows[p])]
        f = 4 * t2 * _dot(s, rows[n]) - 2 * (1 + t2) * _dot(rows[a], rows[p])
        pairs.setdefault((a, p), []).append(f)
    total = 0.0
    for fs in pairs.values():
        acc = 1.0
        for f in fs:
            acc += math.exp(f)
        total += math.log(acc)
    return total / len(rows)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(fn, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return grad


def max_relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-12)
    return float(np.max(np.abs(a - f) / denom))


REPORT_HEADER = f"{'check':<28s} {'max rel err':>12s} {'step':>8s} {'checked':>8s} {'skipped':>8s}  result"


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    step: float
    threshold: float = 1e-4
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold

    def row(self) -> str:
        return (f"{self.name:<28s} {self.max_rel_error:12.3e} {self.step:8.0e} "
                f"{self.checked:8d} {self.skipped:8d}  {'PASS' if self.passed else 'FAIL'}")
