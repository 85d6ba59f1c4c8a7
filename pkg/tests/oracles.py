"""Brute-force references used to check the fast code paths.

The projection oracles enumerate every assignment of coordinates to
{lower bound, upper bound, free}.  For each one they solve the remaining
equality-constrained least-squares problem in closed form and keep the
closest feasible candidate.  The optimum is always one of these candidates,
so the best feasible one is the exact projection.  Cost is 3^n, so they
are only meant for n <= 5.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from vodstall import analytics

FEAS_TOL = 1e-10


def _best(v, candidates):
    best, best_d = None, math.inf
    for x in candidates:
        d = float(np.sum((x - v) ** 2))
        if d < best_d - 1e-15:
            best, best_d = x, d
    return best


def qp_capped_simplex(v, total, cap=math.inf, support=None):
    """argmin ||x - v|| s.t. sum x = total, 0 <= x <= cap, x = 0 off support."""
    v = np.asarray(v, dtype=float)
    n = v.size
    support = np.ones(n, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    states = [(0,) if not support[i] else ((0, 1, 2) if np.isfinite(cap) else (0, 2))
              for i in range(n)]
    cands = []
    for combo in itertools.product(*states):
        combo = np.array(combo)
        x = np.where(combo == 1, cap, 0.0).astype(float)
        free = combo == 2
        rest = total - x.sum()
        if free.any():
            lam = (v[free].sum() - rest) / free.sum()
            x[free] = v[free] - lam
        elif abs(rest) > FEAS_TOL:
            continue
        if np.all(x >= -FEAS_TOL) and np.all(x <= cap + FEAS_TOL) and abs(x.sum() - total) <= 1e-9:
            cands.append(np.clip(x, 0.0, cap))
    return _best(v, cands)


def qp_box_budget(v, cap=1.0, budget=1.0):
    """argmin ||x - v|| s.t. 0 <= x <= cap, sum x <= budget."""
    v = np.asarray(v, dtype=float)
    n = v.size
    cands = []
    for combo in itertools.product((0, 1, 2), repeat=n):
        combo = np.array(combo)
        base = np.where(combo == 1, cap, 0.0).astype(float)
        free = combo == 2
        # budget inactive: free coordinates keep their value
        x = base.copy()
        x[free] = v[free]
        cands.append(x)
        # budget active: free coordinates shift by a common multiplier
        if free.any():
            x = base.copy()
            lam = (v[free].sum() - (budget - base.sum())) / free.sum()
            x[free] = v[free] - lam
            cands.append(x)
    ok = [np.clip(x, 0.0, cap) for x in cands
          if np.all(x >= -FEAS_TOL) and np.all(x <= cap + FEAS_TOL) and x.sum() <= budget + 1e-9]
    return _best(v, ok)


def golden_section(f, lo, hi, tol=1e-12, max_iter=400):
    """Minimizer of a unimodal scalar function on [lo, hi]."""
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def explicit_H(inst, pol, i, s, l, t):
    """Term-by-term sum of exp(-t(d_s + (v-1) tau)) times the chunk-v download MGF."""
    total = 0.0
    for v in range(1, int(inst.L[i]) + 1):
        total += math.exp(-t * (inst.ds + (v - 1) * inst.tau)) * analytics.download_mgf(inst, pol, i, s, l, v, t)
    return total
