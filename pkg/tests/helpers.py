"""Instance builders and random feasible policies shared by the tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from vodstall import kernel
from vodstall.model import (
    Instance,
    PolicyVars,
    QualityLadder,
    ServerSpec,
    StreamingParams,
    VideoSpec,
    load_instance,
    uniform_policy,
)
from vodstall.optimizer import (
    admissible_entries,
    feasibility_repair,
    project_capped_simplex,
)

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.json"
FULL = ROOT / "configs" / "full_scale.json"


def small_instance(seed: int = 0, r: int = 5, alphas=(12.0, 18.0, 15.0), streams: int = 2,
                   sizes=(1.0, 2.0), lam=None, L_range=(3, 8), k: int = 1, n: int = 2,
                   tau: float = 1.0, ds: float = 2.0, beta: float = 0.01) -> Instance:
    """Three servers with two streams each, five videos, two quality levels."""
    rng = np.random.default_rng(seed)
    m = len(alphas)
    servers = [ServerSpec(j + 1, alpha_base=a, beta_base=beta, num_streams=streams)
               for j, a in enumerate(alphas)]
    if lam is None:
        lam = rng.uniform(0.005, 0.02, r)
    videos = []
    for i in range(r):
        place = tuple(sorted(int(x) + 1 for x in rng.choice(m, n, replace=False)))
        videos.append(VideoSpec(i + 1, float(lam[i]), int(rng.integers(*L_range)), n, k,
                                (place,) * len(sizes)))
    return Instance(servers, QualityLadder(tuple(sizes)), videos, StreamingParams(tau, ds))


def scaled_to_rho(inst: Instance, pol: PolicyVars, target: float) -> Instance:
    """Rescale arrival rates so the busiest stream has utilization ``target``."""
    rho = kernel.loads(inst, pol).rho.max()
    return inst.scaled_rates(target / rho)


def desk_instance():
    return load_instance(DESK)


def random_policy(inst: Instance, rng: np.random.Generator, delta: float = 1e-6,
                  t_frac: float | None = None) -> PolicyVars:
    """A random policy that passes validation, with t drawn inside its interval."""
    V, m = inst.V, inst.m
    w = np.empty(inst.S)
    for j in range(m):
        sl = inst.streams_of(j)
        raw = rng.uniform(0.5, 1.0, len(sl))
        w[sl.start:sl.stop] = raw / raw.sum() * rng.uniform(0.9, 1.0)
    p = np.empty((V, inst.S))
    for j in range(m):
        sl = inst.streams_of(j)
        p[:, sl.start:sl.stop] = rng.dirichlet(np.ones(len(sl)), size=V)
    adm = admissible_entries(inst, w, delta)
    q = np.zeros((inst.r, V, m))
    for i in range(inst.r):
        for l in range(V):
            ok = np.array([adm[l, inst.streams_of(j).start:inst.streams_of(j).stop].all()
                           for j in range(m)])
            sup = inst.placed[i, l] & ok
            if sup.sum() < inst.k[i]:
                sup = inst.placed[i, l]
            q[i, l] = project_capped_simplex(rng.uniform(0, 1, m), inst.k[i], 1.0, sup)
    b = rng.dirichlet(np.ones(V), size=inst.r)
    pol = feasibility_repair(inst, PolicyVars(q=q, p=p, b=b, w=w, t=np.full(inst.r, delta)), delta)
    upper = kernel.t_upper(inst, kernel.loads(inst, pol), delta)
    frac = rng.uniform(0.05, 0.95, inst.r) if t_frac is None else np.full(inst.r, t_frac)
    t = delta + frac * (upper - delta)
    return pol.replace(t=t)


def uniform_repaired(inst: Instance, t0: float = 0.01) -> PolicyVars:
    return feasibility_repair(inst, uniform_policy(inst, t0))


def compare_gradients(analytic, numeric, rtol=1e-4):
    """Largest relative error over entries where both are finite, scaled by the block's magnitude."""
    mask = np.isfinite(analytic) & np.isfinite(numeric)
    if not mask.any():
        return 0.0
    scale = max(np.max(np.abs(numeric[mask])), 1e-12)
    err = np.abs(analytic[mask] - numeric[mask]) / np.maximum(np.abs(numeric[mask]), scale * rtol)
    return float(err.max())
