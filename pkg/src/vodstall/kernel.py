"""Vectorized evaluation of the stall bound, the objective and its gradient.

Everything is evaluated for all (video, quality, stream) triples at once with
each video's own exponent ``t_i``.  Products of ``L`` chunk transforms are kept
in log space.  The gradient is a hand-written reverse pass over the same
intermediates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Instance, PolicyVars


@dataclass
class Evaluation:
    alpha: np.ndarray        # (V, S) effective chunk rate
    beta: np.ndarray         # (V, S) effective chunk shift
    pi: np.ndarray           # (r, V, S)
    rate: np.ndarray         # (r, V, S) lambda_i b_il pi_ils
    Lambda: np.ndarray       # (S,)
    rho: np.ndarray          # (S,)
    logM: np.ndarray         # (r, V, S), 0 where t_i >= alpha
    rate_ok: np.ndarray      # (r, V, S) t_i < alpha
    B_defined: np.ndarray    # (r, S) every loaded level at s admits t_i
    A: np.ndarray            # (r, S) Lambda_s * B_s(t_i)
    E: np.ndarray            # (r, S) t_i - Lambda_s (B_s(t_i) - 1)
    logK: np.ndarray         # (r, S) log of the waiting-transform prefactor
    x: np.ndarray            # (r, V, S) log of M(t) exp(-t tau)
    H: np.ndarray            # (r, V, S) segment tail sum, inf where undefined
    defined: np.ndarray      # (r, V, S) entry satisfies the bound's conditions
    active: np.ndarray       # (r, V, S) pi > 0
    S_sum: np.ndarray        # (r, V) sum_s pi (1 + H)
    bound: np.ndarray        # (r, V) upper bound on mean stall
    feasible: bool           # bound conditions hold on every active entry
    objective: float
    weights: np.ndarray      # (r,) lambda_i / lambda_bar
    theta: float
    loads: Loads | None = None
    grads: dict | None = None


def stream_params(inst: Instance, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ab = inst.alpha_base[inst.stream_server]
    bb = inst.beta_base[inst.stream_server]
    a = inst.sizes
    alpha = ab[None, :] * np.asarray(w)[None, :] / a[:, None]
    beta = bb[None, :] * a[:, None]
    return alpha, beta


def log_geometric(x: np.ndarray, L: np.ndarray) -> np.ndarray:
    """log of sum_{v=1..L} e^{v x}, i.e. log(e^x (1 - e^{Lx}) / (1 - e^x))."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.expm1(L * x) / np.expm1(x)
        out = x + np.log(ratio)
    return np.where(x == 0.0, np.log(L), out)


def dlog_geometric(x: np.ndarray, L: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        exact = 1.0 - L / np.expm1(-L * x) + 1.0 / np.expm1(-x)
    series = (L + 1.0) / 2.0 + (L * L - 1.0) * x / 12.0
    return np.where(np.abs(x) < 1e-6, series, exact)


@dataclass
class Loads:
    """Exponent-independent terms of a policy."""
    alpha: np.ndarray
    beta: np.ndarray
    has_alpha: np.ndarray
    mean_chunk: np.ndarray
    pi: np.ndarray
    rate: np.ndarray
    Lambda: np.ndarray
    rho: np.ndarray
    R: np.ndarray            # (U, V, S) rate grouped by distinct segment count
    uniq: np.ndarray
    inv: np.ndarray


def loads(inst: Instance, pol: PolicyVars) -> Loads:
    Lf = inst.L.astype(float)
    alpha, beta = stream_params(inst, pol.w)
    pi = pol.q[:, :, inst.stream_server] * pol.p[None, :, :]
    rate = inst.lam[:, None, None] * pol.b[:, :, None] * pi
    Lam = rate.sum(axis=(0, 1))
    has_alpha = alpha > 0
    safe_alpha = np.where(has_alpha, alpha, 1.0)
    mean_chunk = np.where(has_alpha, beta + 1.0 / safe_alpha, np.inf)
    with np.errstate(invalid="ignore"):
        work = np.where(rate > 0, rate * Lf[:, None, None] * mean_chunk[None], 0.0)
    rho = work.sum(axis=(0, 1))
    uniq, inv = np.unique(inst.L, return_inverse=True)
    R = np.zeros((len(uniq), inst.V, inst.S))
    np.add.at(R, inv, rate)
    return Loads(alpha, beta, has_alpha, mean_chunk, pi, rate, Lam, rho, R, uniq, inv)


def exponent_terms(ld: Loads, t: np.ndarray):
    """logM, rate_ok, B_defined, A, E for exponents ``t`` (one per video)."""
    alpha, beta = ld.alpha, ld.beta
    tt = t[:, None, None]
    rate_ok = (tt > 0) & (tt < alpha[None])
    gap = np.where(rate_ok, alpha[None] - tt, 1.0)
    safe_alpha = np.where(ld.has_alpha, alpha, 1.0)
    logM = np.where(rate_ok, np.log(safe_alpha)[None] - np.log(gap) + beta[None] * tt, 0.0)
    level_loaded = ld.R.sum(axis=0) > 0                          # (V, S)
    B_defined = np.all(~level_loaded[None] | rate_ok, axis=1)    # (r, S)
    # only loaded (level, stream) pairs contribute, so exponentiate just those
    V, S = alpha.shape
    cols = np.flatnonzero(level_loaded.ravel())
    Rc = ld.R.reshape(len(ld.uniq), -1)[:, cols]                 # (U, K)
    with np.errstate(over="ignore", invalid="ignore"):
        Pc = np.exp(ld.uniq[:, None, None] * logM.reshape(len(t), -1)[None, :, cols])
        Tc = np.where(Rc[:, None, :] > 0, Pc * Rc[:, None, :], 0.0).sum(axis=0)   # (r, K)
        full = np.zeros((len(t), V * S))
        full[:, cols] = Tc
        A = full.reshape(len(t), V, S).sum(axis=1)
        A = np.where(B_defined, A, np.inf)
        E = t[:, None] - A + ld.Lambda[None, :]
    return logM, rate_ok, B_defined, A, E


def exponent_ok(inst: Instance, ld: Loads, t: np.ndarray, delta: float) -> np.ndarray:
    """Per video: all exponent constraints hold at ``t`` with margin ``delta``.

    Checked over the (level, stream) pairs the video can use (pi > 0): the
    exponent stays below the chunk rate of every level loaded on those
    streams, the per-segment ratio M(t) e^{-t tau} stays below one, the
    waiting-time transform exists, and the streams are stable.
    """
    t = np.asarray(t, dtype=float)
    active = ld.pi > 0
    used = active.any(axis=1)                                    # (r, S)
    level_loaded = ld.R.sum(axis=0) > 0
    relevant = active | (used[:, None, :] & level_loaded[None])
    tt = t[:, None, None]
    below_rate = np.where(relevant, tt <= (1 - delta) * ld.alpha[None], True).all(axis=(1, 2))
    with np.errstate(over="ignore", invalid="ignore"):
        C = ld.alpha[None] * np.expm1((ld.beta[None] - inst.tau) * tt) + tt
    geometric = np.where(active, C <= -delta * tt, True).all(axis=(1, 2))
    ok = (t >= delta) & below_rate & geometric
    if not ok.any():
        return ok
    _, _, _, _, E = exponent_terms(ld, np.where(ok, t, delta))
    with np.errstate(invalid="ignore"):
        waiting = np.where(used, E >= delta * t[:, None], True).all(axis=1)
    stable = np.where(used, ld.rho[None, :] <= 1 - delta, True).all(axis=1)
    return ok & waiting & stable


def rate_cap(inst: Instance, ld: Loads, delta: float) -> np.ndarray:
    """Per video: ``(1 - delta)`` times the smallest chunk rate it must stay below."""
    active = ld.pi > 0
    used = active.any(axis=1)
    level_loaded = ld.R.sum(axis=0) > 0
    relevant = active | (used[:, None, :] & level_loaded[None])
    caps = np.where(relevant, ld.alpha[None], np.inf).min(axis=(1, 2))
    return (1 - delta) * caps


def t_upper(inst: Instance, ld: Loads, delta: float, rtol: float = 1e-10,
            max_iter: int = 200) -> np.ndarray:
    """Largest exponent per video satisfying :func:`exponent_ok`.

    Each constraint is convex in t and holds just above zero, so the feasible
    exponents form an interval ``[delta, upper]``.  Bisection runs on all
    videos at once.  Videos whose interval is empty get ``nan``; videos
    that use no stream get ``inf``.
    """
    r = inst.r
    hi = rate_cap(inst, ld, delta)
    unused = ~np.isfinite(hi)
    hi = np.where(unused, 1.0, hi)
    lo = np.full(r, float(delta))
    base_ok = exponent_ok(inst, ld, lo, delta) & (hi >= lo)
    top_ok = exponent_ok(inst, ld, np.where(base_ok, hi, lo), delta) & base_ok
    lo = np.where(top_ok, hi, lo)
    todo = base_ok & ~top_ok
    it = 0
    while todo.any() and it < max_iter:
        mid = np.where(todo, 0.5 * (lo + hi), lo)
        ok = exponent_ok(inst, ld, mid, delta)
        lo = np.where(todo & ok, mid, lo)
        hi = np.where(todo & ~ok, mid, hi)
        todo &= (hi - lo) > rtol * hi
        it += 1
    out = np.where(base_ok, lo, np.nan)
    return np.where(unused, np.inf, out)


def evaluate(inst: Instance, pol: PolicyVars, theta: float = 0.0,
             need_grad: bool = False) -> Evaluation:
    r, V, S = inst.r, inst.V, inst.S
    b, t = pol.b, pol.t
    tau, ds = inst.tau, inst.ds
    lam = inst.lam
    Lf = inst.L.astype(float)

    ld = loads(inst, pol)
    alpha, beta, pi, rate, Lam, rho = ld.alpha, ld.beta, ld.pi, ld.rate, ld.Lambda, ld.rho
    tt = t[:, None, None]
    logM, rate_ok, B_defined, A, E = exponent_terms(ld, t)
    stable = rho < 1.0
    waiting_ok = B_defined & (E > 0) & stable[None, :]
    busy = Lam > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logK_busy = (np.log1p(-np.minimum(rho, 1.0))[None, :] + np.log(t)[:, None]
                     + np.log(A) - np.log(np.where(busy, Lam, 1.0))[None, :] - np.log(E))
    # an idle stream has no queue: prefactor 1
    logK = np.where(busy[None, :], logK_busy, 0.0)
    logK = np.where(waiting_ok, logK, np.nan)

    x = logM - tt * tau
    Lfull = Lf[:, None, None] * np.ones((1, V, S))
    defined = rate_ok & waiting_ok[:, None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        logG = log_geometric(np.where(defined, x, -1.0), Lfull)
        logH = -tt * (ds - tau) + logK[:, None, :] + logG
        H = np.where(defined, np.exp(logH), np.inf)

    active = pi > 0
    with np.errstate(invalid="ignore"):
        S_sum = np.where(active, pi * (1.0 + H), 0.0).sum(axis=2)
    feasible = bool(np.all(defined[active])) and bool(np.all(t > 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.log(S_sum) / t[:, None]

    weights = lam / lam.sum() if lam.sum() > 0 else np.full(r, 1.0 / r)
    quality_term = -(b * Lf[:, None] * inst.sizes[None, :]).sum(axis=1)
    if feasible:
        stall_term = (b * bound).sum(axis=1)
        objective = float(np.sum(weights * (theta * quality_term + (1 - theta) * stall_term)))
    else:
        objective = float("inf")

    ev = Evaluation(alpha=alpha, beta=beta, pi=pi, rate=rate, Lambda=Lam, rho=rho,
                    logM=logM, rate_ok=rate_ok, B_defined=B_defined, A=A, E=E,
                    logK=logK, x=x, H=H, defined=defined, active=active,
                    S_sum=S_sum, bound=bound, feasible=feasible, objective=objective,
                    weights=weights, theta=theta, loads=ld)
    if need_grad and feasible:
        ev.grads = _gradient(inst, pol, ev, ld)
    return ev


def add_gradient(inst: Instance, pol: PolicyVars, ev: Evaluation) -> Evaluation:
    """Attach gradients to an evaluation of ``pol`` made without them."""
    if ev.grads is None and ev.feasible:
        ev.grads = _gradient(inst, pol, ev, ev.loads)
    return ev


def _gradient(inst, pol, ev: Evaluation, ld: Loads) -> dict:
    R, uniq, inv = ld.R, ld.uniq, ld.inv
    mean_chunk, has_alpha = ld.mean_chunk, ld.has_alpha
    q, p, b, t = pol.q, pol.p, pol.b, pol.t
    theta, c = ev.theta, ev.weights
    tau, ds = inst.tau, inst.ds
    lam = inst.lam
    Lf = inst.L.astype(float)
    srv = inst.stream_server
    r, V, S = inst.r, inst.V, inst.S
    alpha = ev.alpha
    safe_alpha = np.where(has_alpha, alpha, 1.0)
    tt = t[:, None, None]
    D = ev.defined

    t_bar = np.zeros(r)
    rate_bar = np.zeros((r, V, S))

    # objective -> S_sum, b, t
    logS = np.log(ev.S_sum)
    s_bar = c[:, None] * (1 - theta) * b / (t[:, None] * ev.S_sum)        # (r, V)
    b_bar = c[:, None] * (theta * (-Lf[:, None] * inst.sizes[None, :])
                          + (1 - theta) * ev.bound)
    t_bar += -c * (1 - theta) * (b * logS).sum(axis=1) / t ** 2

    # S_sum -> pi, H
    Hd = np.where(D, ev.H, 0.0)
    pi_bar = np.where(D, s_bar[:, :, None] * (1.0 + Hd), np.inf)
    h_bar = np.where(D, s_bar[:, :, None] * ev.pi * Hd, 0.0)                 # d/dlogH

    # logH = -t (ds - tau) + logK + logG(x)
    t_bar += -(ds - tau) * h_bar.sum(axis=(1, 2))
    logK_bar = h_bar.sum(axis=1)                                             # (r, S)
    x_bar = h_bar * dlog_geometric(np.where(D, ev.x, -1.0), Lf[:, None, None])
    logM_bar = x_bar.copy()
    t_bar += -tau * x_bar.sum(axis=(1, 2))

    # logK = log(1-rho) + log t + log A - log Lambda - log E on busy streams
    busy = (ev.Lambda > 0)[None, :] & (logK_bar != 0)
    on = np.where(busy, 1.0, 0.0)
    Ebar = np.where(busy, -logK_bar / np.where(busy, ev.E, 1.0), 0.0)
    rho_bar = -(logK_bar * on).sum(axis=0) / (1.0 - np.minimum(ev.rho, 1 - 1e-300))
    t_bar += (logK_bar * on).sum(axis=1) / t
    t_bar += Ebar.sum(axis=1)
    A_bar = np.where(busy, logK_bar / np.where(busy, ev.A, 1.0) - Ebar, 0.0)
    Lam_bar = np.where(busy, -logK_bar / np.where(ev.Lambda > 0, ev.Lambda, 1.0)[None, :]
                       + Ebar, 0.0).sum(axis=0)

    # A_is = sum_u sum_l R_uls exp(L_u logM_ils).  The rate sensitivity is
    # needed for every group, loaded or not, since a zero entry of q or p
    # may start sending traffic; where the transform does not exist at the
    # video's exponent the new traffic would make A infinite.
    R_bar = np.zeros_like(R)
    needs = A_bar[:, None, :] != 0
    with np.errstate(over="ignore", invalid="ignore"):
        for u, Lu in enumerate(uniq):
            Pu = np.where(ev.rate_ok, np.exp(Lu * ev.logM), np.inf)
            R_bar[u] = np.where(needs, A_bar[:, None, :] * Pu, 0.0).sum(axis=0)
            Ru = R[u]
            if Ru.any():
                logM_bar += np.where((Ru[None] > 0) & needs, A_bar[:, None, :] * Ru[None] * Lu * Pu, 0.0)
    rate_bar += R_bar[inv]

    # Lambda and rho -> rate, alpha
    rate_bar += Lam_bar[None, None, :]
    mc = np.where(has_alpha, mean_chunk, 0.0)
    rate_bar += rho_bar[None, None, :] * Lf[:, None, None] * mc[None]
    alpha_bar = -(rho_bar[None, :] * (ev.rate * Lf[:, None, None]).sum(axis=0)
                  / safe_alpha ** 2)
    alpha_bar = np.where(has_alpha, alpha_bar, 0.0)

    # logM = log alpha - log(alpha - t) + beta t
    gap = np.where(ev.rate_ok, alpha[None] - tt, 1.0)
    lm = np.where(ev.rate_ok, logM_bar, 0.0)
    t_bar += (lm * (1.0 / gap + ev.beta[None])).sum(axis=(1, 2))
    alpha_bar += (lm * (-tt / (safe_alpha[None] * gap))).sum(axis=0)

    ab = inst.alpha_base[srv]
    w_bar = (alpha_bar * ab[None, :] / inst.sizes[:, None]).sum(axis=0)

    # rate = lam b pi
    with np.errstate(invalid="ignore"):
        b_bar += np.where(ev.pi > 0, rate_bar * lam[:, None, None] * ev.pi, 0.0).sum(axis=2)
        lam_b = (lam[:, None] * b)[:, :, None]
        pi_bar = pi_bar + np.where(lam_b > 0, rate_bar * lam_b, 0.0)

    with np.errstate(invalid="ignore"):
        contrib = np.where(p[None] > 0, pi_bar * p[None], 0.0)
    q_bar = np.zeros((r, V, inst.m))
    np.add.at(q_bar, (slice(None), slice(None), srv), contrib)
    # undefined stream reached through a used slot: derivative is unbounded
    undefined_used = (~D) & (p[None] > 0)
    blocked = np.zeros((r, V, inst.m), dtype=bool)
    np.logical_or.at(blocked, (slice(None), slice(None), srv), undefined_used)
    q_bar = np.where(blocked, np.inf, q_bar)

    qs = q[:, :, srv]
    with np.errstate(invalid="ignore"):
        p_terms = np.where(qs > 0, pi_bar * qs, 0.0)
    p_bar = p_terms.sum(axis=0)
    p_blocked = ((~D) & (qs > 0)).any(axis=0)
    p_bar = np.where(p_blocked, np.inf, p_bar)

    return {"q": q_bar, "p": p_bar, "b": b_bar, "w": w_bar, "t": t_bar}


def strict_margin(inst: Instance, ev: Evaluation, t: np.ndarray) -> float:
    """Smallest relative slack over the strict constraints (positive when all hold).

    Slacks are ``1 - rho`` on loaded streams, ``1 - t / alpha`` on relevant
    entries, ``-C(t) / t`` for the segment-ratio condition and ``E / t`` for
    the waiting transform.  A policy satisfies every strict constraint with
    margin ``delta`` exactly when this value is at least ``delta`` and every
    ``t`` is at least ``delta``.
    """
    ld = ev.loads
    active = ev.active
    used = active.any(axis=1)
    level_loaded = ld.R.sum(axis=0) > 0
    relevant = active | (used[:, None, :] & level_loaded[None])
    tt = t[:, None, None]
    parts = [np.inf]
    loaded = ld.Lambda > 0
    if loaded.any():
        parts.append(_worst(1.0 - ld.rho[loaded]))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if relevant.any():
            ratio = np.where(ld.alpha[None] > 0, 1.0 - tt / np.where(ld.alpha[None] > 0, ld.alpha[None], 1.0), -np.inf)
            parts.append(_worst(np.broadcast_to(ratio, relevant.shape)[relevant]))
        if active.any():
            C = ld.alpha[None] * np.expm1((ld.beta[None] - inst.tau) * tt) + tt
            parts.append(_worst((-C / tt)[active]))
        if used.any():
            parts.append(_worst((ev.E / t[:, None])[used]))
    return min(parts)


def _worst(values: np.ndarray) -> float:
    """Minimum with nan treated as the worst possible slack."""
    return float(np.min(np.where(np.isnan(values), -np.inf, values)))
