"""Alternating block minimization of the weighted stall/quality objective.

Each outer iteration visits the access probabilities q, the stream choice p,
the exponents t, the quality mix b and the bandwidth split w in that order.
A block update minimizes the proximal linearization

    g^T (x - x0) + (tau_block / 2) ||x - x0||^2

over the block's convex set, then moves a fraction gamma toward the
minimizer.  Gamma is halved until the new point keeps every strict
constraint with margin and does not increase the objective; when no such
fraction is found the block is left unchanged.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernel
from .model import (
    InfeasibleError,
    Instance,
    OverloadError,
    PolicyVars,
    SolverConfig,
    require_valid,
)

log = logging.getLogger(__name__)


class BlockId(enum.Enum):
    Q_ACCESS = "q"
    P_STREAM = "p"
    T_AUX = "t"
    B_QUALITY = "b"
    W_BANDWIDTH = "w"

    @property
    def key(self) -> str:
        return self.value


BLOCK_ORDER = (BlockId.Q_ACCESS, BlockId.P_STREAM, BlockId.T_AUX,
               BlockId.B_QUALITY, BlockId.W_BANDWIDTH)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


def project_capped_simplex_rows(v: np.ndarray, total, cap=np.inf, support=None) -> np.ndarray:
    """Row-wise projection onto {x : sum x = total, 0 <= x <= cap, x = 0 off support}.

    Threshold method: find lam with sum clip(v - lam, 0, cap) = total.  The
    left side is piecewise linear in lam with breakpoints at v and v - cap,
    so the root is found exactly by interpolating between the two
    breakpoints that bracket it.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    R, n = v.shape
    total = np.broadcast_to(np.asarray(total, dtype=float), (R,)).copy()
    mask = np.ones((R, n), dtype=bool) if support is None else np.broadcast_to(support, (R, n))
    count = mask.sum(axis=1)
    cap_arr = np.broadcast_to(np.asarray(cap, dtype=float), (R,))
    if np.any(total < 0):
        raise ValueError("projection target must be nonnegative")
    if np.any(total > cap_arr * count * (1 + 1e-12)):
        raise ValueError("projection target exceeds cap times support size")
    # no coordinate can exceed the total, so an infinite cap becomes the total
    c = np.minimum(cap_arr, total)[:, None]

    out = np.zeros((R, n))
    live = total > 0
    if not live.any():
        return out
    vv, cc, tt, mm = v[live], c[live], total[live], mask[live]
    bps = np.concatenate([np.where(mm, vv, np.inf), np.where(mm, vv - cc, np.inf)], axis=1)
    bps.sort(axis=1)

    def f(lam):
        return np.where(mm[:, None, :], np.clip(vv[:, None, :] - lam[:, :, None], 0, cc[:, :, None]),
                        0.0).sum(axis=2)

    with np.errstate(invalid="ignore"):
        F = f(np.where(np.isfinite(bps), bps, 0.0))
    F = np.where(np.isfinite(bps), F, 0.0)
    k = np.argmax(F <= tt[:, None], axis=1)
    rows = np.arange(len(tt))
    lam = bps[rows, k].copy()
    inner = k > 0
    if inner.any():
        b0, b1 = bps[rows, k - 1], bps[rows, k]
        f0, f1 = F[rows, k - 1], F[rows, k]
        with np.errstate(invalid="ignore", divide="ignore"):
            interp = b0 + (f0 - tt) * (b1 - b0) / (f0 - f1)
        lam = np.where(inner, interp, lam)
    # on a flat piece any threshold in it is exact; take the breakpoint
    lam = np.where(F[rows, k] == tt, bps[rows, k], lam)
    x = np.where(mm, np.clip(vv - lam[:, None], 0, cc), 0.0)
    out[live] = x
    return out


def project_capped_simplex(v, total: float = 1.0, cap: float = np.inf, support=None) -> np.ndarray:
    """Euclidean projection of a vector onto a capped simplex restricted to ``support``."""
    v = np.asarray(v, dtype=float)
    sup = None if support is None else _as_mask(support, v.size)
    return project_capped_simplex_rows(v[None, :], total, cap, sup)[0]


def _as_mask(support, n: int) -> np.ndarray:
    support = np.asarray(support)
    if support.dtype == bool:
        return support
    mask = np.zeros(n, dtype=bool)
    mask[support.astype(int)] = True
    return mask


def project_box_budget_rows(v: np.ndarray, cap: float = 1.0, budget: float = 1.0,
                            support=None) -> np.ndarray:
    v = np.atleast_2d(np.asarray(v, dtype=float))
    mask = np.ones(v.shape, dtype=bool) if support is None else np.broadcast_to(support, v.shape)
    x = np.where(mask, np.clip(v, 0.0, cap), 0.0)
    over = x.sum(axis=1) > budget
    if over.any():
        x[over] = project_capped_simplex_rows(v[over], budget, cap, mask[over])
    return x


def project_box_budget(v, cap: float = 1.0, budget: float = 1.0) -> np.ndarray:
    """Projection onto {0 <= x <= cap, sum x <= budget}."""
    return project_box_budget_rows(np.asarray(v, dtype=float)[None, :], cap, budget)[0]


def project_t(instance: Instance, policy: PolicyVars, i: int, candidate: float | None = None,
              slack_delta: float = 1e-6) -> float:
    """Clamp a candidate exponent for video ``i`` into its feasible interval."""
    from .analytics import t_feasible_upper

    upper = t_feasible_upper(instance, policy, i, slack_delta)
    x = float(policy.t[i] if candidate is None else candidate)
    return float(min(max(x, slack_delta), upper))


def t_interval(instance: Instance, policy: PolicyVars, slack_delta: float) -> np.ndarray:
    """Upper ends of every video's exponent interval; raises when one is empty."""
    ld = kernel.loads(instance, policy)
    upper = kernel.t_upper(instance, ld, slack_delta)
    bad = np.flatnonzero(~(upper >= slack_delta))
    if bad.size:
        if np.any(ld.rho[ld.Lambda > 0] > 1 - slack_delta):
            raise OverloadError(f"unstable streams leave no exponent for videos {bad.tolist()}")
        raise InfeasibleError(f"empty exponent interval for videos {bad.tolist()}")
    return upper


def clamp_t(instance: Instance, policy: PolicyVars, y: np.ndarray, slack_delta: float,
            rtol: float = 1e-9) -> np.ndarray:
    """Project candidate exponents onto each video's interval [delta, upper].

    The current ``policy.t`` is feasible, so a candidate below it only needs
    the lower clamp.  A candidate above it is kept if it passes the check,
    otherwise the interval end is located by bisection between the two.
    """
    d = slack_delta
    y = np.maximum(np.asarray(y, dtype=float), d)
    ld = kernel.loads(instance, policy)
    lo = np.asarray(policy.t, dtype=float).copy()
    up = y > lo
    if not up.any():
        return y
    trial = np.where(up, y, lo)
    ok = kernel.exponent_ok(instance, ld, trial, d)
    hi = trial.copy()
    todo = up & ~ok
    while todo.any():
        mid = np.where(todo, 0.5 * (lo + hi), lo)
        good = kernel.exponent_ok(instance, ld, mid, d)
        lo = np.where(todo & good, mid, lo)
        hi = np.where(todo & ~good, mid, hi)
        todo &= (hi - lo) > rtol * hi
    return np.where(up & ok, y, np.where(up, lo, y))


# ---------------------------------------------------------------------------
# supports: which entries of q and p may become positive
# ---------------------------------------------------------------------------


def admissible_entries(instance: Instance, w: np.ndarray, slack_delta: float) -> np.ndarray:
    """(V, S) mask of (level, stream) pairs whose mean chunk time leaves room.

    An entry can carry probability only if the segment-ratio condition has a
    solution t > 0, which needs alpha (beta - tau) + 1 <= -delta.
    """
    alpha, beta = kernel.stream_params(instance, w)
    return alpha * (beta - instance.tau) + 1.0 <= -slack_delta


def entry_ok(instance: Instance, policy: PolicyVars, slack_delta: float) -> np.ndarray:
    """(r, V, S) mask: activating the entry keeps the per-entry exponent conditions at current t."""
    alpha, beta = kernel.stream_params(instance, policy.w)
    tt = policy.t[:, None, None]
    d = slack_delta
    with np.errstate(over="ignore", invalid="ignore"):
        C = alpha[None] * np.expm1((beta[None] - instance.tau) * tt) + tt
    return (tt <= (1 - d) * alpha[None]) & (C <= -d * tt)


def q_support(instance: Instance, policy: PolicyVars, slack_delta: float) -> np.ndarray:
    ok = entry_ok(instance, policy, slack_delta)
    used_slot = (policy.p > 0)[None]
    stream_fine = ok | ~used_slot
    srv = instance.stream_server
    bad = np.zeros((instance.r, instance.V, instance.m), dtype=bool)
    np.logical_or.at(bad, (slice(None), slice(None), srv), ~stream_fine)
    return instance.placed & (~bad | (policy.q > 0))


def p_support(instance: Instance, policy: PolicyVars, slack_delta: float) -> np.ndarray:
    ok = entry_ok(instance, policy, slack_delta)
    users = (policy.q[:, :, instance.stream_server] > 0)
    bad = (users & ~ok).any(axis=0)
    return ~bad | (policy.p > 0)


# ---------------------------------------------------------------------------
# block projections
# ---------------------------------------------------------------------------


def _frozen_videos(instance: Instance) -> np.ndarray:
    return instance.lam == 0


def project_block(instance: Instance, policy: PolicyVars, block: BlockId, y: np.ndarray,
                  slack_delta: float, support=None) -> np.ndarray:
    """Project a candidate value of one block onto that block's convex set."""
    inst = instance
    if block is BlockId.Q_ACCESS:
        sup = inst.placed if support is None else support
        flat = project_capped_simplex_rows(y.reshape(-1, inst.m), np.repeat(inst.k, inst.V).astype(float),
                                           1.0, sup.reshape(-1, inst.m))
        out = flat.reshape(y.shape)
        frozen = _frozen_videos(inst)
        out[frozen] = policy.q[frozen]
        return out
    if block is BlockId.P_STREAM:
        out = np.zeros_like(y)
        sup = np.ones(y.shape, dtype=bool) if support is None else support
        for j in range(inst.m):
            sl = slice(inst.stream_offset[j], inst.stream_offset[j + 1])
            out[:, sl] = project_capped_simplex_rows(y[:, sl], 1.0, np.inf, sup[:, sl])
        return out
    if block is BlockId.B_QUALITY:
        out = project_capped_simplex_rows(y, 1.0)
        frozen = _frozen_videos(inst)
        out[frozen] = policy.b[frozen]
        return out
    if block is BlockId.W_BANDWIDTH:
        out = np.zeros_like(y)
        for j in range(inst.m):
            sl = slice(inst.stream_offset[j], inst.stream_offset[j + 1])
            out[sl] = project_box_budget_rows(y[None, sl])[0]
        return out
    if block is BlockId.T_AUX:
        out = clamp_t(inst, policy, y, slack_delta)
        frozen = _frozen_videos(inst)
        out[frozen] = policy.t[frozen]
        return out
    raise ValueError(f"unknown block {block}")


def block_support(instance: Instance, policy: PolicyVars, block: BlockId, grad: np.ndarray,
                  slack_delta: float):
    """Entries of q or p that may be positive after the step; None for other blocks."""
    if block is BlockId.Q_ACCESS:
        sup = q_support(instance, policy, slack_delta)
    elif block is BlockId.P_STREAM:
        sup = p_support(instance, policy, slack_delta)
    else:
        return None
    x = getattr(policy, block.key)
    return sup & (np.isfinite(grad) | (x > 0))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def grad_block(instance: Instance, policy: PolicyVars, theta: float, block: BlockId,
               cfg: SolverConfig | None = None, ev: kernel.Evaluation | None = None) -> np.ndarray:
    """Gradient of the objective with respect to one block.

    Uses the analytic reverse pass, or central finite differences when
    ``cfg.fd_gradients`` is set.  Entries whose activation would leave the
    bound undefined are ``inf``.  ``ev`` may pass in an existing evaluation
    of ``policy`` at ``theta``.
    """
    cfg = cfg or SolverConfig()
    if cfg.fd_gradients:
        return fd_gradient(instance, policy, theta, block, cfg.fd_step)
    if ev is None:
        ev = kernel.evaluate(instance, policy, theta, need_grad=True)
    else:
        kernel.add_gradient(instance, policy, ev)
    if not ev.feasible:
        raise InfeasibleError("gradient requested at a point where the bound is undefined")
    return _mask_frozen(instance, block, ev.grads[block.key])


def _mask_frozen(instance: Instance, block: BlockId, g: np.ndarray) -> np.ndarray:
    if block in (BlockId.Q_ACCESS, BlockId.B_QUALITY, BlockId.T_AUX):
        g = g.copy()
        g[_frozen_videos(instance)] = 0.0
    return g


def fd_gradient(instance: Instance, policy: PolicyVars, theta: float, block: BlockId,
                step: float = 1e-6) -> np.ndarray:
    """Central differences with relative step; one-sided at a zero lower bound."""
    x = getattr(policy, block.key)
    g = np.zeros_like(x)

    def f(val):
        return kernel.evaluate(instance, policy.replace(**{block.key: val}), theta).objective

    f0 = f(x)
    if not np.isfinite(f0):
        raise InfeasibleError("gradient requested at a point where the bound is undefined")
    for idx in np.ndindex(x.shape):
        if block is BlockId.Q_ACCESS and not instance.placed[idx]:
            g[idx] = np.inf
            continue
        h = step * max(1.0, abs(x[idx]))
        up = x.copy()
        up[idx] += h
        if x[idx] - h < 0:
            g[idx] = (f(up) - f0) / h
        else:
            dn = x.copy()
            dn[idx] -= h
            g[idx] = (f(up) - f(dn)) / (2 * h)
    g = np.where(np.isfinite(g), g, np.inf)
    return _mask_frozen(instance, block, g)


# ---------------------------------------------------------------------------
# one block step
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    policy: PolicyVars
    objective: float
    inner_steps: int
    backtracks: int
    accepted: bool
    slack: float
    pg_norm: float
    evaluation: kernel.Evaluation


def _reg(cfg: SolverConfig, block: BlockId) -> float:
    return float(getattr(cfg.reg, block.key))


def _surrogate_min(instance, policy, block, g, cfg, support):
    """Minimize the proximal linearization by projected gradient steps.

    With the default step ``1 / tau_block`` the first projection is already
    the exact minimizer, so no iteration is needed.
    """
    x0 = getattr(policy, block.key)
    tau_b = _reg(cfg, block)
    gz = np.where(np.isfinite(g), g, 0.0)
    d = cfg.slack_delta
    if cfg.inner_pgd.step is None:
        return project_block(instance, policy, block, x0 - gz / tau_b, d, support), 1
    step = cfg.inner_pgd.step
    y = x0.copy()
    used = 0
    for used in range(1, cfg.inner_pgd.max_steps + 1):
        grad_s = gz + tau_b * (y - x0)
        y_new = project_block(instance, policy, block, y - step * grad_s, d, support)
        done = np.max(np.abs(y_new - y)) <= cfg.inner_pgd.tol if y.size else True
        y = y_new
        if done:
            break
    return y, used


def nova_step(instance: Instance, policy: PolicyVars, theta: float, block: BlockId,
              cfg: SolverConfig, ev: kernel.Evaluation | None = None) -> StepResult:
    """One proximal-linearization update of ``block`` with backtracking on gamma.

    ``pg_norm`` is the norm of the proximal gradient mapping
    ``tau_block (x - x_hat)``, zero exactly at a stationary point of the block.
    """
    inst = instance
    d = cfg.slack_delta
    if ev is None:
        ev = kernel.evaluate(inst, policy, theta)
    current = ev.objective
    g = grad_block(inst, policy, theta, block, cfg, ev)
    support = block_support(inst, policy, block, g, d)
    x0 = getattr(policy, block.key)
    x_hat, inner = _surrogate_min(inst, policy, block, g, cfg, support)
    pg_norm = float(_reg(cfg, block) * np.linalg.norm(x_hat - x0))

    direction = x_hat - x0
    gamma = cfg.step_gamma
    if not np.any(direction):
        return StepResult(policy, current, inner, 0, False, kernel.strict_margin(inst, ev, policy.t),
                          pg_norm, ev)
    for back in range(cfg.max_backtracks + 1):
        x_new = x0 + gamma * direction
        if block is BlockId.Q_ACCESS:
            # keep exact zeros off the support and exact row sums
            x_new = np.where(support, np.clip(x_new, 0.0, 1.0), 0.0)
        cand = policy.replace(**{block.key: x_new})
        ev_c = kernel.evaluate(inst, cand, theta)
        if ev_c.feasible and np.all(cand.t >= d):
            slack = kernel.strict_margin(inst, ev_c, cand.t)
            if slack >= d and ev_c.objective <= current:
                return StepResult(cand, ev_c.objective, inner + back, back, True, slack, pg_norm, ev_c)
        gamma *= 0.5
    return StepResult(policy, current, inner + cfg.max_backtracks + 1, cfg.max_backtracks, False,
                      kernel.strict_margin(inst, ev, policy.t), pg_norm, ev)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    block: str
    objective: float
    inner_steps: int
    slack: float


@dataclass
class OptimizeTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.rows])

    def max_increase(self) -> float:
        obj = self.objectives()
        if obj.size < 2:
            return 0.0
        return float(max(0.0, np.max(np.diff(obj))))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "block", "objective", "inner_steps", "slack"])
        for r in self.rows:
            wr.writerow([r.iteration, r.block, repr(r.objective), r.inner_steps, repr(r.slack)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class OptimizeResult:
    policy: PolicyVars
    trace: OptimizeTrace
    converged: bool
    iterations: int
    objective: float
    pg_norms: dict[str, float]
    stationary: bool = False

    def __iter__(self):
        # allows ``policy, trace = alternating_optimize(...)``
        return iter((self.policy, self.trace))


def alternating_optimize(instance: Instance, theta: float, init: PolicyVars,
                         cfg: SolverConfig | None = None, blocks=BLOCK_ORDER,
                         callback=None) -> OptimizeResult:
    """Cycle block updates in the fixed order until the objective settles.

    Only blocks listed in ``blocks`` are updated; the visiting order is always
    q, p, t, b, w.  Stops when one full cycle changes the objective by less
    than ``cfg.epsilon``.  ``callback(policy, block, iteration)`` runs after
    every block update.
    """
    cfg = cfg or SolverConfig()
    init.check_dims(instance)
    require_valid(init, instance, cfg.slack_delta)
    wanted = {BlockId(b) if not isinstance(b, BlockId) else b for b in blocks}
    order = [b for b in BLOCK_ORDER if b in wanted]

    pol = init
    ev = kernel.evaluate(instance, pol, theta)
    obj = ev.objective
    trace = OptimizeTrace()
    trace.append(TraceRow(0, "init", obj, 0, kernel.strict_margin(instance, ev, pol.t)))
    converged = False
    pg_norms = {b.key: np.nan for b in order}
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        start = obj
        for block in order:
            res = nova_step(instance, pol, theta, block, cfg, ev)
            pol, obj, ev = res.policy, res.objective, res.evaluation
            pg_norms[block.key] = res.pg_norm
            trace.append(TraceRow(it, block.key, obj, res.inner_steps, res.slack))
            if callback is not None:
                callback(pol, block, it)
        if abs(start - obj) < cfg.epsilon:
            converged = True
            break
    if not converged:
        log.warning("no convergence after %d outer iterations (objective %.9g)", it, obj)
    stationary = all(not v > cfg.grad_tol for v in pg_norms.values())
    return OptimizeResult(pol, trace, converged, it, obj, pg_norms, stationary)


# ---------------------------------------------------------------------------
# repair
# ---------------------------------------------------------------------------


def _row_feasible_q(instance, q, support):
    k = np.repeat(instance.k, instance.V).reshape(instance.r, instance.V)
    ok = (np.abs(q.sum(axis=2) - k) <= 1e-12 * k) & np.all((q >= 0) & (q <= 1), axis=2)
    return ok & np.all(support | (q == 0), axis=2)


def feasibility_repair(instance: Instance, raw: PolicyVars, slack_delta: float = 1e-6) -> PolicyVars:
    """Closest-point repair of every block, then validation.

    p, b and w are projected onto their simplices and boxes.  q is projected
    onto its capped simplex restricted to placed servers whose used streams
    can carry the level at all (mean chunk time below the segment duration);
    when too few qualify the full placement is used.  Finally each t is
    clamped into its exponent interval.  Rows that are already feasible are
    left bit-for-bit unchanged.
    """
    inst = instance
    raw.check_dims(inst)
    d = slack_delta

    p = raw.p.copy()
    for j in range(inst.m):
        sl = slice(inst.stream_offset[j], inst.stream_offset[j + 1])
        rows = p[:, sl]
        ok = (np.abs(rows.sum(axis=1) - 1) <= 1e-12) & np.all(rows >= 0, axis=1)
        if not ok.all():
            rows[~ok] = project_capped_simplex_rows(rows[~ok], 1.0)
            p[:, sl] = rows

    b = raw.b.copy()
    ok = (np.abs(b.sum(axis=1) - 1) <= 1e-12) & np.all(b >= 0, axis=1)
    if not ok.all():
        b[~ok] = project_capped_simplex_rows(b[~ok], 1.0)

    w = raw.w.copy()
    for j in range(inst.m):
        sl = slice(inst.stream_offset[j], inst.stream_offset[j + 1])
        seg = w[sl]
        if np.any(seg < 0) or np.any(seg > 1) or seg.sum() > 1 + 1e-12:
            w[sl] = project_box_budget(seg)

    adm = admissible_entries(inst, w, d)                          # (V, S)
    stream_fine = adm | (p <= 0)
    bad = np.zeros((inst.V, inst.m), dtype=bool)
    np.logical_or.at(bad, (slice(None), inst.stream_server), ~stream_fine)
    support = inst.placed & ~bad[None]
    short = support.sum(axis=2) < inst.k[:, None]
    support = np.where(short[:, :, None], inst.placed, support)

    q = raw.q.copy()
    ok = _row_feasible_q(inst, q, support)
    if not ok.all():
        flat_q = q.reshape(-1, inst.m)
        flat_ok = ok.reshape(-1)
        flat_sup = support.reshape(-1, inst.m)
        kk = np.repeat(inst.k, inst.V).astype(float)
        flat_q[~flat_ok] = project_capped_simplex_rows(flat_q[~flat_ok], kk[~flat_ok], 1.0,
                                                       flat_sup[~flat_ok])
        q = flat_q.reshape(q.shape)

    pol = PolicyVars(q=q, p=p, b=b, w=w, t=raw.t)
    upper = t_interval(inst, pol, d)
    t = np.clip(raw.t, d, upper)
    pol = pol.replace(t=t)
    require_valid(pol, inst, d)
    return pol
