"""Closed-form service, queueing and stall-bound quantities.

The per-index functions here evaluate one stream or one (video, quality)
pair directly from the definitions; ``bound_report`` and ``objective`` use the
vectorized kernel.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .model import InfeasibleError, Instance, OverloadError, PolicyVars, ServerSpec, StreamLoad


class DomainError(ValueError):
    """A transform is evaluated outside the region where it exists."""


@dataclass(frozen=True)
class EffectiveService:
    alpha: float
    beta: float


def effective_params(server: ServerSpec, w: float, a: float) -> EffectiveService:
    """Chunk service law on a stream holding bandwidth share ``w`` at size ``a``."""
    if not w > 0:
        raise DomainError("zero-rate stream: bandwidth share must be positive")
    if not a > 0:
        raise DomainError("chunk size must be positive")
    return EffectiveService(alpha=server.alpha_base * w / a, beta=server.beta_base * a)


def chunk_mgf(svc: EffectiveService, t: float) -> float:
    if t >= svc.alpha:
        raise DomainError(f"MGF does not exist: t={t} >= alpha={svc.alpha}")
    return svc.alpha / (svc.alpha - t) * math.exp(svc.beta * t)


def log_chunk_mgf(alpha: float, beta: float, t: float) -> float:
    if t >= alpha:
        raise DomainError(f"MGF does not exist: t={t} >= alpha={alpha}")
    return math.log(alpha) - math.log(alpha - t) + beta * t


def _service(inst: Instance, w: np.ndarray, l: int, s: int) -> tuple[float, float]:
    j = int(inst.stream_server[s])
    a = inst.sizes[l]
    return inst.alpha_base[j] * w[s] / a, inst.beta_base[j] * a


def stream_arrival_rates(inst: Instance, pol: PolicyVars) -> tuple[np.ndarray, float]:
    """Per-stream request rates and their total (equals sum_i lambda_i k_i)."""
    pol.check_dims(inst)
    rate = inst.lam[:, None, None] * pol.b[:, :, None] * pol.pi(inst)
    Lam = rate.sum(axis=(0, 1))
    return Lam, float(Lam.sum())


def stream_load(inst: Instance, pol: PolicyVars) -> StreamLoad:
    Lam, _ = stream_arrival_rates(inst, pol)
    rho = np.array([utilization(inst, pol, s) for s in range(inst.S)])
    return StreamLoad(Lambda=Lam, rho=rho)


def _mixture(inst: Instance, pol: PolicyVars, s: int):
    """(weight, alpha, beta, L) for every (video, level) that sends work to s."""
    j = int(inst.stream_server[s])
    out = []
    for i in range(inst.r):
        for l in range(inst.V):
            mass = inst.lam[i] * pol.b[i, l] * pol.q[i, l, j] * pol.p[l, s]
            if mass > 0:
                alpha, beta = _service(inst, pol.w, l, s)
                out.append((mass, alpha, beta, int(inst.L[i])))
    return out


def file_service_mgf(inst: Instance, pol: PolicyVars, s: int, t: float) -> float:
    """MGF of the whole-file service time at stream ``s``."""
    mix = _mixture(inst, pol, s)
    total = sum(m for m, *_ in mix)
    if total <= 0:
        raise DomainError(f"stream {s} receives no traffic; its service law is undefined")
    acc = 0.0
    for mass, alpha, beta, L in mix:
        acc += mass / total * math.exp(L * log_chunk_mgf(alpha, beta, t))
    return acc


def utilization(inst: Instance, pol: PolicyVars, s: int) -> float:
    rho = 0.0
    for mass, alpha, beta, L in _mixture(inst, pol, s):
        rho += mass * L * (beta + 1.0 / alpha)
    return rho


def mean_waiting_time(inst: Instance, pol: PolicyVars, s: int) -> float:
    """Mean FIFO waiting time at stream ``s`` (mean-value Pollaczek-Khinchine)."""
    mix = _mixture(inst, pol, s)
    Lam = sum(m for m, *_ in mix)
    if Lam == 0:
        return 0.0
    rho = sum(m * L * (beta + 1 / alpha) for m, alpha, beta, L in mix)
    if rho >= 1:
        raise OverloadError(f"stream {s} is unstable (rho={rho:.4f})")
    second = sum(m / Lam * (L / alpha ** 2 + (L * (beta + 1 / alpha)) ** 2)
                 for m, alpha, beta, L in mix)
    return Lam * second / (2 * (1 - rho))


def waiting_prefactor(inst: Instance, pol: PolicyVars, s: int, t: float) -> float:
    """(1 - rho) t B(t) / (t - Lambda (B(t) - 1)); 1 on an idle stream."""
    Lam, _ = stream_arrival_rates(inst, pol)
    if Lam[s] == 0:
        return 1.0
    rho = utilization(inst, pol, s)
    if rho >= 1:
        raise DomainError(f"stream {s} is unstable (rho={rho:.4f})")
    B = file_service_mgf(inst, pol, s, t)
    denom = t - Lam[s] * (B - 1.0)
    if denom <= 0:
        raise DomainError(f"waiting-time MGF does not exist at t={t} on stream {s}")
    return (1 - rho) * t * B / denom


def download_mgf(inst: Instance, pol: PolicyVars, i: int, s: int, l: int,
                 u: int, t: float) -> float:
    """MGF of the download time of chunk ``u`` of video ``i`` from stream ``s``."""
    del i  # the law depends on the video only through the level and u
    if not t > 0:
        raise DomainError("t must be positive")
    alpha, beta = _service(inst, pol.w, l, s)
    if alpha <= 0 or t >= alpha:
        raise DomainError(f"t={t} is not below the chunk rate {alpha} on stream {s}")
    return waiting_prefactor(inst, pol, s, t) * math.exp(u * log_chunk_mgf(alpha, beta, t))


def segment_tail_H(inst: Instance, pol: PolicyVars, i: int, s: int, l: int,
                   t: float) -> float:
    """Geometric closed form of sum_v exp(-t(d_s + (v-1) tau)) Z(v)."""
    L = int(inst.L[i])
    tau, ds = inst.tau, inst.ds
    alpha, beta = _service(inst, pol.w, l, s)
    if alpha <= 0 or t >= alpha:
        raise DomainError(f"t={t} is not below the chunk rate {alpha} on stream {s}")
    pref = waiting_prefactor(inst, pol, s, t)
    x = log_chunk_mgf(alpha, beta, t) - t * tau          # log of M(t) e^{-t tau}
    if x == 0.0:
        geo = float(L)
    else:
        geo = math.exp(x) * math.expm1(L * x) / math.expm1(x)
    return math.exp(-t * (ds - tau)) * pref * geo


def stall_bound(inst: Instance, pol: PolicyVars, i: int, l: int) -> float:
    """Upper bound on the mean stall of video ``i`` streamed at level ``l``."""
    ev = kernel.evaluate(inst, pol)
    active = ev.active[i, l]
    bad = active & ~ev.defined[i, l]
    if bad.any() or not pol.t[i] > 0:
        raise InfeasibleError(
            f"bound conditions fail for video {i} level {l} on streams {np.flatnonzero(bad).tolist()}"
        )
    return float(ev.bound[i, l])


def objective(inst: Instance, pol: PolicyVars, theta: float) -> float:
    ev = kernel.evaluate(inst, pol, theta)
    if not ev.feasible:
        raise InfeasibleError("objective undefined: bound conditions violated")
    return ev.objective


def average_quality(inst: Instance, pol: PolicyVars) -> float:
    c = inst.lam / inst.lam.sum()
    share = inst.L / inst.L.sum()
    return float(np.sum(c[:, None] * share[:, None] * pol.b * inst.sizes[None, :]))


# ---------------------------------------------------------------------------
# admissible range of the auxiliary exponent
# ---------------------------------------------------------------------------


def t_feasible_upper(inst: Instance, pol: PolicyVars, i: int, delta: float = 1e-6) -> float:
    """Largest t_i satisfying the exponent constraints with margin ``delta``.

    Constraints are taken over every (level, stream) that video ``i`` can use
    (pi > 0).  The margin versions are ``t <= (1 - delta) alpha``,
    ``C(t) <= -delta t`` for the geometric ratio and ``E(t) >= delta t`` for the
    waiting-time transform.  Each is convex in t and holds just above zero,
    so the feasible set is an interval.
    """
    ld = kernel.loads(inst, pol)
    active = ld.pi[i] > 0
    streams = np.flatnonzero(active.any(axis=0))
    if streams.size == 0:
        raise InfeasibleError(f"video {i} uses no stream")
    unstable = streams[ld.rho[streams] > 1 - delta]
    if unstable.size:
        raise OverloadError(f"video {i} uses unstable streams {unstable.tolist()}")
    for l, s in zip(*np.nonzero(active)):
        # C(0) = 0 and C'(0) = alpha (beta - tau) + 1 must be negative
        if ld.alpha[l, s] * (ld.beta[l, s] - inst.tau) + 1 >= -delta:
            raise InfeasibleError(
                f"empty exponent interval for video {i}: mean chunk time on stream {s} "
                f"at level {l} is not below the segment duration")
    upper = float(kernel.t_upper(inst, ld, delta)[i])
    if not np.isfinite(upper):
        raise InfeasibleError(f"empty exponent interval for video {i}")
    return upper


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    per_file_quality_bound: np.ndarray   # (r, V)
    weighted_mean_stall: float
    average_quality: float
    objective: float
    theta: float
    loads: StreamLoad

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "weighted_mean_stall": self.weighted_mean_stall,
            "average_quality": self.average_quality,
            "objective": self.objective,
            "per_file_quality_bound": self.per_file_quality_bound.tolist(),
            "Lambda": self.loads.Lambda.tolist(),
            "rho": self.loads.rho.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self, inst: Instance, pol: PolicyVars) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["video", "quality", "lambda", "b", "t", "stall_bound"])
        for i, v in enumerate(inst.videos):
            for l in range(inst.V):
                wr.writerow([v.video_id, l + 1, repr(float(inst.lam[i])),
                             repr(float(pol.b[i, l])), repr(float(pol.t[i])),
                             repr(float(self.per_file_quality_bound[i, l]))])
        return buf.getvalue()


def bound_report(inst: Instance, pol: PolicyVars, theta: float) -> BoundReport:
    pol.check_dims(inst)
    ev = kernel.evaluate(inst, pol, theta)
    if not ev.feasible:
        raise InfeasibleError("bound conditions violated; see validate_policy for details")
    weighted = float(np.sum(ev.weights[:, None] * pol.b * ev.bound))
    return BoundReport(
        per_file_quality_bound=ev.bound.copy(),
        weighted_mean_stall=weighted,
        average_quality=average_quality(inst, pol),
        objective=ev.objective,
        theta=theta,
        loads=StreamLoad(Lambda=ev.Lambda.copy(), rho=ev.rho.copy()),
    )
