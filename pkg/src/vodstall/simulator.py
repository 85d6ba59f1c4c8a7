"""Discrete-event simulation of coded video streaming over parallel FIFO streams.

Requests arrive as a merged Poisson stream.  Each picks a quality level, a
set of k servers with the prescribed marginal probabilities, and one stream
per chosen server.  Every chosen stream queues the whole L-chunk job in
FIFO order.  A segment is available once its chunk has arrived from all k
streams, and playback starts after the startup delay and stalls whenever
the next segment is late.

Two recursions make this vectorizable.  The FIFO start times satisfy

    start_n = S_{n-1} + max_{m <= n} (a_m - S_{m-1}),

where S is the running sum of job service times in arrival order.  For the
play times, T_u = (u - 1) tau + max(d_s, max_{v <= u} (D_v - (v - 1) tau)), so
the stall of a request is max(0, max_v (D_v - (v - 1) tau) - d_s).
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .model import Instance, PolicyVars


@dataclass(frozen=True)
class SimConfig:
    num_requests: int = 100_000
    warmup_fraction: float = 0.1
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


# ---------------------------------------------------------------------------
# scheduling draws
# ---------------------------------------------------------------------------


def systematic_servers(qrows: np.ndarray, k: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Madow systematic sampling, one draw per row.

    Servers are put in a uniformly random order, their probabilities laid
    end to end on [0, k], and the points U, U + 1, ..., U + k - 1 select the
    servers whose intervals contain them.  Each server is included with
    probability exactly its q value.  Returns an (R, max k) array of server
    indices padded with -1.
    """
    R, m = qrows.shape
    perm = np.argsort(rng.random((R, m)), axis=1)
    qp = np.take_along_axis(qrows, perm, axis=1)
    cum = np.cumsum(qp, axis=1)
    u = 1.0 - rng.random(R)                       # in (0, 1]
    kmax = int(k.max())
    out = np.full((R, kmax), -1, dtype=int)
    last_pos = m - 1 - np.argmax((qp > 0)[:, ::-1], axis=1)
    for kk in range(kmax):
        point = u + kk
        pos = np.argmax(cum >= point[:, None] - 1e-12, axis=1)
        hit = cum[np.arange(R), pos] >= point - 1e-12
        pos = np.where(hit, pos, last_pos)
        chosen = perm[np.arange(R), pos]
        out[:, kk] = np.where(kk < k, chosen, -1)
    return out


def sample_selection(instance: Instance, policy: PolicyVars, i: int, l: int,
                     rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw the (server, stream) pairs serving one request of video ``i`` at level ``l``."""
    q = policy.q[i, l]
    k = int(instance.k[i])
    if abs(q.sum() - k) > 1e-9:
        raise ValueError(f"access probabilities sum to {q.sum():.12g}, expected {k}")
    servers = systematic_servers(q[None, :], np.array([k]), rng)[0]
    out = []
    for j in servers:
        streams = instance.streams_of(int(j))
        probs = policy.p[l, streams.start:streams.stop]
        nu = int(rng.choice(len(probs), p=probs / probs.sum()))
        out.append((int(j), nu))
    return out


def _draw_streams(instance: Instance, policy: PolicyVars, servers: np.ndarray,
                  levels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flat stream index for every chosen server (same shape as ``servers``)."""
    out = np.full(servers.shape, -1, dtype=int)
    u = rng.random(servers.shape)
    lev = np.broadcast_to(levels[:, None], servers.shape)
    for j in range(instance.m):
        sl = instance.streams_of(j)
        cum = np.cumsum(policy.p[:, sl.start:sl.stop], axis=1)       # (V, d_j)
        cum /= cum[:, -1:]
        mask = servers == j
        if not mask.any():
            continue
        c = cum[lev[mask]]
        idx = np.argmax(c >= u[mask][:, None], axis=1)
        out[mask] = sl.start + idx
    return out


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------


@dataclass
class Replication:
    """Raw outcome of one simulated run (statistics already exclude warmup)."""

    arrival: np.ndarray          # (N,)
    video: np.ndarray            # (N,)
    level: np.ndarray            # (N,)
    streams: np.ndarray          # (N, kmax) flat stream index, -1 padded
    stall: np.ndarray            # (N,)
    counted: np.ndarray          # (N,) bool, False for warmup requests
    job_request: np.ndarray      # (J,)
    job_stream: np.ndarray       # (J,)
    job_wait: np.ndarray         # (J,)
    job_service: np.ndarray      # (J,)
    job_first: np.ndarray        # (J,) download time of chunk 1 at that stream
    job_last: np.ndarray         # (J,) download time of the last chunk at that stream
    job_start: np.ndarray        # (J,)
    horizon: tuple[float, float]
    segment_ok: bool             # per-request download times non-decreasing in u


def simulate_once(instance: Instance, policy: PolicyVars, num_requests: int,
                  rng: np.random.Generator, warmup_fraction: float = 0.1) -> Replication:
    inst, pol = instance, policy
    lam = inst.lam
    total = lam.sum()
    if total <= 0:
        raise ValueError("all arrival rates are zero")
    N = int(num_requests)
    arrival = np.cumsum(rng.exponential(1.0 / total, N))
    video = rng.choice(inst.r, size=N, p=lam / total)
    cumb = np.cumsum(pol.b, axis=1)
    cumb /= cumb[:, -1:]
    level = np.argmax(cumb[video] >= rng.random(N)[:, None], axis=1)

    servers = systematic_servers(pol.q[video, level], inst.k[video], rng)
    streams = _draw_streams(inst, pol, servers, level, rng)

    req_idx, col = np.nonzero(streams >= 0)
    job_stream = streams[req_idx, col]
    J = req_idx.size
    alpha, beta = kernel.stream_params(inst, pol.w)
    a_job = alpha[level[req_idx], job_stream]
    b_job = beta[level[req_idx], job_stream]
    L_job = inst.L[video[req_idx]]

    # per-chunk service times, grouped by segment count
    first = np.zeros(J)
    last = np.zeros(J)
    service = np.zeros(J)
    chunk_groups = {}
    for Lu in np.unique(L_job):
        sel = np.flatnonzero(L_job == Lu)
        Y = b_job[sel, None] + rng.exponential(1.0, (sel.size, Lu)) / a_job[sel, None]
        cumY = np.cumsum(Y, axis=1)
        chunk_groups[int(Lu)] = (sel, cumY)
        service[sel] = cumY[:, -1]

    # FIFO per stream in arrival order (jobs are already in request order)
    order = np.lexsort((req_idx, job_stream))
    start = np.empty(J)
    a_sorted = arrival[req_idx[order]]
    s_sorted = service[order]
    st_sorted = job_stream[order]
    bounds = np.flatnonzero(np.diff(st_sorted)) + 1
    for seg in np.split(np.arange(J), bounds):
        if seg.size == 0:
            continue
        a = a_sorted[seg]
        S = s_sorted[seg]
        before = np.concatenate([[0.0], np.cumsum(S)[:-1]])
        start_seg = before + np.maximum.accumulate(a - before)
        start[order[seg]] = start_seg
    wait = start - arrival[req_idx]

    # per-request segment availability and stall
    stall = np.zeros(N)
    seg_ok = True
    tau, ds = inst.tau, inst.ds
    for Lu, (sel, cumY) in chunk_groups.items():
        done = wait[sel, None] + cumY                          # download time of each chunk
        first[sel] = done[:, 0]
        last[sel] = done[:, -1]
        reqs = req_idx[sel]
        uniq, inv = np.unique(reqs, return_inverse=True)
        D = np.full((uniq.size, Lu), -np.inf)
        np.maximum.at(D, inv, done)
        seg_ok &= bool(np.all(np.diff(D, axis=1) >= 0))
        lateness = D - tau * np.arange(Lu)[None, :]
        stall[uniq] = np.maximum(0.0, lateness.max(axis=1) - ds)

    n_warm = int(np.floor(warmup_fraction * N))
    counted = np.arange(N) >= n_warm
    t0 = arrival[n_warm] if n_warm < N else arrival[-1]
    return Replication(arrival, video, level, streams, stall, counted, req_idx, job_stream,
                       wait, service, first, last, start, (float(t0), float(arrival[-1])),
                       seg_ok)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class SimReport:
    mean_stall: float
    mean_stall_se: float
    per_file_stall: np.ndarray          # (r,) nan where no request counted
    per_file_quality_stall: np.ndarray  # (r, V)
    per_file_quality_se: np.ndarray     # (r, V)
    mean_wait: np.ndarray               # (S,)
    mean_wait_se: np.ndarray            # (S,)
    empirical_utilization: np.ndarray   # (S,)
    quality_frequency: np.ndarray       # (r, V) fraction of each video's requests
    empirical_avg_quality: float
    seed: int
    replications: int
    num_requests: int
    unstable: bool
    min_stall: float
    fifo_ok: bool = True
    segments_ok: bool = True
    replication_means: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def arr(x):
            return np.where(np.isnan(x), None, x).tolist()
        return {
            "seed": self.seed,
            "replications": self.replications,
            "num_requests": self.num_requests,
            "unstable": self.unstable,
            "mean_stall": self.mean_stall,
            "mean_stall_se": self.mean_stall_se,
            "min_stall": self.min_stall,
            "empirical_avg_quality": self.empirical_avg_quality,
            "per_file_stall": arr(self.per_file_stall),
            "mean_wait": arr(self.mean_wait),
            "mean_wait_se": arr(self.mean_wait_se),
            "empirical_utilization": arr(self.empirical_utilization),
            "quality_frequency": arr(self.quality_frequency),
            "fifo_ok": self.fifo_ok,
            "segments_ok": self.segments_ok,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def streams_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["stream", "mean_wait", "mean_wait_se", "utilization"])
        for s in range(self.mean_wait.size):
            wr.writerow([s, repr(float(self.mean_wait[s])), repr(float(self.mean_wait_se[s])),
                         repr(float(self.empirical_utilization[s]))])
        return buf.getvalue()


def _stream_stats(inst: Instance, rep: Replication):
    keep = rep.counted[rep.job_request]
    S = inst.S
    n = np.bincount(rep.job_stream[keep], minlength=S)
    wsum = np.bincount(rep.job_stream[keep], weights=rep.job_wait[keep], minlength=S)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_wait = np.where(n > 0, wsum / np.maximum(n, 1), np.nan)
    span = rep.horizon[1] - rep.horizon[0]
    busy = np.bincount(rep.job_stream[keep], weights=rep.job_service[keep], minlength=S)
    util = busy / span if span > 0 else np.full(S, np.nan)
    return mean_wait, util


def _fifo_ok(rep: Replication) -> bool:
    order = np.lexsort((rep.job_request, rep.job_stream))
    st = rep.job_stream[order]
    start = rep.job_start[order]
    fin = start + rep.job_service[order]
    same = st[1:] == st[:-1]
    return bool(np.all(start[1:][same] >= fin[:-1][same] - 1e-9))


def _run_replication(args):
    inst, pol, n, seedseq, warm = args
    rng = np.random.default_rng(seedseq)
    return simulate_once(inst, pol, n, rng, warm)


def run_replications(instance: Instance, policy: PolicyVars, sim: SimConfig,
                     jobs: int = 1) -> list[Replication]:
    seqs = np.random.SeedSequence(sim.seed).spawn(sim.replications)
    tasks = [(instance, policy, sim.num_requests, s, sim.warmup_fraction) for s in seqs]
    if jobs > 1 and sim.replications > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_replication, tasks))
    return [_run_replication(t) for t in tasks]


def _se(values: np.ndarray, axis=0) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    n = np.sum(~np.isnan(values), axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        # (video, level) cells no replication visited stay NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        sd = np.nanstd(values, axis=axis, ddof=1) if values.shape[axis] > 1 else np.full(
            np.delete(values.shape, axis), np.nan)
        return sd / np.sqrt(n)


def summarize(instance: Instance, policy: PolicyVars, reps: list[Replication],
              sim: SimConfig) -> SimReport:
    """Merge replications; standard errors are taken across replications.

    With a single replication the standard errors fall back to the i.i.d.
    formula over requests, which ignores queueing correlation.
    """
    inst = instance
    r, V = inst.r, inst.V
    rep_means, pf, pfq, waits, utils, qf, aq = [], [], [], [], [], [], []
    all_stalls = []
    fifo = segs = True
    weight_q = inst.L / inst.L.sum()
    for rep in reps:
        c = rep.counted
        st = rep.stall[c]
        all_stalls.append(st)
        rep_means.append(st.mean())
        vid, lev = rep.video[c], rep.level[c]
        cnt = np.bincount(vid, minlength=r)
        ssum = np.bincount(vid, weights=st, minlength=r)
        with np.errstate(invalid="ignore", divide="ignore"):
            pf.append(np.where(cnt > 0, ssum / np.maximum(cnt, 1), np.nan))
            key = vid * V + lev
            cq = np.bincount(key, minlength=r * V).reshape(r, V)
            sq = np.bincount(key, weights=st, minlength=r * V).reshape(r, V)
            pfq.append(np.where(cq > 0, sq / np.maximum(cq, 1), np.nan))
            qf.append(np.where(cnt[:, None] > 0, cq / np.maximum(cnt, 1)[:, None], np.nan))
        aq.append(float(np.mean(weight_q[vid] * inst.sizes[lev])))
        mw, ut = _stream_stats(inst, rep)
        waits.append(mw)
        utils.append(ut)
        fifo &= _fifo_ok(rep)
        segs &= rep.segment_ok
    stalls = np.concatenate(all_stalls)
    if len(reps) > 1:
        se = float(np.std(rep_means, ddof=1) / np.sqrt(len(reps)))
        pfq_se = _se(np.array(pfq))
        wait_se = _se(np.array(waits))
    else:
        se = float(stalls.std(ddof=1) / np.sqrt(stalls.size)) if stalls.size > 1 else np.nan
        pfq_se = np.full((r, V), np.nan)
        wait_se = np.full(inst.S, np.nan)
    ld = kernel.loads(inst, policy)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return SimReport(
            mean_stall=float(np.mean(rep_means)),
            mean_stall_se=se,
            per_file_stall=np.nanmean(np.array(pf), axis=0) if len(pf) > 1 else pf[0],
            per_file_quality_stall=np.nanmean(np.array(pfq), axis=0) if len(pfq) > 1 else pfq[0],
            per_file_quality_se=pfq_se,
            mean_wait=np.nanmean(np.array(waits), axis=0) if len(waits) > 1 else waits[0],
            mean_wait_se=wait_se,
            empirical_utilization=np.mean(np.array(utils), axis=0),
            quality_frequency=np.nanmean(np.array(qf), axis=0) if len(qf) > 1 else qf[0],
            empirical_avg_quality=float(np.mean(aq)),
            seed=sim.seed,
            replications=sim.replications,
            num_requests=sim.num_requests,
            unstable=bool(np.any(ld.rho >= 1.0)),
            min_stall=float(stalls.min()) if stalls.size else 0.0,
            fifo_ok=fifo,
            segments_ok=segs,
            replication_means=[float(x) for x in rep_means],
        )


def run_simulation(instance: Instance, policy: PolicyVars, sim: SimConfig | None = None,
                   jobs: int = 1) -> SimReport:
    sim = sim or SimConfig()
    policy.check_dims(instance)
    reps = run_replications(instance, policy, sim, jobs)
    return summarize(instance, policy, reps, sim)


def trace_csv(instance: Instance, rep: Replication) -> str:
    """Per-request log: id, arrival, video, level, chosen (server:stream) pairs, stall."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["request", "arrival", "video", "level", "selection", "stall", "counted"])
    srv = instance.stream_server
    off = instance.stream_offset
    for n in range(rep.arrival.size):
        sel = [s for s in rep.streams[n] if s >= 0]
        text = ";".join(f"{srv[s] + 1}:{s - off[srv[s]] + 1}" for s in sel)
        wr.writerow([n, repr(float(rep.arrival[n])), int(instance.videos[rep.video[n]].video_id),
                     int(rep.level[n]) + 1, text, repr(float(rep.stall[n])), bool(rep.counted[n])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# bound check
# ---------------------------------------------------------------------------


@dataclass
class BoundCheck:
    empirical_mean_stall: float
    empirical_se: float
    analytic_bound: float
    unstable: bool
    holds: bool | None                    # None when no bound is claimed
    per_file_quality: list[dict]
    report: SimReport

    @property
    def ratio(self) -> float:
        return self.empirical_mean_stall / self.analytic_bound if self.analytic_bound else np.nan

    def to_dict(self) -> dict:
        return {
            "empirical_mean_stall": self.empirical_mean_stall,
            "empirical_se": self.empirical_se,
            "analytic_bound": self.analytic_bound,
            "ratio": self.ratio,
            "unstable": self.unstable,
            "holds": self.holds,
            "per_file_quality": self.per_file_quality,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        cols = ["video", "quality", "empirical", "empirical_se", "bound", "ratio"]
        wr.writerow(cols)
        for row in self.per_file_quality:
            wr.writerow([row[c] for c in cols])
        wr.writerow(["all", "all", repr(self.empirical_mean_stall), repr(self.empirical_se),
                     repr(self.analytic_bound), repr(self.ratio)])
        return buf.getvalue()


def validate_bound(instance: Instance, policy: PolicyVars, sim: SimConfig | None = None,
                   jobs: int = 1, report: SimReport | None = None) -> BoundCheck:
    """Compare simulated stalls against the analytic bound.

    The bound holds when it is at least the empirical mean minus three
    standard errors.  Unstable policies are simulated but no bound is claimed.
    An existing ``report`` for the same policy is reused instead of simulating again.
    """
    sim = sim or SimConfig()
    rep = report if report is not None else run_simulation(instance, policy, sim, jobs)
    ev = kernel.evaluate(instance, policy, 0.0)
    if rep.unstable or not ev.feasible:
        return BoundCheck(rep.mean_stall, rep.mean_stall_se, float("nan"), True, None, [], rep)
    weighted = float(np.sum(ev.weights[:, None] * policy.b * ev.bound))
    se = rep.mean_stall_se if np.isfinite(rep.mean_stall_se) else 0.0
    holds = bool(weighted >= rep.mean_stall - 3 * se)
    rows = []
    for i in range(instance.r):
        for l in range(instance.V):
            emp = rep.per_file_quality_stall[i, l]
            if np.isnan(emp):
                continue
            bnd = float(ev.bound[i, l])
            rows.append({"video": instance.videos[i].video_id, "quality": l + 1,
                         "empirical": float(emp), "empirical_se": float(rep.per_file_quality_se[i, l]),
                         "bound": bnd, "ratio": float(emp / bnd) if bnd else float("nan")})
    return BoundCheck(rep.mean_stall, rep.mean_stall_se, weighted, False, holds, rows, rep)
