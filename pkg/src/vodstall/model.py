"""Cluster, catalog and policy types, config ingestion and policy validation.

Streams are flattened: server ``j`` owns the contiguous stream slots
``stream_offset[j]:stream_offset[j + 1]``.  Dense policy layout:

    q  (r, V, m)   access probability of server j for video i at quality l
    p  (V, S)      stream probability inside its server, per quality
    b  (r, V)      quality probability
    w  (S,)        bandwidth share of each stream
    t  (r,)        auxiliary exponent of each video
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

SUM_TOL = 1e-9


class ConfigError(ValueError):
    """Malformed or invalid configuration document."""


class DimensionError(ValueError):
    """Policy arrays do not match the instance they are checked against."""


class InfeasibleError(ValueError):
    """A policy violates the constraints required by an operation."""

    def __init__(self, message: str, violations: Sequence["Violation"] = ()):
        super().__init__(message)
        self.violations = list(violations)


class OverloadError(InfeasibleError):
    """No admissible exponent exists because some stream is unstable."""


# ---------------------------------------------------------------------------
# static parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ServerSpec:
    server_id: int
    alpha_base: float
    beta_base: float
    num_streams: int

    def __post_init__(self):
        if not self.alpha_base > 0:
            raise ConfigError(f"alpha_base must be > 0 for server {self.server_id}")
        if not self.beta_base >= 0:
            raise ConfigError(f"beta_base must be >= 0 for server {self.server_id}")
        if int(self.num_streams) != self.num_streams or self.num_streams < 1:
            raise ConfigError(f"num_streams must be an integer >= 1 for server {self.server_id}")


@dataclass(frozen=True)
class QualityLadder:
    sizes: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(float(a) for a in self.sizes))
        if len(self.sizes) < 1:
            raise ConfigError("quality ladder needs at least one level")
        if self.sizes[0] <= 0:
            raise ConfigError("quality sizes must be positive")
        for lo, hi in zip(self.sizes, self.sizes[1:]):
            if not hi > lo:
                raise ConfigError("quality sizes must be strictly increasing")

    @property
    def num_levels(self) -> int:
        return len(self.sizes)


@dataclass(frozen=True)
class VideoSpec:
    video_id: int
    arrival_rate: float
    num_segments: int
    n: int
    k: int
    placement: tuple[tuple[int, ...], ...]
    """One tuple of server ids per quality level."""

    def __post_init__(self):
        object.__setattr__(
            self, "placement", tuple(tuple(int(s) for s in ids) for ids in self.placement)
        )
        vid = self.video_id
        if not self.arrival_rate >= 0:
            raise ConfigError(f"arrival rate must be >= 0 for video {vid}")
        if int(self.num_segments) != self.num_segments or self.num_segments < 1:
            raise ConfigError(f"segments must be an integer >= 1 for video {vid}")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"need 1 <= k <= n for video {vid}")
        for level, ids in enumerate(self.placement):
            if len(ids) != self.n:
                raise ConfigError(
                    f"placement size != n for video {vid} at quality {level + 1}"
                )
            if len(set(ids)) != len(ids):
                raise ConfigError(f"placement servers repeat for video {vid}")


@dataclass(frozen=True)
class StreamingParams:
    segment_seconds: float
    startup_delay: float

    def __post_init__(self):
        if not self.segment_seconds > 0:
            raise ConfigError("tau (segment seconds) must be > 0")
        if not self.startup_delay >= 0:
            raise ConfigError("startup_delay must be >= 0")


@dataclass(frozen=True)
class Regularization:
    q: float = 1.0
    p: float = 1.0
    t: float = 1.0
    b: float = 1.0
    w: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"regularization {f.name} must be > 0")


@dataclass(frozen=True)
class InnerPGD:
    # None means 1/tau_block, which solves the proximal surrogate in one step
    step: float | None = None
    max_steps: int = 50
    tol: float = 1e-12

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ConfigError("inner_pgd.step must be > 0")
        if self.max_steps < 1 or not self.tol > 0:
            raise ConfigError("inner_pgd.max_steps and inner_pgd.tol must be positive")


@dataclass(frozen=True)
class SolverConfig:
    theta: float = 1e-7
    step_gamma: float = 0.9
    reg: Regularization = field(default_factory=Regularization)
    epsilon: float = 1e-6
    max_outer_iters: int = 5000
    inner_pgd: InnerPGD = field(default_factory=InnerPGD)
    slack_delta: float = 1e-6
    max_backtracks: int = 40
    fd_gradients: bool = False
    fd_step: float = 1e-6
    grad_tol: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ConfigError("theta must lie in [0, 1]")
        if not 0 < self.step_gamma <= 1:
            raise ConfigError("step_gamma must lie in (0, 1]")
        for name in ("epsilon", "slack_delta", "fd_step", "grad_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.max_outer_iters < 1 or self.max_backtracks < 0:
            raise ConfigError("iteration limits must be positive")

    def replace(self, **changes) -> "SolverConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return SolverConfig(**data)

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta": self.theta,
            "step_gamma": self.step_gamma,
            "reg": {f.name: getattr(self.reg, f.name) for f in fields(self.reg)},
            "epsilon": self.epsilon,
            "max_outer_iters": self.max_outer_iters,
            "inner_pgd": {
                "step": self.inner_pgd.step,
                "max_steps": self.inner_pgd.max_steps,
                "tol": self.inner_pgd.tol,
            },
            "slack_delta": self.slack_delta,
            "max_backtracks": self.max_backtracks,
            "fd_gradients": self.fd_gradients,
            "fd_step": self.fd_step,
            "grad_tol": self.grad_tol,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SolverConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown solver fields: {sorted(unknown)}")
        if "reg" in data:
            data["reg"] = Regularization(**data["reg"])
        if "inner_pgd" in data:
            data["inner_pgd"] = InnerPGD(**data["inner_pgd"])
        return cls(**data)


# ---------------------------------------------------------------------------
# instance
# ---------------------------------------------------------------------------


class Instance:
    """Immutable bundle of servers, ladder, catalog and streaming parameters.

    Precomputes the flat arrays used by the analytics and the simulator.
    """

    def __init__(
        self,
        servers: Sequence[ServerSpec],
        ladder: QualityLadder,
        videos: Sequence[VideoSpec],
        streaming: StreamingParams,
    ):
        self.servers = tuple(servers)
        self.ladder = ladder
        self.videos = tuple(videos)
        self.streaming = streaming
        if not self.servers:
            raise ConfigError("at least one server is required")
        if not self.videos:
            raise ConfigError("at least one video is required")

        ids = [s.server_id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ConfigError("server ids must be unique")
        vids = [v.video_id for v in self.videos]
        if len(set(vids)) != len(vids):
            raise ConfigError("video ids must be unique")
        pos = {sid: j for j, sid in enumerate(ids)}

        m, V, r = len(self.servers), ladder.num_levels, len(self.videos)
        self.m, self.V, self.r = m, V, r
        self.alpha_base = np.array([s.alpha_base for s in self.servers], dtype=float)
        self.beta_base = np.array([s.beta_base for s in self.servers], dtype=float)
        self.num_streams = np.array([s.num_streams for s in self.servers], dtype=int)
        self.stream_offset = np.concatenate([[0], np.cumsum(self.num_streams)])
        self.S = int(self.stream_offset[-1])
        self.stream_server = np.repeat(np.arange(m), self.num_streams)
        self.sizes = np.array(ladder.sizes)
        self.lam = np.array([v.arrival_rate for v in self.videos], dtype=float)
        self.L = np.array([v.num_segments for v in self.videos], dtype=int)
        self.n = np.array([v.n for v in self.videos], dtype=int)
        self.k = np.array([v.k for v in self.videos], dtype=int)
        self.tau = float(streaming.segment_seconds)
        self.ds = float(streaming.startup_delay)

        placed = np.zeros((r, V, m), dtype=bool)
        for i, v in enumerate(self.videos):
            if v.n > m:
                raise ConfigError(f"n exceeds server count for video {v.video_id}")
            if len(v.placement) != V:
                raise ConfigError(
                    f"placement_per_quality must list {V} sets for video {v.video_id}"
                )
            for level, sids in enumerate(v.placement):
                for sid in sids:
                    if sid not in pos:
                        raise ConfigError(
                            f"unknown server id {sid} in placement of video {v.video_id}"
                        )
                    placed[i, level, pos[sid]] = True
        self.placed = placed
        for arr in (self.alpha_base, self.beta_base, self.num_streams, self.stream_offset,
                    self.stream_server, self.sizes, self.lam, self.L, self.n, self.k,
                    self.placed):
            arr.setflags(write=False)

    @property
    def total_rate(self) -> float:
        return float(self.lam.sum())

    def streams_of(self, j: int) -> range:
        return range(int(self.stream_offset[j]), int(self.stream_offset[j + 1]))

    def stream_index(self, j: int, nu: int) -> int:
        if not 0 <= nu < self.num_streams[j]:
            raise IndexError(f"server {j} has no stream {nu}")
        return int(self.stream_offset[j]) + nu

    def with_streaming(self, **changes) -> "Instance":
        params = {"segment_seconds": self.streaming.segment_seconds,
                  "startup_delay": self.streaming.startup_delay}
        params.update(changes)
        return Instance(self.servers, self.ladder, self.videos, StreamingParams(**params))

    def with_rates(self, lam: Sequence[float]) -> "Instance":
        videos = [
            VideoSpec(v.video_id, float(x), v.num_segments, v.n, v.k, v.placement)
            for v, x in zip(self.videos, lam)
        ]
        return Instance(self.servers, self.ladder, videos, self.streaming)

    def scaled_rates(self, factor: float) -> "Instance":
        return self.with_rates(self.lam * factor)


# ---------------------------------------------------------------------------
# decision variables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyVars:
    q: np.ndarray
    p: np.ndarray
    b: np.ndarray
    w: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        for name in ("q", "p", "b", "w", "t"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def replace(self, **blocks) -> "PolicyVars":
        data = {"q": self.q, "p": self.p, "b": self.b, "w": self.w, "t": self.t}
        data.update(blocks)
        return PolicyVars(**data)

    def pi(self, inst: Instance) -> np.ndarray:
        """Joint probability of using stream s for video i at quality l, shape (r, V, S)."""
        return self.q[:, :, inst.stream_server] * self.p[None, :, :]

    def check_dims(self, inst: Instance) -> None:
        want = {
            "q": (inst.r, inst.V, inst.m),
            "p": (inst.V, inst.S),
            "b": (inst.r, inst.V),
            "w": (inst.S,),
            "t": (inst.r,),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"policy block {name} has shape {got}, expected {shape}")

    def allclose(self, other: "PolicyVars", atol: float = 0.0) -> bool:
        return all(
            np.allclose(getattr(self, n), getattr(other, n), rtol=0, atol=atol)
            for n in ("q", "p", "b", "w", "t")
        )


def uniform_policy(inst: Instance, t0: float = 0.01) -> PolicyVars:
    """Equal access k/n on placed servers, equal streams, qualities and bandwidth."""
    q = inst.placed * (inst.k / inst.n)[:, None, None]
    per_stream = 1.0 / inst.num_streams[inst.stream_server]
    p = np.tile(per_stream, (inst.V, 1))
    b = np.full((inst.r, inst.V), 1.0 / inst.V)
    return PolicyVars(q=q, p=p, b=b, w=per_stream.copy(), t=np.full(inst.r, t0))


@dataclass(frozen=True)
class StreamLoad:
    Lambda: np.ndarray
    rho: np.ndarray


# ---------------------------------------------------------------------------
# policy validation
# ---------------------------------------------------------------------------

EXACT_TOL = 1e-9


@dataclass(frozen=True)
class Violation:
    """One violated constraint; ``index`` locates it in the policy arrays."""

    constraint: str
    index: tuple[int, ...]
    detail: str

    def __str__(self) -> str:
        return f"{self.constraint} at {self.index}: {self.detail}"


@dataclass(frozen=True)
class PolicyCheck:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def constraints(self) -> list[str]:
        return sorted({v.constraint for v in self.violations})

    def summary(self, limit: int = 10) -> str:
        if self.ok:
            return "OK"
        lines = [str(v) for v in self.violations[:limit]]
        if len(self.violations) > limit:
            lines.append(f"... {len(self.violations) - limit} more")
        return "\n".join(lines)


def _collect(out: list, name: str, mask: np.ndarray, detail) -> None:
    for idx in zip(*np.nonzero(mask)):
        idx = tuple(int(v) for v in idx)
        out.append(Violation(name, idx, detail(idx)))


def validate_policy(policy: PolicyVars, instance: Instance,
                    slack_delta: float = 1e-6) -> PolicyCheck:
    """Check every constraint of the joint problem.

    Simplex, box and support constraints are checked to ``EXACT_TOL``.  The
    strict ones (stability and the three exponent conditions) must hold with
    margin ``slack_delta``.  Exponent conditions are enforced on the
    (video, level, stream) triples that carry probability, since only those
    enter the bound.  Raises :class:`DimensionError` on shape mismatch.
    """
    from . import kernel

    inst, pol, d = instance, policy, slack_delta
    pol.check_dims(inst)
    tol = EXACT_TOL
    out: list[Violation] = []
    q, p, b, w, t = pol.q, pol.p, pol.b, pol.w, pol.t

    _collect(out, "access_box", (q < -tol) | (q > 1 + tol),
             lambda ix: f"q = {q[ix]:.6g} outside [0, 1]")
    _collect(out, "access_support", (~inst.placed) & (q != 0),
             lambda ix: f"q = {q[ix]:.6g} on a server without the chunk")
    qsum = q.sum(axis=2)
    _collect(out, "access_sum", np.abs(qsum - inst.k[:, None]) > tol * inst.k[:, None],
             lambda ix: f"sum of q = {qsum[ix]:.12g}, expected {inst.k[ix[0]]}")
    _collect(out, "stream_simplex", p < -tol, lambda ix: f"p = {p[ix]:.6g} negative")
    psum = np.add.reduceat(p, inst.stream_offset[:-1], axis=1)
    _collect(out, "stream_simplex", np.abs(psum - 1) > tol,
             lambda ix: f"sum of p over streams of server {ix[1]} = {psum[ix]:.12g}")
    _collect(out, "quality_simplex", b < -tol, lambda ix: f"b = {b[ix]:.6g} negative")
    bsum = b.sum(axis=1)
    _collect(out, "quality_simplex", np.abs(bsum - 1) > tol,
             lambda ix: f"sum of b = {bsum[ix]:.12g}, expected 1")
    _collect(out, "bandwidth_box", (w < -tol) | (w > 1 + tol),
             lambda ix: f"w = {w[ix]:.6g} outside [0, 1]")
    wsum = np.add.reduceat(w, inst.stream_offset[:-1])
    _collect(out, "bandwidth_budget", wsum > 1 + tol,
             lambda ix: f"server bandwidth sum {wsum[ix]:.12g} exceeds 1")
    _collect(out, "aux_positive", ~(t >= d), lambda ix: f"t = {t[ix]:.6g} below {d:g}")

    ld = kernel.loads(inst, pol)
    loaded = ld.Lambda > 0
    _collect(out, "stream_utilization", loaded & ~(ld.rho <= 1 - d),
             lambda ix: f"rho = {ld.rho[ix]:.6g} not below 1 - {d:g}")

    active = ld.pi > 0
    used = active.any(axis=1)
    level_loaded = ld.R.sum(axis=0) > 0
    relevant = active | (used[:, None, :] & level_loaded[None])
    tt = t[:, None, None]
    with np.errstate(invalid="ignore", over="ignore"):
        below = tt <= (1 - d) * ld.alpha[None]
        C = ld.alpha[None] * np.expm1((ld.beta[None] - inst.tau) * tt) + tt
    _collect(out, "aux_below_rate", relevant & ~below,
             lambda ix: f"t = {t[ix[0]]:.6g} not below chunk rate {ld.alpha[ix[1:]]:.6g}")
    _collect(out, "aux_geometric", active & ~(C <= -d * tt),
             lambda ix: f"segment ratio condition {C[ix]:.6g} not below {-d * t[ix[0]]:.3g}")
    tpos = np.where(t > 0, t, d)
    _, _, _, _, E = kernel.exponent_terms(ld, tpos)
    with np.errstate(invalid="ignore"):
        wait_bad = used & ~(E >= d * tpos[:, None])
    _collect(out, "aux_waiting_mgf", wait_bad,
             lambda ix: f"waiting transform denominator {E[ix]:.6g} not above {d * t[ix[0]]:.3g}")
    return PolicyCheck(tuple(out))


def require_valid(policy: PolicyVars, instance: Instance, slack_delta: float = 1e-6) -> None:
    """Raise :class:`InfeasibleError` (or :class:`OverloadError`) on any violation."""
    check = validate_policy(policy, instance, slack_delta)
    if check.ok:
        return
    cls = OverloadError if "stream_utilization" in check.constraints() else InfeasibleError
    raise cls("policy violates " + ", ".join(check.constraints()) + "\n" + check.summary(),
              check.violations)


# ---------------------------------------------------------------------------
# JSON io
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"missing key '{key}' in {where}")
    return obj[key]


def parse_config(doc: dict[str, Any]):
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    servers = []
    for idx, s in enumerate(_require(doc, "servers", "config")):
        servers.append(
            ServerSpec(
                server_id=int(_require(s, "id", f"server #{idx}")),
                alpha_base=float(_require(s, "alpha_base", f"server #{idx}")),
                beta_base=float(_require(s, "beta_base", f"server #{idx}")),
                num_streams=int(_require(s, "num_streams", f"server #{idx}")),
            )
        )
    ladder = QualityLadder(tuple(_require(doc, "qualities", "config")))
    videos = []
    for idx, v in enumerate(_require(doc, "videos", "config")):
        where = f"video #{idx}"
        if "placement_per_quality" in v:
            placement = tuple(tuple(ids) for ids in v["placement_per_quality"])
        else:
            placement = (tuple(_require(v, "placement", where)),) * ladder.num_levels
        videos.append(
            VideoSpec(
                video_id=int(_require(v, "id", where)),
                arrival_rate=float(_require(v, "lambda", where)),
                num_segments=int(_require(v, "segments", where)),
                n=int(_require(v, "n", where)),
                k=int(_require(v, "k", where)),
                placement=placement,
            )
        )
    st = _require(doc, "streaming", "config")
    streaming = StreamingParams(
        segment_seconds=float(_require(st, "tau", "streaming")),
        startup_delay=float(_require(st, "startup_delay", "streaming")),
    )
    solver = SolverConfig.from_dict(doc.get("solver", {}))
    # cross-object checks live in Instance
    Instance(servers, ladder, videos, streaming)
    return servers, ladder, videos, streaming, solver


def load_config(path: str | Path):
    """Read a JSON config; returns (servers, ladder, videos, streaming, solver)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(doc)


def load_instance(path: str | Path) -> tuple[Instance, SolverConfig]:
    servers, ladder, videos, streaming, solver = load_config(path)
    return Instance(servers, ladder, videos, streaming), solver


def config_to_dict(inst: Instance, solver: SolverConfig | None = None) -> dict[str, Any]:
    videos = []
    for v in inst.videos:
        entry: dict[str, Any] = {
            "id": v.video_id,
            "lambda": v.arrival_rate,
            "segments": v.num_segments,
            "n": v.n,
            "k": v.k,
        }
        if all(ids == v.placement[0] for ids in v.placement):
            entry["placement"] = list(v.placement[0])
        else:
            entry["placement_per_quality"] = [list(ids) for ids in v.placement]
        videos.append(entry)
    doc = {
        "servers": [
            {"id": s.server_id, "alpha_base": s.alpha_base, "beta_base": s.beta_base,
             "num_streams": s.num_streams}
            for s in inst.servers
        ],
        "qualities": list(inst.ladder.sizes),
        "videos": videos,
        "streaming": {"tau": inst.streaming.segment_seconds,
                      "startup_delay": inst.streaming.startup_delay},
    }
    if solver is not None:
        doc["solver"] = solver.to_dict()
    return doc


def dumps_config(inst: Instance, solver: SolverConfig | None = None) -> str:
    return json.dumps(config_to_dict(inst, solver), indent=2, sort_keys=True) + "\n"


def policy_to_dict(inst: Instance, pol: PolicyVars) -> dict[str, Any]:
    pol.check_dims(inst)

    def per_server(row):
        return [row[inst.stream_offset[j]:inst.stream_offset[j + 1]].tolist()
                for j in range(inst.m)]

    return {
        "q": pol.q.tolist(),
        "p": [per_server(pol.p[l]) for l in range(inst.V)],
        "b": pol.b.tolist(),
        "w": per_server(pol.w),
        "t": pol.t.tolist(),
    }


def policy_from_dict(inst: Instance, doc: dict[str, Any]) -> PolicyVars:
    try:
        p = np.array([np.concatenate([np.asarray(x, dtype=float) for x in row])
                      for row in doc["p"]])
        w = np.concatenate([np.asarray(x, dtype=float) for x in doc["w"]])
        pol = PolicyVars(q=np.asarray(doc["q"], dtype=float), p=p,
                         b=np.asarray(doc["b"], dtype=float), w=w,
                         t=np.asarray(doc["t"], dtype=float))
    except (KeyError, ValueError, TypeError) as exc:
        raise DimensionError(f"malformed policy document: {exc}") from exc
    pol.check_dims(inst)
    return pol


def save_policy(path: str | Path, inst: Instance, pol: PolicyVars) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(inst, pol), indent=2) + "\n")


def load_policy(path: str | Path, inst: Instance) -> PolicyVars:
    return policy_from_dict(inst, json.loads(Path(path).read_text()))
