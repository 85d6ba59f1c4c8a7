"""Comparison strategies: fixed initializations with a subset of blocks optimized."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

from . import kernel
from .analytics import BoundReport, bound_report
from .model import Instance, PolicyVars, SolverConfig, uniform_policy
from .optimizer import BlockId, OptimizeResult, alternating_optimize, feasibility_repair

Q, P, T, B, W = (BlockId.Q_ACCESS, BlockId.P_STREAM, BlockId.T_AUX,
                 BlockId.B_QUALITY, BlockId.W_BANDWIDTH)


class BaselineKind(enum.Enum):
    PEA_QTB = "pea-qtb"   # equal server access, everything else optimized
    PEB_QTA = "peb-qta"   # equal bandwidth split
    PEQ_BTA = "peq-bta"   # equal quality probabilities
    PSP_QTB = "psp-qtb"   # server access proportional to service rate
    PLQ_BTA = "plq-bta"   # lowest quality for every video
    PHQ_BTA = "phq-bta"   # highest quality for every video

    @property
    def label(self) -> str:
        return self.name.replace("_", "-")

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        key = text.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key or kind.value.split("-")[0] == key:
                return kind
        raise ValueError(f"unknown baseline {text!r}; choose from {[k.value for k in cls]}")


FREE_BLOCKS: dict[BaselineKind, tuple[BlockId, ...]] = {
    BaselineKind.PEA_QTB: (P, T, B, W),
    BaselineKind.PEB_QTA: (Q, P, T, B),
    BaselineKind.PEQ_BTA: (Q, P, T, W),
    BaselineKind.PSP_QTB: (P, T, B, W),
    BaselineKind.PLQ_BTA: (Q, P, T, W),
    BaselineKind.PHQ_BTA: (Q, P, T, W),
}


def service_rate_at_full_bandwidth(instance: Instance) -> np.ndarray:
    """(V, m) mean chunk service rate 1 / (beta + 1 / alpha) with the whole server bandwidth."""
    a = instance.sizes[:, None]
    alpha = instance.alpha_base[None, :] / a
    beta = instance.beta_base[None, :] * a
    return 1.0 / (beta + 1.0 / alpha)


def baseline_init(instance: Instance, kind: BaselineKind, t0: float = 0.01,
                  slack_delta: float = 1e-6) -> PolicyVars:
    """Raw strategy initialization followed by the closest-feasible repair."""
    inst = instance
    pol = uniform_policy(inst, t0)
    if kind is BaselineKind.PSP_QTB:
        mu = service_rate_at_full_bandwidth(inst)                        # (V, m)
        weight = np.where(inst.placed, mu[None], 0.0)
        q = inst.k[:, None, None] * weight / weight.sum(axis=2, keepdims=True)
        pol = pol.replace(q=q)
    elif kind is BaselineKind.PLQ_BTA:
        b = np.zeros((inst.r, inst.V))
        b[:, 0] = 1.0
        pol = pol.replace(b=b)
    elif kind is BaselineKind.PHQ_BTA:
        b = np.zeros((inst.r, inst.V))
        b[:, -1] = 1.0
        pol = pol.replace(b=b)
    # PEA, PEB and PEQ start from the uniform policy itself
    return feasibility_repair(inst, pol, slack_delta)


@dataclass
class BaselineRun:
    kind: BaselineKind
    init: PolicyVars
    result: OptimizeResult
    report: BoundReport

    @property
    def policy(self) -> PolicyVars:
        return self.result.policy


def run_baseline(instance: Instance, kind: BaselineKind, theta: float,
                 cfg: SolverConfig | None = None) -> BaselineRun:
    cfg = cfg or SolverConfig()
    init = baseline_init(instance, kind, slack_delta=cfg.slack_delta)
    res = alternating_optimize(instance, theta, init, cfg, blocks=FREE_BLOCKS[kind])
    return BaselineRun(kind, init, res, bound_report(instance, res.policy, theta))


def comparison_rows(runs: list[BaselineRun]) -> list[dict]:
    rows = []
    for run in runs:
        rep = run.report
        rows.append({
            "baseline": run.kind.label,
            "mean_stall_bound": rep.weighted_mean_stall,
            "average_quality": rep.average_quality,
            "objective": rep.objective,
            "iterations": run.result.iterations,
            "converged": run.result.converged,
        })
    return rows


def comparison_csv(runs: list[BaselineRun]) -> str:
    """One row per baseline and metric."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["baseline", "metric", "value"])
    for row in comparison_rows(runs):
        for metric in ("mean_stall_bound", "average_quality", "objective"):
            wr.writerow([row["baseline"], metric, repr(float(row[metric]))])
    return buf.getvalue()


def objective_of(instance: Instance, policy: PolicyVars, theta: float) -> float:
    return kernel.evaluate(instance, policy, theta).objective
