from __future__ import annotations

import numpy as np
import pytest

from helpers import small_instance
from vodstall import kernel
from vodstall.baselines import (
    FREE_BLOCKS,
    BaselineKind,
    baseline_init,
    comparison_csv,
    objective_of,
    run_baseline,
    service_rate_at_full_bandwidth,
)
from vodstall.model import Regularization, SolverConfig, validate_policy
from vodstall.optimizer import BlockId, alternating_optimize

FAST = SolverConfig(max_outer_iters=400, reg=Regularization(q=0.01, p=0.01, t=0.01, b=0.01, w=0.01))


class TestKinds:
    def test_labels_and_parse(self):
        assert BaselineKind.PLQ_BTA.label == "PLQ-BTA"
        assert BaselineKind.parse("plq") is BaselineKind.PLQ_BTA
        assert BaselineKind.parse("PSP_QTB") is BaselineKind.PSP_QTB
        with pytest.raises(ValueError):
            BaselineKind.parse("xyz")

    def test_fixed_blocks(self):
        assert BlockId.Q_ACCESS not in FREE_BLOCKS[BaselineKind.PEA_QTB]
        assert BlockId.W_BANDWIDTH not in FREE_BLOCKS[BaselineKind.PEB_QTA]
        for kind in (BaselineKind.PEQ_BTA, BaselineKind.PLQ_BTA, BaselineKind.PHQ_BTA):
            assert BlockId.B_QUALITY not in FREE_BLOCKS[kind]
        assert all(BlockId.T_AUX in blocks for blocks in FREE_BLOCKS.values())


class TestInit:
    @pytest.mark.parametrize("kind", list(BaselineKind), ids=lambda k: k.label)
    def test_inits_are_valid(self, kind):
        inst = small_instance(seed=3, k=2, n=3)
        pol = baseline_init(inst, kind)
        assert validate_policy(pol, inst).ok

    def test_quality_extremes(self):
        inst = small_instance(seed=3)
        low = baseline_init(inst, BaselineKind.PLQ_BTA)
        high = baseline_init(inst, BaselineKind.PHQ_BTA)
        assert np.all(low.b[:, 0] == 1.0) and np.all(high.b[:, -1] == 1.0)

    def test_proportional_access(self):
        inst = small_instance(seed=4, k=2, n=3, alphas=(10.0, 20.0, 40.0))
        pol = baseline_init(inst, BaselineKind.PSP_QTB)
        mu = service_rate_at_full_bandwidth(inst)
        for i in range(inst.r):
            row = pol.q[i, 0]
            placed = inst.placed[i, 0]
            assert row.sum() == pytest.approx(inst.k[i])
            # faster servers get at least as much access, capped at one
            order = np.argsort(mu[0, placed])
            assert np.all(np.diff(row[placed][order]) >= -1e-12)

    def test_service_rate_formula(self):
        inst = small_instance(alphas=(12.0, 18.0, 15.0), sizes=(1.0, 2.0), beta=0.01)
        mu = service_rate_at_full_bandwidth(inst)
        assert mu[1, 0] == pytest.approx(1.0 / (0.02 + 2.0 / 12.0))


class TestRuns:
    def test_fixed_blocks_stay_fixed(self):
        inst = small_instance(seed=5)
        run = run_baseline(inst, BaselineKind.PEB_QTA, 1e-3, FAST)
        assert np.array_equal(run.policy.w, run.init.w)
        run = run_baseline(inst, BaselineKind.PLQ_BTA, 1e-3, FAST)
        assert np.array_equal(run.policy.b, run.init.b)

    def test_full_optimizer_not_worse_from_same_start(self):
        inst = small_instance(seed=6)
        for kind in (BaselineKind.PEA_QTB, BaselineKind.PLQ_BTA):
            run = run_baseline(inst, kind, 1e-3, FAST)
            full = alternating_optimize(inst, 1e-3, run.init, FAST)
            assert full.objective <= run.report.objective + 1e-9

    def test_quality_ordering_small(self):
        inst = small_instance(seed=7)
        lo = run_baseline(inst, BaselineKind.PLQ_BTA, 1e-3, FAST).report
        hi = run_baseline(inst, BaselineKind.PHQ_BTA, 1e-3, FAST).report
        assert lo.average_quality < hi.average_quality
        assert lo.weighted_mean_stall < hi.weighted_mean_stall

    def test_comparison_csv(self):
        inst = small_instance(seed=8)
        runs = [run_baseline(inst, k, 1e-3, FAST) for k in (BaselineKind.PEA_QTB, BaselineKind.PHQ_BTA)]
        lines = comparison_csv(runs).splitlines()
        assert lines[0] == "baseline,metric,value"
        assert len(lines) == 1 + 2 * 3
        assert objective_of(inst, runs[0].policy, 1e-3) == pytest.approx(runs[0].report.objective)
        assert kernel.evaluate(inst, runs[1].policy, 1e-3).feasible
