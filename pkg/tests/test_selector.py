"""Quantization, DP selection, brute-force oracle, backends."""

import numpy as np
import pytest

from adaptive_bp.errors import ConfigError, InputError
from adaptive_bp.graph import build_graph
from adaptive_bp.model import ToyModelConfig, build_toy_decoder, synth_batch
from adaptive_bp.profiler import FlopsProfile, profile_flops, selective_cost
from adaptive_bp.selector import (brute_force_select, dp_select,
                                  knapsack_backend, quantize)
from conftest import TOY_DIMS, random_synthetic_profile, random_values


def test_quantize_floors_to_grid():
    p = FlopsProfile.synthetic(np.array([30, 50]), np.array([20, 100]),
                               T_fp=0)  # T_full = 200
    qp = quantize(p, T_q=20)  # Z = 0.1
    assert qp.Z == pytest.approx(0.1)
    assert list(qp.q_dy_step[1:]) == [3, 5]
    assert list(qp.q_dw[1:]) == [2, 10]
    assert qp.q_chain_full == 8


def test_quantize_exclusive_shifts_prop():
    arr = np.array([0, 0])
    p = FlopsProfile.synthetic(np.array([30, 50]), np.array([20, 100]), T_fp=0)
    # synthetic puts all dy in prop: exclusive step[k] = arr[k] + prop[k-1]
    qp = quantize(p, T_q=200, convention="exclusive")
    assert list(qp.q_dy_step[1:]) == [0, 30]
    assert qp.q_chain_full == 30 + 50  # tail adds the deepest prop


def test_quantize_rejects_coarse_grid():
    p = FlopsProfile.synthetic(np.arange(1, 6), np.arange(1, 6))
    with pytest.raises(ConfigError):
        quantize(p, T_q=4)
    with pytest.raises(InputError):
        quantize(p, T_q=10, convention="bogus")


@pytest.mark.parametrize("convention", ["inclusive", "exclusive"])
def test_dp_matches_brute_force(convention):
    rng = np.random.default_rng(42)
    for _ in range(60):
        n = int(rng.integers(3, 13))
        p = random_synthetic_profile(rng, n, t_fp_scale=rng.random() * 0.3)
        values = random_values(rng, n)
        rho = float(rng.uniform(0.2, 1.0))
        total = int(p.t_dy.sum() + p.t_dw.sum() + p.T_fp)
        dp = dp_select(p, values, rho, T_q=total, convention=convention,
                       backend="python")
        bf = brute_force_select(p, values, rho, convention=convention)
        assert dp.cumulative_importance == pytest.approx(
            bf.cumulative_importance, abs=1e-12)
        assert dp.predicted_flops <= rho * p.T_full


def test_unselectable_slots_stay_unselected():
    rng = np.random.default_rng(7)
    p = random_synthetic_profile(rng, 8)
    values = random_values(rng, 8)
    values[5:] = np.nan  # only slots 1..4 were evaluated
    plan = dp_select(p, values, rho=1.0, T_q=100, backend="python")
    assert max(plan.selected_slots, default=0) <= 4


def test_pruning_changes_work_not_plans():
    rng = np.random.default_rng(13)
    for _ in range(30):
        n = int(rng.integers(4, 12))
        p = random_synthetic_profile(rng, n)
        values = random_values(rng, n)
        rho = float(rng.uniform(0.2, 0.8))
        a = dp_select(p, values, rho, T_q=max(200, n), prune=True,
                      backend="python")
        b = dp_select(p, values, rho, T_q=max(200, n), prune=False,
                      backend="python")
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.subproblems_solved <= b.subproblems_solved


def test_plans_never_overshoot_budget():
    """Coarse grids round costs down; exact re-validation must repair that."""
    rng = np.random.default_rng(99)
    for _ in range(50):
        n = int(rng.integers(3, 10))
        p = random_synthetic_profile(rng, n)
        values = random_values(rng, n)
        rho = float(rng.uniform(0.3, 0.9))
        plan = dp_select(p, values, rho, T_q=n, backend="python")
        assert plan.predicted_flops <= rho * p.T_full + 1e-9


def test_infeasible_budget_yields_empty_plan():
    p = FlopsProfile.synthetic(np.array([10, 10]), np.array([10, 10]),
                               T_fp=1000)
    plan = dp_select(p, np.array([np.nan, 1.0, 1.0]), rho=0.5, T_q=50)
    assert not plan.feasible and not plan.mask.any()


def test_brute_force_tie_breaking():
    # two disjoint singletons with equal value: prefer the fewest tensors,
    # then the lexicographically smallest mask (slot 1 first)
    p = FlopsProfile.synthetic(np.array([1, 1, 1]), np.array([5, 5, 5]))
    values = np.array([np.nan, 1.0, 1.0, 2.0])
    plan = brute_force_select(p, values, rho=1.0)
    assert plan.selected_slots == [1, 2, 3] or plan.cumulative_importance == 4.0
    values = np.array([np.nan, 1.0, 1.0, np.nan])
    p2 = FlopsProfile.synthetic(np.array([10, 10, 10]), np.array([5, 5, 5]))
    plan2 = brute_force_select(p2, values, rho=0.6)  # budget fits one item
    # equal value and count: the lexicographically smaller mask (slot 1 read
    # as the most significant bit) selects the deeper singleton
    assert plan2.selected_slots == [2]


def test_backend_resolution(monkeypatch):
    monkeypatch.delenv("ADAPTIVE_BP_BACKEND", raising=False)
    assert knapsack_backend("python") == "python"
    assert knapsack_backend(None) in ("numba", "python")
    monkeypatch.setenv("ADAPTIVE_BP_BACKEND", "python")
    assert knapsack_backend(None) == "python"
    with pytest.raises(ConfigError):
        knapsack_backend("fortran")


def test_numba_backend_matches_python():
    pytest.importorskip("numba")
    rng = np.random.default_rng(21)
    for _ in range(10):
        n = int(rng.integers(4, 12))
        p = random_synthetic_profile(rng, n)
        values = random_values(rng, n)
        a = dp_select(p, values, rho=0.6, T_q=300, backend="python")
        b = dp_select(p, values, rho=0.6, T_q=300, backend="numba")
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.cumulative_importance == b.cumulative_importance


def test_dp_on_toy_profile_respects_budget():
    graph, _ = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=0))
    profile = profile_flops(graph, 16)
    rng = np.random.default_rng(3)
    values = random_values(rng, len(graph))
    for rho in (0.4, 0.5, 0.7):
        plan = dp_select(profile, values, rho, T_q=1000)
        assert plan.feasible
        assert selective_cost(profile, plan.mask) == plan.predicted_flops
        assert plan.predicted_flops <= rho * profile.T_full
        assert plan.mask.any()
