"""Acceptance gate: nine numbered criteria, one PASS/FAIL line each.

Every criterion prints its verdict before asserting, so a failing run still
shows the full scoreboard line for the criterion that broke.
"""

import time

import numpy as np
import pytest

from adaptive_bp.engine import (backward_full, backward_selective,
                                finite_diff_grad, forward)
from adaptive_bp.graph import ModelDims, TensorKind, build_graph
from adaptive_bp.importance import (early_stop_depth, evaluate_importance,
                                    spearman, tensor_importance, undo_oracle)
from adaptive_bp.model import ToyModelConfig, build_toy_decoder, synth_batch
from adaptive_bp.optim import make_optimizer
from adaptive_bp.profiler import profile_flops, profile_flow_limits
from adaptive_bp.selector import brute_force_select, dp_select
from adaptive_bp.trainer import RunConfig, train
from conftest import TOY_DIMS, random_synthetic_profile, random_values


def verdict(number, name, ok, detail):
    print(f"[criterion {number}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number} ({name}) failed: {detail}"


# ---- 1: gradient correctness ------------------------------------------------


def test_criterion_1_gradient_correctness():
    graph, weights = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=0))
    batch = synth_batch("copy", TOY_DIMS, 4, seed=0, index=0)
    _, tape, _ = forward(graph, weights, batch)
    grads, _ = backward_full(tape)

    by_kind = {}
    for t in graph.tensors:
        by_kind.setdefault(t.kind, []).append(t.name)

    worst = 0.0
    t0 = time.time()
    for kind, names in by_kind.items():
        probed = 0
        for name in names:
            take = 64 - probed
            if take <= 0:
                break
            idx, est = finite_diff_grad(graph, weights, batch, name, take,
                                        step=1e-4, seed=17)
            got = grads[name].reshape(-1)[idx]
            rel = np.abs(got - est) / np.maximum(np.abs(est), 1e-8)
            worst = max(worst, float(rel.max()))
            probed += idx.size
        assert probed >= min(64, sum(weights[n].size for n in names))
    elapsed = time.time() - t0
    verdict(1, "gradient correctness", worst < 1e-4 and elapsed < 60,
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


# ---- 2: selective equals full -----------------------------------------------


def test_criterion_2_selective_equals_full():
    t0 = time.time()
    mismatches = 0
    for seed in range(5):
        graph, weights = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=seed))
        batch = synth_batch("copy", TOY_DIMS, 4, seed=seed, index=0)
        _, tape, _ = forward(graph, weights, batch)
        full, _ = backward_full(tape)
        rng = np.random.default_rng(100 + seed)
        for i in range(100):
            mask = rng.random(len(graph)) < rng.uniform(0.1, 0.9)
            conv = "inclusive" if i % 2 == 0 else "exclusive"
            sel, _ = backward_selective(tape, mask, conv)
            for name, g in sel.items():
                if not np.array_equal(g, full[name]):
                    mismatches += 1
    elapsed = time.time() - t0
    verdict(2, "selective = full (bitwise)",
            mismatches == 0 and elapsed < 120,
            f"500 masks, {mismatches} mismatches, {elapsed:.1f}s")


# ---- 3: profiler fidelity ---------------------------------------------------


def test_criterion_3_profiler_fidelity():
    sizes = [
        (ModelDims(blocks=1, d=16, h=2, ffn=32, vocab=16, n=12), 2),
        (TOY_DIMS, 4),
        (ModelDims(blocks=3, d=48, h=3, ffn=96, vocab=48, n=24), 2),
    ]
    t0 = time.time()
    worst_rel = 0.0
    buckets_exact = True
    for dims, B in sizes:
        graph, weights = build_toy_decoder(ToyModelConfig(dims, seed=0))
        batch = synth_batch("copy", dims, B, seed=0, index=0)
        profile = profile_flops(graph, B)
        _, tape, fwd = forward(graph, weights, batch)
        assert fwd.fp_flops == profile.T_fp
        rng = np.random.default_rng(7)
        N = len(graph)
        for i in range(100):
            mask = rng.random(N) < rng.uniform(0.1, 0.9)
            conv = "inclusive" if i % 2 == 0 else "exclusive"
            _, bwd = backward_selective(tape, mask, conv)
            predicted = profile.T_fp  # recompute per-slot for bucket checks
            arr_lim, prop_lim, _ = profile_flow_limits(profile, mask, conv)
            exp_dy = np.zeros(N + 1, dtype=np.int64)
            exp_dy[1 : arr_lim + 1] += profile.t_dy_arrival[1 : arr_lim + 1]
            exp_dy[1 : prop_lim + 1] += profile.t_dy_prop[1 : prop_lim + 1]
            exp_dw = np.zeros(N + 1, dtype=np.int64)
            exp_dw[1:][mask] = profile.t_dw[1:][mask]
            if not (np.array_equal(bwd.dy_flops, exp_dy)
                    and np.array_equal(bwd.dw_flops, exp_dw)):
                buckets_exact = False
            measured = bwd.bp_total
            predicted = int(exp_dy.sum() + exp_dw.sum())
            worst_rel = max(worst_rel,
                            abs(predicted - measured) / max(measured, 1))
    elapsed = time.time() - t0
    verdict(3, "profiler fidelity",
            worst_rel <= 0.01 and buckets_exact and elapsed < 300,
            f"max rel err {worst_rel:.2e}, buckets exact: {buckets_exact}, "
            f"{elapsed:.1f}s")


# ---- 4: DP optimality -------------------------------------------------------


def test_criterion_4_dp_optimality():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst_gap = 0.0
    prune_identical = True
    for _ in range(200):
        n = int(rng.integers(3, 16))
        p = random_synthetic_profile(rng, n, t_fp_scale=rng.random() * 0.3)
        values = random_values(rng, n)
        rho = float(rng.uniform(0.2, 1.0))
        conv = "inclusive" if rng.random() < 0.5 else "exclusive"
        T_full = int(p.T_full)  # T_q = T_full gives Z = 1: an exact grid
        dp = dp_select(p, values, rho, T_q=T_full, convention=conv)
        bf = brute_force_select(p, values, rho, convention=conv)
        worst_gap = max(worst_gap, abs(dp.cumulative_importance
                                       - bf.cumulative_importance))
        unpruned = dp_select(p, values, rho, T_q=T_full, convention=conv,
                             prune=False)
        if not np.array_equal(dp.mask, unpruned.mask):
            prune_identical = False
    elapsed = time.time() - t0
    verdict(4, "DP optimality at Z=1",
            worst_gap < 1e-12 and prune_identical and elapsed < 120,
            f"200 instances, max importance gap {worst_gap:.1e}, "
            f"pruned plans identical: {prune_identical}, {elapsed:.1f}s")


# ---- 5: budget compliance ---------------------------------------------------


def test_criterion_5_budget_compliance():
    all_ok = True
    details = []
    for rho in (0.4, 0.5, 0.7):
        t0 = time.time()
        report = train(RunConfig(dims=TOY_DIMS, task="copy",
                                 strategy="adaptive", rho=rho, epochs=2,
                                 steps_per_epoch=100, batch_size=16,
                                 eval_every=50, seed=0))
        cap = rho * report.T_full * 1.01
        worst = max(report.step_flops) / report.T_full
        ok = all(s <= cap for s in report.step_flops)
        ok = ok and (time.time() - t0) < 600
        all_ok = all_ok and ok
        details.append(f"rho={rho}: max step {worst:.3f}*T_full")
    verdict(5, "budget compliance", all_ok, "; ".join(details))


# ---- 6: importance first-order validity -------------------------------------


def test_criterion_6_importance_first_order():
    t0 = time.time()
    graph, weights = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=0))
    batch = synth_batch("copy", TOY_DIMS, 8, seed=0, index=0)
    _, tape, _ = forward(graph, weights, batch)
    grads, _ = backward_full(tape)
    opt = make_optimizer("adamw", lr=1e-3)
    raw = tensor_importance(graph, weights, grads, opt)
    eps = 1e-4
    dl = undo_oracle(graph, weights, batch, grads, opt, eps)
    slots = np.arange(1, len(graph) + 1)
    # per-tensor first-order match, on the normalized importance scale
    scale = np.nanmax(np.abs(raw))
    rel = np.abs(dl[slots] + eps * raw[slots]) / (eps * scale)
    rank = spearman(raw[slots], -dl[slots])
    elapsed = time.time() - t0
    verdict(6, "importance first-order validity",
            rel.max() <= 0.05 and rank >= 0.9 and elapsed < 180,
            f"max first-order err {rel.max():.2%}, spearman {rank:.5f}, "
            f"{elapsed:.1f}s")


# ---- 7: early-stop soundness ------------------------------------------------


def test_criterion_7_early_stop_soundness():
    t0 = time.time()
    dims = ModelDims(blocks=1, d=32, h=2, ffn=64, vocab=32, n=20)
    graph = build_graph(dims)
    profile = profile_flops(graph, 4)
    N = len(graph)  # 19: every mask is enumerable
    total = 1 << N
    bits = ((np.arange(total, dtype=np.int64)[:, None]
             >> np.arange(N)) & 1).astype(bool)
    kmax = np.zeros(total, dtype=np.int64)
    for i in range(N):
        kmax[bits[:, i]] = i + 1
    tied_sel = bits[:, 0]  # slot 1 is the tied embedding
    lim = np.where(tied_sel, N, kmax)  # inclusive convention
    arr_pref = np.concatenate(([0], np.cumsum(profile.t_dy_arrival[1:])))
    prop_pref = np.concatenate(([0], np.cumsum(profile.t_dy_prop[1:])))
    cost = (profile.T_fp + bits @ profile.t_dw[1:]
            + arr_pref[lim] + prop_pref[lim])

    sound = True
    details = []
    for rho in (0.34, 0.5):
        depth = early_stop_depth(profile, rho)
        feasible = cost <= rho * profile.T_full
        deepest = int(kmax[feasible].max()) if feasible.any() else 0
        if deepest > depth:
            sound = False
        details.append(f"rho={rho}: depth {depth}, deepest feasible {deepest}")
    elapsed = time.time() - t0
    verdict(7, "early-stop soundness", sound and elapsed < 60,
            "; ".join(details) + f", {elapsed:.1f}s")


# ---- 8: quantization behavior -----------------------------------------------


def test_criterion_8_quantization_behavior():
    t0 = time.time()
    rho = 0.5
    coarse_misses = 0
    fine_misses = 0
    for seed in range(1, 6):
        rng = np.random.default_rng(seed)
        p = random_synthetic_profile(rng, 10, tied_prob=0.0, t_fp_scale=0.3)
        values = random_values(rng, 10)
        for T_q, is_coarse in ((10, True), (1000, False)):
            plan = dp_select(p, values, rho, T_q=T_q, backend="python")
            realized = 1.0 - plan.predicted_flops / p.T_full
            missed = abs(realized - (1.0 - rho)) > 0.05
            if is_coarse:
                coarse_misses += missed
            else:
                fine_misses += missed

    # runtime should grow about linearly with the grid resolution
    graph = build_graph(TOY_DIMS)
    toy_profile = profile_flops(graph, 16)
    toy_values = random_values(np.random.default_rng(0), len(graph))

    def best_time(T_q):
        best = float("inf")
        for _ in range(3):
            start = time.perf_counter()
            dp_select(toy_profile, toy_values, rho, T_q=T_q, backend="python")
            best = min(best, time.perf_counter() - start)
        return best

    best_time(10_000)  # warm caches
    ratio = best_time(200_000) / best_time(100_000)
    linear = 1.0 <= ratio <= 4.0  # 2x work, factor-2 tolerance
    elapsed = time.time() - t0
    verdict(8, "quantization behavior",
            coarse_misses >= 1 and fine_misses == 0 and linear
            and elapsed < 300,
            f"T_q=10 missed {coarse_misses}/5, T_q=1000 missed "
            f"{fine_misses}/5, runtime ratio(2x T_q) {ratio:.2f}, "
            f"{elapsed:.1f}s")


# ---- 9: end-to-end strategy comparison --------------------------------------


@pytest.fixture(scope="module")
def pretrained_checkpoint(tmp_path_factory):
    """A model competent at both echo tasks, to fine-tune on copy alone."""
    out = str(tmp_path_factory.mktemp("pretrain"))
    train(RunConfig(dims=TOY_DIMS, task="mix", strategy="full_ft", rho=1.0,
                    epochs=8, steps_per_epoch=300, batch_size=32,
                    eval_every=300, seed=0), out_dir=out)
    return out + "/weights"


def test_criterion_9_end_to_end(pretrained_checkpoint):
    t0 = time.time()

    def run(strategy, rho, seed):
        return train(RunConfig(dims=TOY_DIMS, task="copy", strategy=strategy,
                               rho=rho, epochs=4, steps_per_epoch=500,
                               batch_size=16, eval_every=500, seed=seed,
                               init_checkpoint=pretrained_checkpoint))

    within5 = fixed_not_beat = static_not_beat = 0
    flops_ok = True
    ratios = []
    for seed in range(1, 6):
        full = run("full_ft", 1.0, seed)
        adaptive = run("adaptive", 0.5, seed)
        fixed = run("fixed_topk", 0.5, seed)
        static = run("static_first_epoch", 0.5, seed)

        within5 += adaptive.final_accuracy >= full.final_accuracy - 0.05
        fixed_not_beat += fixed.final_accuracy <= adaptive.final_accuracy
        static_not_beat += static.final_accuracy <= adaptive.final_accuracy
        ratio = ((adaptive.total_train_flops + adaptive.total_importance_flops)
                 / full.total_train_flops)
        ratios.append(ratio)
        flops_ok = flops_ok and ratio <= 0.505

    elapsed = time.time() - t0
    verdict(9, "end-to-end strategy comparison",
            within5 == 5 and fixed_not_beat >= 4 and static_not_beat >= 3
            and flops_ok and elapsed < 1800,
            f"within 5pp of full: {within5}/5, fixed_topk not better: "
            f"{fixed_not_beat}/5, static not better: {static_not_beat}/5, "
            f"max flops ratio {max(ratios):.4f}, {elapsed:.0f}s")
