"""Budgeted tensor selection.

Maximizes cumulative importance subject to a backward-FLOPs budget
rho * T_full.  The cost of a selection decomposes into per-tensor update
costs (dw) plus a chain of dy costs determined solely by the deepest
selected slot, so conditioning on that deepest slot reduces the problem to
a 0/1 knapsack over the shallower slots' dw weights.  Selecting a tied
tensor forces the chain to full depth and is handled as its own branch.

Costs are quantized to an integer grid of resolution T_q before the DP and
the winning mask is re-validated against exact costs afterwards (grid
rounding is downward, so a nominally feasible plan can overshoot slightly;
least-important tensors are dropped until it fits).

The knapsack kernel is numba-jitted when available; ADAPTIVE_BP_BACKEND
chooses between {auto, numba, python}.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .profiler import FlopsProfile, selective_cost

try:  # numba is optional at runtime
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


# ---- knapsack kernel, two backends -----------------------------------------


def _knapsack_python(weights, values, width):
    n = weights.shape[0]
    table = np.zeros((n + 1, width + 1))
    keep = np.zeros((n + 1, width + 1), dtype=np.bool_)
    for j in range(1, n + 1):
        w, v = int(weights[j - 1]), values[j - 1]
        table[j] = table[j - 1]
        if w <= width:
            cand = table[j - 1, : width - w + 1] + v
            take = cand > table[j - 1, w:]
            table[j, w:][take] = cand[take]
            keep[j, w:] = take
    return table, keep


if _HAVE_NUMBA:

    @njit(cache=True)
    def _knapsack_numba(weights, values, width):  # pragma: no cover - jitted
        n = weights.shape[0]
        table = np.zeros((n + 1, width + 1))
        keep = np.zeros((n + 1, width + 1), dtype=np.bool_)
        for j in range(1, n + 1):
            w = weights[j - 1]
            v = values[j - 1]
            for t in range(width + 1):
                best = table[j - 1, t]
                if w <= t:
                    cand = table[j - 1, t - w] + v
                    if cand > best:
                        best = cand
                        keep[j, t] = True
                table[j, t] = best
        return table, keep


def knapsack_backend(name: str | None = None) -> str:
    name = name or os.environ.get("ADAPTIVE_BP_BACKEND", "auto")
    if name not in ("auto", "numba", "python"):
        raise ConfigError(f"unknown backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not installed")
    if name == "auto":
        return "numba" if _HAVE_NUMBA else "python"
    return name


def _knapsack(weights, values, width, backend=None):
    weights = np.ascontiguousarray(weights, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if knapsack_backend(backend) == "numba":
        return _knapsack_numba(weights, values, int(width))
    return _knapsack_python(weights, values, int(width))


def _backtrace(keep, weights, j, t):
    out = []
    for i in range(j, 0, -1):
        if keep[i, t]:
            out.append(i - 1)
            t -= int(weights[i - 1])
    return out


# ---- quantization -----------------------------------------------------------


@dataclass
class QuantizedProfile:
    """Integer-grid view of a profile under one dy convention."""

    profile: FlopsProfile
    convention: str
    T_q: int
    Z: float
    q_dy_step: np.ndarray  # slot-indexed marginal dy cost of extending depth
    q_dw: np.ndarray
    q_chain_full: int  # dy cost of full-depth flow (the tied case)

    @property
    def q_chain(self) -> np.ndarray:
        return np.cumsum(self.q_dy_step)


def quantize(profile: FlopsProfile, T_q: int, convention: str = "inclusive") -> QuantizedProfile:
    N = profile.n_tensors
    if T_q < N:
        raise ConfigError(f"T_q={T_q} is below the tensor count {N}")
    if convention not in ("inclusive", "exclusive"):
        raise InputError(f"unknown dy convention {convention!r}")
    Z = T_q / profile.T_full
    arr, prop = profile.t_dy_arrival, profile.t_dy_prop
    step = np.zeros(N + 1, dtype=np.int64)
    raw_step = np.zeros(N + 1, dtype=np.int64)
    for k in range(1, N + 1):
        raw_step[k] = arr[k] + (prop[k] if convention == "inclusive" else prop[k - 1])
        step[k] = int(raw_step[k] * Z)
    q_dw = (profile.t_dw * Z).astype(np.int64)
    tail = int(prop[N] * Z) if convention == "exclusive" else 0
    return QuantizedProfile(profile=profile, convention=convention, T_q=T_q, Z=Z,
                            q_dy_step=step, q_dw=q_dw,
                            q_chain_full=int(step[1:].sum()) + tail)


# ---- selection plans --------------------------------------------------------


@dataclass
class SelectionPlan:
    mask: np.ndarray  # bool per slot, index 0 <-> slot 1
    feasible: bool
    predicted_flops: int  # exact per-step cost of the plan
    budget_flops: float
    cumulative_importance: float
    subproblems_solved: int = 0
    repaired: bool = False
    backend: str = ""

    @property
    def selected_slots(self):
        return (np.flatnonzero(self.mask) + 1).tolist()

    def to_json(self) -> dict:
        return {
            "mask": self.mask.astype(int).tolist(),
            "selected_slots": self.selected_slots,
            "feasible": self.feasible,
            "predicted_flops": int(self.predicted_flops),
            "budget_flops": float(self.budget_flops),
            "cumulative_importance": float(self.cumulative_importance),
            "subproblems_solved": int(self.subproblems_solved),
            "repaired": self.repaired,
            "backend": self.backend,
        }


def _empty_plan(profile, rho, feasible, convention):
    N = profile.n_tensors
    return SelectionPlan(
        mask=np.zeros(N, dtype=bool),
        feasible=feasible,
        predicted_flops=int(profile.T_fp),
        budget_flops=rho * profile.T_full,
        cumulative_importance=0.0,
        backend=knapsack_backend(),
    )


def dp_select(profile: FlopsProfile, values: np.ndarray, rho: float,
              T_q: int = 1000, convention: str = "inclusive",
              prune: bool = True, backend: str | None = None) -> SelectionPlan:
    """Pick the importance-maximal feasible tensor subset.

    ``values`` is slot-indexed (length N+1) normalized importance; NaN marks
    tensors that were not evaluated and may not be selected.
    """
    if not (0.0 < rho <= 1.0):
        raise ConfigError(f"rho={rho} outside (0, 1]")
    N = profile.n_tensors
    if values.shape[0] != N + 1:
        raise InputError("values must be slot-indexed with length N+1")
    qp = quantize(profile, T_q, convention)
    budget_real = rho * profile.T_full - profile.T_fp
    if budget_real < 0:
        return _empty_plan(profile, rho, feasible=False, convention=convention)
    budget_q = int(budget_real * qp.Z)
    width = budget_q if prune else T_q

    cand = [s for s in range(1, N + 1) if np.isfinite(values[s])]
    tied = set(qp.profile.tied_slots)
    chain = qp.q_chain

    # branch A: deepest selected slot is an ordinary tensor
    items_a = [s for s in cand if s not in tied]
    w_a = qp.q_dw[items_a]
    v_a = values[items_a]
    table_a, keep_a = _knapsack(w_a, v_a, width, backend)
    solved = len(items_a) * (width + 1)

    best_value, best_sel = 0.0, []  # the empty selection is always an option
    for j, k in enumerate(items_a):
        spend = int(chain[k] + qp.q_dw[k])
        if spend > budget_q:
            continue
        val = values[k] + table_a[j, budget_q - spend]
        if val > best_value:
            best_value = val
            best_sel = [k] + [items_a[i] for i in
                              _backtrace(keep_a, w_a, j, budget_q - spend)]

    # branch B: a tied tensor is selected, forcing full-depth flow
    for e in tied:
        if e not in cand:
            continue
        spend = int(qp.q_chain_full + qp.q_dw[e])
        if spend > budget_q:
            continue
        items_b = [s for s in cand if s != e]
        w_b = qp.q_dw[items_b]
        table_b, keep_b = _knapsack(w_b, values[items_b], width, backend)
        solved += len(items_b) * (width + 1)
        val = values[e] + table_b[len(items_b), budget_q - spend]
        if val > best_value:
            best_value = val
            best_sel = [e] + [items_b[i] for i in
                              _backtrace(keep_b, w_b, len(items_b), budget_q - spend)]

    mask = np.zeros(N, dtype=bool)
    for s in best_sel:
        mask[s - 1] = True

    # exact re-validation: grid rounding is downward, so trim if we overshot
    budget = rho * profile.T_full
    cost = selective_cost(profile, mask, convention)
    repaired = False
    while cost > budget and mask.any():
        sel = np.flatnonzero(mask) + 1
        drop = sel[np.argmin(values[sel])]
        mask[drop - 1] = False
        cost = selective_cost(profile, mask, convention)
        repaired = True

    return SelectionPlan(
        mask=mask,
        feasible=True,
        predicted_flops=int(cost),
        budget_flops=budget,
        cumulative_importance=float(values[np.flatnonzero(mask) + 1].sum()) if mask.any() else 0.0,
        subproblems_solved=solved,
        repaired=repaired,
        backend=knapsack_backend(backend),
    )


def brute_force_select(profile: FlopsProfile, values: np.ndarray, rho: float,
                       convention: str = "inclusive") -> SelectionPlan:
    """Exhaustive reference selector over all 2^N masks (exact costs, no grid).

    Tie-breaks: maximum importance, then fewest selected tensors, then the
    lexicographically smallest mask reading slot 1 as the most significant bit.
    """
    N = profile.n_tensors
    if N > 20:
        raise InputError(f"brute force limited to 20 tensors, got {N}")
    total = 1 << N
    ids = np.arange(total, dtype=np.int64)
    bits = ((ids[:, None] >> np.arange(N)) & 1).astype(bool)  # bit i <-> slot i+1

    usable = np.isfinite(values[1:])
    ok = ~(bits & ~usable[None, :]).any(axis=1)

    arr, prop, dw = profile.t_dy_arrival, profile.t_dy_prop, profile.t_dw
    kmax = np.zeros(total, dtype=np.int64)
    for i in range(N):
        kmax[bits[:, i]] = i + 1
    tied_sel = np.zeros(total, dtype=bool)
    for e in profile.tied_slots:
        tied_sel |= bits[:, e - 1]
    arr_lim = np.where(tied_sel, N, kmax)
    if convention == "inclusive":
        prop_lim = arr_lim
    else:
        prop_lim = np.where(tied_sel, N, np.maximum(kmax - 1, 0))

    arr_pref = np.concatenate(([0], np.cumsum(arr[1:])))
    prop_pref = np.concatenate(([0], np.cumsum(prop[1:])))
    cost = (profile.T_fp + bits @ dw[1:]
            + arr_pref[arr_lim] + prop_pref[prop_lim])

    vals = np.where(np.isfinite(values[1:]), values[1:], 0.0)
    imp = bits @ vals
    budget = rho * profile.T_full
    feas = ok & (cost <= budget)
    if not feas.any():
        return _empty_plan(profile, rho, feasible=False, convention=convention)

    count = bits.sum(axis=1)
    lexkey = bits @ (1 << np.arange(N - 1, -1, -1, dtype=np.int64))
    order = np.lexsort((lexkey, count, -imp))
    winner = order[feas[order].argmax()]

    mask = bits[winner].copy()
    return SelectionPlan(
        mask=mask,
        feasible=True,
        predicted_flops=int(cost[winner]),
        budget_flops=float(budget),
        cumulative_importance=float(imp[winner]),
        subproblems_solved=int(total),
        backend="brute",
    )
