"""Analytical backprop cost model.

Produces, per bp slot, the same dy/dw operation counts the engine meter
reports, by replaying the backward schedule symbolically.  dy work is kept
split into arrival and prop parts (see engine module docstring) so that
selective costs under either dy convention can be evaluated without running
the engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import costs
from .errors import InputError
from .graph import ModelGraph, as_mask

DY_CONVENTIONS = ("inclusive", "exclusive")


@dataclass
class FlopsProfile:
    """Per-slot backward cost table; arrays are indexed by bp slot (1-based)."""

    t_dy_arrival: np.ndarray
    t_dy_prop: np.ndarray
    t_dw: np.ndarray
    T_fp: int
    tied_slots: tuple = ()
    names: tuple = ()

    @property
    def n_tensors(self) -> int:
        return self.t_dw.shape[0] - 1

    @property
    def t_dy(self) -> np.ndarray:
        return self.t_dy_arrival + self.t_dy_prop

    @property
    def T_bp(self) -> int:
        return int(self.t_dy.sum() + self.t_dw.sum())

    @property
    def T_full(self) -> int:
        return self.T_fp + self.T_bp

    @classmethod
    def synthetic(cls, t_dy, t_dw, T_fp: int = 0, tied_slots=()) -> "FlopsProfile":
        """Profile from bare per-slot dy/dw vectors (dy treated as all-prop)."""
        dy = np.concatenate(([0], np.asarray(t_dy, dtype=np.int64)))
        dw = np.concatenate(([0], np.asarray(t_dw, dtype=np.int64)))
        return cls(t_dy_arrival=np.zeros_like(dy), t_dy_prop=dy, t_dw=dw,
                   T_fp=int(T_fp), tied_slots=tuple(tied_slots))

    def rows(self):
        for s in range(1, self.n_tensors + 1):
            name = self.names[s - 1] if self.names else f"slot{s}"
            yield (s, name, int(self.t_dy[s]), int(self.t_dw[s]))


def profile_flops(graph: ModelGraph, batch_size: int) -> FlopsProfile:
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    if graph.family == "chain":
        return _profile_chain(graph, batch_size)
    return _profile_decoder(graph, batch_size)


def _profile_chain(graph: ModelGraph, rows: int) -> FlopsProfile:
    widths = graph.chain_widths
    N = len(graph)
    arr = np.zeros(N + 1, dtype=np.int64)
    prop = np.zeros(N + 1, dtype=np.int64)
    dw = np.zeros(N + 1, dtype=np.int64)
    T_fp = costs.mse_fwd(rows, widths[-1])
    arr[1] = costs.mse_bwd(rows, widths[-1])
    for s in range(1, N + 1):
        layer = N - s + 1
        T_fp += costs.matmul(rows, widths[layer - 1], widths[layer])
        prop[s] = costs.matmul(rows, widths[layer], widths[layer - 1])
        dw[s] = costs.matmul(widths[layer - 1], rows, widths[layer])
    return FlopsProfile(arr, prop, dw, T_fp, tied_slots=(),
                        names=graph.names_in_bp_order())


def _profile_decoder(graph: ModelGraph, B: int) -> FlopsProfile:
    dims = graph.dims
    d, h, F, V, n = dims.d, dims.h, dims.ffn, dims.vocab, dims.n
    dh = d // h
    rows = B * n
    N = len(graph)
    arr = np.zeros(N + 1, dtype=np.int64)
    prop = np.zeros(N + 1, dtype=np.int64)
    dw = np.zeros(N + 1, dtype=np.int64)
    slot = graph.slot

    # forward
    T_fp = costs.residual_add(rows, d)  # positional code add
    for _ in range(dims.blocks):
        T_fp += costs.ln_fwd(rows, d)
        T_fp += 3 * (costs.matmul(rows, d, d) + costs.bias_add(rows, d))
        T_fp += costs.mha_core_fwd(B, h, n, dh)
        T_fp += costs.matmul(rows, d, d) + costs.bias_add(rows, d)
        T_fp += costs.residual_add(rows, d)
        T_fp += costs.ln_fwd(rows, d)
        T_fp += costs.matmul(rows, d, F) + costs.bias_add(rows, F)
        T_fp += costs.gelu_fwd(rows * F)
        T_fp += costs.matmul(rows, F, d) + costs.bias_add(rows, d)
        T_fp += costs.residual_add(rows, d)
    T_fp += costs.ln_fwd(rows, d)
    T_fp += costs.matmul(rows, d, V)
    T_fp += costs.ce_fwd(rows, V)

    merge = costs.residual_add(rows, d)

    # tied embedding: loss backward arrives here, head dx propagates deeper;
    # selecting it forces full-depth flow, so the input-side work (scatter and
    # the deepest normalization backward) rides on its dw bucket
    es = slot("embed")
    arr[es] = costs.ce_bwd(rows, V)
    prop[es] = costs.matmul(rows, V, d)
    dw[es] = (costs.matmul(V, rows, d) + costs.embed_scatter_bwd(rows, d)
              + costs.ln_norm_bwd(rows, d) + merge)

    dw[slot("ln_f.bias")] = costs.ln_dbeta(rows, d)
    dw[slot("ln_f.gain")] = costs.ln_dgamma(rows, d)
    prop[slot("ln_f.gain")] = costs.ln_dxhat(rows, d)

    for b in range(dims.blocks):
        nm = lambda short: slot(f"block{b}.{short}")
        # arrival at the block's shallowest slot: normalization backward from
        # the layer just above (final LN for the last block, else LN1 + merge)
        arr[nm("ffn.b2")] = costs.ln_norm_bwd(rows, d)
        if b != dims.blocks - 1:
            arr[nm("ffn.b2")] += merge
        dw[nm("ffn.b2")] = costs.bias_grad(rows, d)
        prop[nm("ffn.w2")] = costs.matmul(rows, d, F)
        dw[nm("ffn.w2")] = costs.matmul(F, rows, d)
        arr[nm("ffn.b1")] = costs.gelu_bwd(rows * F)
        dw[nm("ffn.b1")] = costs.bias_grad(rows, F)
        prop[nm("ffn.w1")] = costs.matmul(rows, F, d)
        dw[nm("ffn.w1")] = costs.matmul(d, rows, F)
        dw[nm("ln2.bias")] = costs.ln_dbeta(rows, d)
        dw[nm("ln2.gain")] = costs.ln_dgamma(rows, d)
        prop[nm("ln2.gain")] = costs.ln_dxhat(rows, d)
        arr[nm("attn.b_o")] = costs.ln_norm_bwd(rows, d) + merge
        dw[nm("attn.b_o")] = costs.bias_grad(rows, d)
        prop[nm("attn.w_o")] = costs.matmul(rows, d, d)
        dw[nm("attn.w_o")] = costs.matmul(d, rows, d)
        arr[nm("attn.w_v")] = costs.mha_core_bwd(B, h, n, dh)
        prop[nm("attn.w_v")] = costs.matmul(rows, d, d)
        dw[nm("attn.w_v")] = costs.matmul(d, rows, d)
        for proj in ("k", "q"):
            prop[nm(f"attn.w_{proj}")] = costs.matmul(rows, d, d) + merge
            dw[nm(f"attn.w_{proj}")] = costs.matmul(d, rows, d)
        for bias in ("b_v", "b_k", "b_q"):
            dw[nm(f"attn.{bias}")] = costs.bias_grad(rows, d)
        dw[nm("ln1.bias")] = costs.ln_dbeta(rows, d)
        dw[nm("ln1.gain")] = costs.ln_dgamma(rows, d)
        prop[nm("ln1.gain")] = costs.ln_dxhat(rows, d)

    return FlopsProfile(arr, prop, dw, T_fp,
                        tied_slots=tuple(graph.tied_slots),
                        names=graph.names_in_bp_order())


def profile_flow_limits(profile: FlopsProfile, mask, convention: str):
    """(arr_limit, prop_limit, tied) for a mask, from the profile alone."""
    if convention not in DY_CONVENTIONS:
        raise InputError(f"unknown dy convention {convention!r}")
    m = as_mask(mask, profile.n_tensors)
    sel = np.flatnonzero(m) + 1
    if sel.size == 0:
        return 0, 0, False
    tied = any(m[s - 1] for s in profile.tied_slots)
    kmax = profile.n_tensors if tied else int(sel.max())
    if tied or convention == "inclusive":
        return kmax, kmax, tied
    return kmax, kmax - 1, tied


def selective_cost(profile: FlopsProfile, mask, convention: str = "inclusive") -> int:
    """Total FLOPs of one forward plus the mask-restricted backward."""
    m = as_mask(mask, profile.n_tensors)
    arr_limit, prop_limit, _ = profile_flow_limits(profile, m, convention)
    cost = profile.T_fp
    cost += int(profile.t_dw[1:][m].sum())
    cost += int(profile.t_dy_arrival[1 : arr_limit + 1].sum())
    cost += int(profile.t_dy_prop[1 : prop_limit + 1].sum())
    return cost


def verify_against_meter(profile: FlopsProfile, fwd_meter, bwd_meter, mask,
                         convention: str = "inclusive") -> dict:
    """Compare predicted selective cost with metered counts for one mask."""
    predicted = selective_cost(profile, mask, convention)
    measured = fwd_meter.fp_flops + bwd_meter.bp_total
    rel = abs(predicted - measured) / max(measured, 1)
    return {
        "predicted": int(predicted),
        "measured": int(measured),
        "rel_error": float(rel),
        "fp_match": int(fwd_meter.fp_flops) == int(profile.T_fp),
    }
