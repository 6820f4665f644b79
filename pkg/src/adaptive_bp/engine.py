"""Reverse-mode engine for the toy decoder and the dense chain.

The forward pass records a tape of per-layer activations plus an op log.
Backward walks the tape in strict reverse order; every backward operator is
guarded by the selection mask and attributes its FLOPs to exactly one bp
slot's dy or dw bucket.  Running the same guarded code path for full and
selective backprop makes selected tensors' gradients bitwise identical.

Backward work at a bp slot splits into two classes:
  arrival — work needed to form the gradients arriving at that slot
            (loss backward, attention backward, LayerNorm normalization,
            activation-function backward);
  prop    — pure propagation past the slot toward deeper slots.
Arrival units run whenever flow reaches the slot; prop units additionally
run at the flow boundary only under the inclusive dy convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import costs
from .errors import InputError
from .graph import ModelGraph, as_mask, flow_limits

LN_EPS = 1e-5
_GELU_C = 0.044715
_GELU_S = math.sqrt(2.0 / math.pi)
_NEG_INF = -1e30


@dataclass
class FlopsMeter:
    """Exact operation counts, bucketed per bp slot."""

    n_tensors: int
    fp_flops: int = 0
    dy_flops: np.ndarray = None
    dw_flops: np.ndarray = None

    def __post_init__(self):
        if self.dy_flops is None:
            self.dy_flops = np.zeros(self.n_tensors + 1, dtype=np.int64)
        if self.dw_flops is None:
            self.dw_flops = np.zeros(self.n_tensors + 1, dtype=np.int64)

    def add_fp(self, f: int):
        self.fp_flops += int(f)

    def add_dy(self, slot: int, f: int):
        self.dy_flops[slot] += int(f)

    def add_dw(self, slot: int, f: int):
        self.dw_flops[slot] += int(f)

    @property
    def bp_total(self) -> int:
        return int(self.dy_flops.sum() + self.dw_flops.sum())

    @property
    def total(self) -> int:
        return self.fp_flops + self.bp_total


@dataclass
class Batch:
    tokens: np.ndarray  # (B, n) int
    labels: np.ndarray  # (B, n) int
    loss_mask: np.ndarray  # (B, n) float 0/1, positions that contribute to the loss


@dataclass
class ChainBatch:
    x: np.ndarray  # (rows, width_in)
    target: np.ndarray  # (rows, width_out)


@dataclass
class Tape:
    graph: ModelGraph
    weights: dict
    batch: object
    ops: list = field(default_factory=list)  # (op kind, output shape) in execution order
    store: dict = field(default_factory=dict)
    loss: float = 0.0

    def record(self, kind: str, shape) -> None:
        self.ops.append((kind, tuple(shape)))


# ---- primitive helpers ---------------------------------------------------


POS_SCALE = 0.02  # keep the positional signal comparable to the embedding init


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional code added to the token embeddings."""
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2.0 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return POS_SCALE * out


def _gelu(x):
    t = np.tanh(_GELU_S * (x + _GELU_C * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(g, x, t):
    inner_d = _GELU_S * (1.0 + 3.0 * _GELU_C * x * x)
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner_d
    return g * dydx


def _ln_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def _ln_norm_bwd(dxhat, xhat, rstd):
    # propagate dxhat through the normalization
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd


# ---- forward -------------------------------------------------------------


def forward(graph: ModelGraph, weights: dict, batch) -> tuple[float, Tape, FlopsMeter]:
    """Run the forward pass, returning (loss, tape, meter)."""
    if graph.family == "chain":
        return _forward_chain(graph, weights, batch)
    return _forward_decoder(graph, weights, batch)


def _forward_decoder(graph: ModelGraph, weights: dict, batch: Batch):
    dims = graph.dims
    B, n = batch.tokens.shape
    if n > dims.n:
        raise InputError(f"sequence length {n} exceeds configured n={dims.n}")
    if batch.tokens.min() < 0 or batch.tokens.max() >= dims.vocab:
        raise InputError("token id out of vocabulary range")
    if batch.labels.min() < 0 or batch.labels.max() >= dims.vocab:
        raise InputError("label id out of vocabulary range")

    d, h, F, V = dims.d, dims.h, dims.ffn, dims.vocab
    dh = d // h
    rows = B * n
    meter = FlopsMeter(len(graph))
    tape = Tape(graph=graph, weights=weights, batch=batch)
    st = tape.store

    E = weights["embed"]
    x = E[batch.tokens] + sinusoid_positions(n, d)  # fixed positional code
    meter.add_fp(costs.residual_add(rows, d))
    tape.record("embed_gather", x.shape)

    causal = np.triu(np.ones((n, n)), k=1) * _NEG_INF  # (n, n)

    st["blocks"] = []
    for b in range(dims.blocks):
        w = {k: weights[f"block{b}.{k}"] for k, _ in _BLOCK_PARAMS}
        rec = {"x_in": x}
        h1, xhat1, rstd1 = _ln_fwd(x, w["ln1.gain"], w["ln1.bias"])
        meter.add_fp(costs.ln_fwd(rows, d))
        tape.record("layernorm", h1.shape)
        rec.update(h1=h1, xhat1=xhat1, rstd1=rstd1)

        q = h1 @ w["attn.w_q"] + w["attn.b_q"]
        k = h1 @ w["attn.w_k"] + w["attn.b_k"]
        v = h1 @ w["attn.w_v"] + w["attn.b_v"]
        meter.add_fp(3 * (costs.matmul(rows, d, d) + costs.bias_add(rows, d)))
        tape.record("qkv_proj", q.shape)

        def heads(a):
            return a.reshape(B, n, h, dh).transpose(0, 2, 1, 3)  # (B,h,n,dh)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh) + causal
        smax = scores.max(axis=-1, keepdims=True)
        ex = np.exp(scores - smax)
        A = ex / ex.sum(axis=-1, keepdims=True)
        O = A @ vh  # (B,h,n,dh)
        meter.add_fp(costs.mha_core_fwd(B, h, n, dh))
        tape.record("mha_core", O.shape)
        Oc = O.transpose(0, 2, 1, 3).reshape(B, n, d)
        rec.update(qh=qh, kh=kh, vh=vh, A=A, Oc=Oc)

        attn = Oc @ w["attn.w_o"] + w["attn.b_o"]
        meter.add_fp(costs.matmul(rows, d, d) + costs.bias_add(rows, d))
        tape.record("out_proj", attn.shape)

        res1 = x + attn
        meter.add_fp(costs.residual_add(rows, d))
        tape.record("residual", res1.shape)
        rec["res1"] = res1

        h2, xhat2, rstd2 = _ln_fwd(res1, w["ln2.gain"], w["ln2.bias"])
        meter.add_fp(costs.ln_fwd(rows, d))
        tape.record("layernorm", h2.shape)
        rec.update(h2=h2, xhat2=xhat2, rstd2=rstd2)

        f1 = h2 @ w["ffn.w1"] + w["ffn.b1"]
        meter.add_fp(costs.matmul(rows, d, F) + costs.bias_add(rows, F))
        a, gt = _gelu(f1)
        meter.add_fp(costs.gelu_fwd(rows * F))
        f2 = a @ w["ffn.w2"] + w["ffn.b2"]
        meter.add_fp(costs.matmul(rows, F, d) + costs.bias_add(rows, d))
        tape.record("ffn", f2.shape)
        rec.update(f1=f1, a=a, gelu_t=gt)

        x = res1 + f2
        meter.add_fp(costs.residual_add(rows, d))
        tape.record("residual", x.shape)
        st["blocks"].append(rec)

    xf, xhatf, rstdf = _ln_fwd(x, weights["ln_f.gain"], weights["ln_f.bias"])
    meter.add_fp(costs.ln_fwd(rows, d))
    tape.record("layernorm", xf.shape)
    st.update(xf=xf, xhatf=xhatf, rstdf=rstdf)

    logits = xf @ E.T
    meter.add_fp(costs.matmul(rows, d, V))
    tape.record("tied_head", logits.shape)

    # masked mean token-level cross entropy
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)
    lse = np.log(ez.sum(axis=-1))
    logp = z[np.arange(B)[:, None], np.arange(n)[None, :], batch.labels] - lse
    denom = batch.loss_mask.sum()
    if denom <= 0:
        raise InputError("loss_mask selects no positions")
    loss = float(-(logp * batch.loss_mask).sum() / denom)
    meter.add_fp(costs.ce_fwd(rows, V))
    tape.record("cross_entropy", ())
    st.update(probs=probs, denom=denom)
    tape.loss = loss
    return loss, tape, meter


_BLOCK_PARAMS = [
    ("ln1.gain", None),
    ("ln1.bias", None),
    ("attn.w_q", None),
    ("attn.b_q", None),
    ("attn.w_k", None),
    ("attn.b_k", None),
    ("attn.w_v", None),
    ("attn.b_v", None),
    ("attn.w_o", None),
    ("attn.b_o", None),
    ("ln2.gain", None),
    ("ln2.bias", None),
    ("ffn.w1", None),
    ("ffn.b1", None),
    ("ffn.w2", None),
    ("ffn.b2", None),
]


def _forward_chain(graph: ModelGraph, weights: dict, batch: ChainBatch):
    widths = graph.chain_widths
    rows = batch.x.shape[0]
    meter = FlopsMeter(len(graph))
    tape = Tape(graph=graph, weights=weights, batch=batch)
    acts = [batch.x]
    y = batch.x
    for layer in range(1, len(widths)):
        W = weights[f"layer{layer}.w"]
        y = y @ W
        meter.add_fp(costs.matmul(rows, widths[layer - 1], widths[layer]))
        tape.record("matmul", y.shape)
        acts.append(y)
    diff = y - batch.target
    loss = float((diff * diff).sum() / rows)
    meter.add_fp(costs.mse_fwd(rows, widths[-1]))
    tape.record("squared_loss", ())
    tape.store.update(acts=acts, diff=diff)
    tape.loss = loss
    return loss, tape, meter


# ---- backward ------------------------------------------------------------


def backward_full(graph_or_tape, max_depth: int | None = None, collect_aux: bool = False):
    """Gradients for every tensor (optionally only down to ``max_depth``).

    With ``max_depth`` < N the tied embedding's gradient contains only the
    output-side term (flow never reaches the input gather); callers doing
    early-stopped importance evaluation rely on that partial value.
    """
    tape = graph_or_tape
    n = len(tape.graph)
    depth = n if max_depth is None else int(max_depth)
    mask = np.zeros(n, dtype=bool)
    mask[:depth] = True
    full_flow = depth == n
    return _backward(tape, mask, arr_limit=depth, prop_limit=depth,
                     tied_flow=full_flow, collect_aux=collect_aux)


def backward_selective(tape: Tape, mask, convention: str = "inclusive",
                       collect_aux: bool = False):
    """Backward pass restricted by a selection mask.

    Gradients of selected tensors are bitwise identical to backward_full's.
    """
    m = as_mask(mask, len(tape.graph))
    arr, prop, tied = flow_limits(tape.graph, m, convention)
    return _backward(tape, m, arr_limit=arr, prop_limit=prop, tied_flow=tied,
                     collect_aux=collect_aux)


def _backward(tape, mask, arr_limit, prop_limit, tied_flow, collect_aux=False):
    if tape.graph.family == "chain":
        return _backward_chain(tape, mask, arr_limit, prop_limit)
    return _backward_decoder(tape, mask, arr_limit, prop_limit, tied_flow, collect_aux)


def _backward_chain(tape, mask, arr_limit, prop_limit):
    graph, weights = tape.graph, tape.weights
    widths = graph.chain_widths
    n_layers = len(graph)
    rows = tape.batch.x.shape[0]
    meter = FlopsMeter(n_layers)
    grads = {}
    if arr_limit == 0:
        return grads, meter

    acts = tape.store["acts"]
    g = 2.0 * tape.store["diff"] / rows
    meter.add_dy(1, costs.mse_bwd(rows, widths[-1]))  # loss backward, arrival at slot 1

    for slot in range(1, n_layers + 1):
        layer = n_layers - slot + 1
        W = weights[f"layer{layer}.w"]
        if mask[slot - 1]:
            grads[f"layer{layer}.w"] = acts[layer - 1].T @ g
            meter.add_dw(slot, costs.matmul(widths[layer - 1], rows, widths[layer]))
        if slot <= prop_limit:
            g = g @ W.T
            meter.add_dy(slot, costs.matmul(rows, widths[layer], widths[layer - 1]))
        elif slot >= arr_limit:
            break
    return grads, meter


def _backward_decoder(tape, mask, arr_limit, prop_limit, tied_flow, collect_aux):
    graph, weights, batch = tape.graph, tape.weights, tape.batch
    dims = graph.dims
    B, n = batch.tokens.shape
    d, h, F, V = dims.d, dims.h, dims.ffn, dims.vocab
    dh = d // h
    rows = B * n
    st = tape.store
    meter = FlopsMeter(len(graph))
    grads = {}
    aux = {}
    slot = graph.slot

    def want_dw(name):
        return mask[slot(name) - 1]

    def arr(name):
        return slot(name) <= arr_limit

    def prop(name):
        return slot(name) <= prop_limit

    if arr_limit == 0:
        return (grads, meter, aux) if collect_aux else (grads, meter)

    E = weights["embed"]
    embed_slot = slot("embed")
    embed_selected = want_dw("embed")

    # loss backward: arrival at the tied-head slot
    dlogits = st["probs"].copy()
    dlogits[np.arange(B)[:, None], np.arange(n)[None, :], batch.labels] -= 1.0
    dlogits *= (batch.loss_mask / st["denom"])[..., None]
    meter.add_dy(embed_slot, costs.ce_bwd(rows, V))

    if embed_selected:
        dE = dlogits.reshape(rows, V).T @ st["xf"].reshape(rows, d)
        meter.add_dw(embed_slot, costs.matmul(V, rows, d))
    if collect_aux:
        aux["dlogits"] = dlogits

    dxf = None
    if prop_limit >= embed_slot:
        dxf = dlogits @ E
        meter.add_dy(embed_slot, costs.matmul(rows, V, d))

    # final LayerNorm
    dres = None
    if dxf is not None:
        if want_dw("ln_f.bias"):
            grads["ln_f.bias"] = dxf.reshape(rows, d).sum(axis=0)
            meter.add_dw(slot("ln_f.bias"), costs.ln_dbeta(rows, d))
        if want_dw("ln_f.gain"):
            grads["ln_f.gain"] = (dxf * st["xhatf"]).reshape(rows, d).sum(axis=0)
            meter.add_dw(slot("ln_f.gain"), costs.ln_dgamma(rows, d))
        if prop("ln_f.gain"):
            dxhatf = dxf * weights["ln_f.gain"]
            meter.add_dy(slot("ln_f.gain"), costs.ln_dxhat(rows, d))
            # normalization backward is arrival work for the next-deeper slot
            last = dims.blocks - 1
            if arr(f"block{last}.ffn.b2"):
                dres = _ln_norm_bwd(dxhatf, st["xhatf"], st["rstdf"])
                meter.add_dy(slot(f"block{last}.ffn.b2"), costs.ln_norm_bwd(rows, d))

    dx_in = None
    for b in reversed(range(dims.blocks)):
        if dres is None:
            break
        rec = st["blocks"][b]
        w = {k: weights[f"block{b}.{k}"] for k, _ in _BLOCK_PARAMS}
        nm = lambda short: f"block{b}.{short}"
        g = dres  # gradient at the block output (res2)

        # FFN
        if want_dw(nm("ffn.b2")):
            grads[nm("ffn.b2")] = g.reshape(rows, d).sum(axis=0)
            meter.add_dw(slot(nm("ffn.b2")), costs.bias_grad(rows, d))
        da = None
        if want_dw(nm("ffn.w2")):
            grads[nm("ffn.w2")] = rec["a"].reshape(rows, F).T @ g.reshape(rows, d)
            meter.add_dw(slot(nm("ffn.w2")), costs.matmul(F, rows, d))
        if prop(nm("ffn.w2")):
            da = g @ w["ffn.w2"].T
            meter.add_dy(slot(nm("ffn.w2")), costs.matmul(rows, d, F))
        df1 = None
        if da is not None and arr(nm("ffn.b1")):
            df1 = _gelu_bwd(da, rec["f1"], rec["gelu_t"])
            meter.add_dy(slot(nm("ffn.b1")), costs.gelu_bwd(rows * F))
        if df1 is not None:
            if want_dw(nm("ffn.b1")):
                grads[nm("ffn.b1")] = df1.reshape(rows, F).sum(axis=0)
                meter.add_dw(slot(nm("ffn.b1")), costs.bias_grad(rows, F))
            if want_dw(nm("ffn.w1")):
                grads[nm("ffn.w1")] = rec["h2"].reshape(rows, d).T @ df1.reshape(rows, F)
                meter.add_dw(slot(nm("ffn.w1")), costs.matmul(d, rows, F))
        dh2 = None
        if df1 is not None and prop(nm("ffn.w1")):
            dh2 = df1 @ w["ffn.w1"].T
            meter.add_dy(slot(nm("ffn.w1")), costs.matmul(rows, F, d))

        # LayerNorm 2
        dres1 = None
        if dh2 is not None:
            if want_dw(nm("ln2.bias")):
                grads[nm("ln2.bias")] = dh2.reshape(rows, d).sum(axis=0)
                meter.add_dw(slot(nm("ln2.bias")), costs.ln_dbeta(rows, d))
            if want_dw(nm("ln2.gain")):
                grads[nm("ln2.gain")] = (dh2 * rec["xhat2"]).reshape(rows, d).sum(axis=0)
                meter.add_dw(slot(nm("ln2.gain")), costs.ln_dgamma(rows, d))
            if prop(nm("ln2.gain")):
                dxhat2 = dh2 * w["ln2.gain"]
                meter.add_dy(slot(nm("ln2.gain")), costs.ln_dxhat(rows, d))
                if arr(nm("attn.b_o")):
                    # normalization backward + residual merge, arrival at b_o
                    dres1 = g + _ln_norm_bwd(dxhat2, rec["xhat2"], rec["rstd2"])
                    meter.add_dy(slot(nm("attn.b_o")),
                                 costs.ln_norm_bwd(rows, d) + costs.residual_add(rows, d))

        # MHA output projection
        dO = None
        if dres1 is not None:
            if want_dw(nm("attn.b_o")):
                grads[nm("attn.b_o")] = dres1.reshape(rows, d).sum(axis=0)
                meter.add_dw(slot(nm("attn.b_o")), costs.bias_grad(rows, d))
            if want_dw(nm("attn.w_o")):
                grads[nm("attn.w_o")] = rec["Oc"].reshape(rows, d).T @ dres1.reshape(rows, d)
                meter.add_dw(slot(nm("attn.w_o")), costs.matmul(d, rows, d))
            if prop(nm("attn.w_o")):
                dO = dres1 @ w["attn.w_o"].T
                meter.add_dy(slot(nm("attn.w_o")), costs.matmul(rows, d, d))

        # attention core backward: arrival work attributed to W_V's slot
        dq = dk = dv = None
        if dO is not None and arr(nm("attn.w_v")):
            dOh = dO.reshape(B, n, h, dh).transpose(0, 2, 1, 3)
            A, qh, kh, vh = rec["A"], rec["qh"], rec["kh"], rec["vh"]
            dV = A.transpose(0, 1, 3, 2) @ dOh
            dA = dOh @ vh.transpose(0, 1, 3, 2)
            dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
            dS = dS / math.sqrt(dh)
            dQ = dS @ kh
            dK = dS.transpose(0, 1, 3, 2) @ qh
            meter.add_dy(slot(nm("attn.w_v")), costs.mha_core_bwd(B, h, n, dh))

            def flat(a):
                return a.transpose(0, 2, 1, 3).reshape(B, n, d)

            dq, dk, dv = flat(dQ), flat(dK), flat(dV)

        dhsum = None
        if dv is not None:
            if want_dw(nm("attn.w_v")):
                grads[nm("attn.w_v")] = rec["h1"].reshape(rows, d).T @ dv.reshape(rows, d)
                meter.add_dw(slot(nm("attn.w_v")), costs.matmul(d, rows, d))
            if prop(nm("attn.w_v")):
                dhsum = dv @ w["attn.w_v"].T
                meter.add_dy(slot(nm("attn.w_v")), costs.matmul(rows, d, d))
            if want_dw(nm("attn.b_v")):
                grads[nm("attn.b_v")] = dv.reshape(rows, d).sum(axis=0)
                meter.add_dw(slot(nm("attn.b_v")), costs.bias_grad(rows, d))
            for proj, dproj in (("k", dk), ("q", dq)):
                wname, bname = nm(f"attn.w_{proj}"), nm(f"attn.b_{proj}")
                if want_dw(wname):
                    grads[wname] = rec["h1"].reshape(rows, d).T @ dproj.reshape(rows, d)
                    meter.add_dw(slot(wname), costs.matmul(d, rows, d))
                if prop(wname):
                    dhsum = dhsum + dproj @ w[f"attn.w_{proj}"].T
                    meter.add_dy(slot(wname),
                                 costs.matmul(rows, d, d) + costs.residual_add(rows, d))
                if want_dw(bname):
                    grads[bname] = dproj.reshape(rows, d).sum(axis=0)
                    meter.add_dw(slot(bname), costs.bias_grad(rows, d))

        # LayerNorm 1
        dx_in = None
        if dhsum is not None:
            if want_dw(nm("ln1.bias")):
                grads[nm("ln1.bias")] = dhsum.reshape(rows, d).sum(axis=0)
                meter.add_dw(slot(nm("ln1.bias")), costs.ln_dbeta(rows, d))
            if want_dw(nm("ln1.gain")):
                grads[nm("ln1.gain")] = (dhsum * rec["xhat1"]).reshape(rows, d).sum(axis=0)
                meter.add_dw(slot(nm("ln1.gain")), costs.ln_dgamma(rows, d))
            dxhat1 = None
            if prop(nm("ln1.gain")):
                dxhat1 = dhsum * w["ln1.gain"]
                meter.add_dy(slot(nm("ln1.gain")), costs.ln_dxhat(rows, d))
            need_deeper = (arr(f"block{b - 1}.ffn.b2") if b > 0
                           else embed_selected and tied_flow)
            if dxhat1 is not None and need_deeper:
                dx_in = dres1 + _ln_norm_bwd(dxhat1, rec["xhat1"], rec["rstd1"])
                norm_cost = costs.ln_norm_bwd(rows, d) + costs.residual_add(rows, d)
                if b > 0:
                    # arrival work for the deeper block's shallowest slot
                    meter.add_dy(slot(f"block{b - 1}.ffn.b2"), norm_cost)
                else:
                    # input-side arrival: charged to the tied embedding's update
                    meter.add_dw(embed_slot, norm_cost)
        dres = dx_in

    # input-side scatter into the tied embedding; with truncated flow (early
    # stopped evaluation) the gradient stays output-side only
    if embed_selected:
        if tied_flow:
            if dx_in is None:
                raise AssertionError("tied flow requested but input was not reached")
            flat = dx_in.reshape(rows, d)
            np.add.at(dE, batch.tokens.reshape(rows), flat)
            meter.add_dw(embed_slot, costs.embed_scatter_bwd(rows, d))
            if collect_aux:
                aux["dx_in"] = dx_in
        grads["embed"] = dE

    if collect_aux:
        return grads, meter, aux
    return grads, meter


# ---- loss-only helpers and finite differences ------------------------------


def loss_only(graph: ModelGraph, weights: dict, batch) -> float:
    loss, _, _ = forward(graph, weights, batch)
    return loss


def finite_diff_grad(graph, weights, batch, tensor_name: str, probe_count: int,
                     step: float = 1e-3, seed: int = 0):
    """Central-difference gradient samples on random coordinates of one tensor.

    Returns (flat_indices, estimates).
    """
    if probe_count < 1:
        raise InputError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    w = weights[tensor_name]
    size = w.size
    idx = rng.choice(size, size=min(probe_count, size), replace=False)
    est = np.empty(idx.shape[0])
    flat = w.reshape(-1)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_only(graph, weights, batch)
        flat[i] = orig - step
        lm = loss_only(graph, weights, batch)
        flat[i] = orig
        est[j] = (lp - lm) / (2.0 * step)
    return idx, est


def central_difference(f, x: float, step: float) -> float:
    """Plain scalar central difference, exposed for oracle tests."""
    return (f(x + step) - f(x - step)) / (2.0 * step)


# ---- checkpointing ---------------------------------------------------------


def save_weights(path_prefix: str, weights: dict) -> None:
    """Flat little-endian float64 binary plus a JSON sidecar of names/shapes."""
    names = sorted(weights)
    sidecar = [{"name": k, "shape": list(weights[k].shape)} for k in names]
    with open(path_prefix + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    flat = np.concatenate([weights[k].reshape(-1) for k in names])
    flat.astype("<f8").tofile(path_prefix + ".bin")


def load_weights(path_prefix: str) -> dict:
    with open(path_prefix + ".json") as fh:
        sidecar = json.load(fh)
    flat = np.fromfile(path_prefix + ".bin", dtype="<f8")
    out = {}
    off = 0
    for entry in sidecar:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        out[entry["name"]] = flat[off : off + size].reshape(shape).copy()
        off += size
    return out
