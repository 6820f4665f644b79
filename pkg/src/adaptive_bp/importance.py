"""First-order tensor importance.

For each tensor the score is the predicted one-step loss decrease
I_k = -sum(delta_w_k * grad_k), where delta_w_k is the update the current
optimizer would apply.  Evaluation backward passes are truncated at a depth
beyond which no tensor can fit the training budget anyway (the cumulative dy
cost of merely reaching deeper slots already exceeds it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import backward_full, forward
from .errors import NumericError
from .profiler import FlopsProfile


@dataclass
class ImportanceVector:
    raw: np.ndarray  # slot-indexed (1-based); NaN where not evaluated
    values: np.ndarray  # normalized to max |.| == 1; NaN where not evaluated
    evaluated_depth: int
    scale: float  # the max-amplitude divisor
    degenerate: bool  # all evaluated scores were zero

    def evaluated_slots(self) -> np.ndarray:
        return np.arange(1, self.evaluated_depth + 1)


def early_stop_depth(profile: FlopsProfile, rho: float) -> int:
    """Deepest slot still worth evaluating under budget fraction rho.

    A slot is hopeless once the dy cost of slots shallower than it already
    reaches rho * T_full; the returned depth is the largest that is not.
    """
    budget = rho * profile.T_full
    prefix = np.cumsum(profile.t_dy[1:])  # prefix[i] = dy cost of slots 1..i+1
    depth = 1
    for k in range(2, profile.n_tensors + 1):
        if prefix[k - 2] < budget:
            depth = k
        else:
            break
    return depth


def tensor_importance(graph, weights, grads, optimizer) -> np.ndarray:
    """Raw slot-indexed scores for every tensor present in grads."""
    raw = np.full(len(graph) + 1, np.nan)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        delta = optimizer.peek_delta(name, weights[name], g)
        raw[graph.slot(name)] = -float(np.sum(delta * g))
    if not np.all(np.isfinite(raw[~np.isnan(raw)])):
        raise NumericError("non-finite importance score")
    return raw


def normalize(raw: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Scale scores so the largest magnitude is 1; flags the all-zero case."""
    evaluated = ~np.isnan(raw)
    scale = float(np.max(np.abs(raw[evaluated]))) if evaluated.any() else 0.0
    if scale == 0.0:
        return np.where(evaluated, 0.0, np.nan), 0.0, True
    return raw / scale, scale, False


def evaluate_importance(graph, weights, batch, optimizer, profile: FlopsProfile,
                        rho: float):
    """One truncated forward/backward to score tensors.

    Returns (ImportanceVector, loss, fwd_meter, bwd_meter); the meters carry
    the evaluation's own FLOPs so callers can charge them to the run total.
    """
    depth = early_stop_depth(profile, rho)
    loss, tape, fwd_meter = forward(graph, weights, batch)
    grads, bwd_meter = backward_full(tape, max_depth=depth)
    raw = tensor_importance(graph, weights, grads, optimizer)
    values, scale, degenerate = normalize(raw)
    vec = ImportanceVector(raw=raw, values=values, evaluated_depth=depth,
                           scale=scale, degenerate=degenerate)
    return vec, loss, fwd_meter, bwd_meter


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x), dtype=float)
        # average out tied groups so equal values share a rank
        for v in np.unique(x):
            sel = x == v
            r[sel] = r[sel].mean()
        return r

    ra, rb = ranks(np.asarray(a, dtype=float)), ranks(np.asarray(b, dtype=float))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return 0.0
    return float(ra @ rb) / denom


def undo_oracle(graph, weights, batch, grads, optimizer, eps: float) -> np.ndarray:
    """Measured loss change from applying each tensor's update scaled by eps.

    For small eps, result[slot] should approximate -eps * raw_importance[slot].
    Weights are restored exactly after each probe (add then subtract is not
    exact in floating point, so the original array is reinstated).
    """
    from .engine import loss_only

    base = loss_only(graph, weights, batch)
    out = np.full(len(graph) + 1, np.nan)
    for name, g in grads.items():
        delta = optimizer.peek_delta(name, weights[name], g)
        original = weights[name]
        weights[name] = original + eps * delta
        out[graph.slot(name)] = loss_only(graph, weights, batch) - base
        weights[name] = original
    return out
