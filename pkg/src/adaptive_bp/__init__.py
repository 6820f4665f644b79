"""FLOPs-budgeted selective backpropagation for a toy decoder-only transformer.

The pipeline: profile per-tensor backprop FLOPs, score tensors by how much
their hypothetical update would reduce the loss, then pick the trainable set
each epoch with a knapsack-style DP so per-batch training FLOPs stay under a
user budget.
"""

from .graph import (
    ModelDims,
    ModelGraph,
    TensorKind,
    TensorMeta,
    build_dense_chain_graph,
    build_graph,
    sigma,
)
from .profiler import FlopsProfile, profile_flops, selective_cost
from .selector import SelectionPlan, brute_force_select, dp_select, quantize

__all__ = [
    "ModelDims",
    "ModelGraph",
    "TensorKind",
    "TensorMeta",
    "build_graph",
    "build_dense_chain_graph",
    "sigma",
    "FlopsProfile",
    "profile_flops",
    "selective_cost",
    "SelectionPlan",
    "quantize",
    "dp_select",
    "brute_force_select",
]
