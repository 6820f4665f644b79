"""Shared FLOP-count formulas for every operator the engine executes.

Both the execution meter (engine) and the analytical profiler read these
formulas, so predicted and measured counts can only diverge through wrong
attribution or wrong selection logic, never through a mismatched op-cost
convention.

Convention: 1 multiply = 1 FLOP, 1 add = 1 FLOP (so a matmul of (m,k)x(k,n)
costs 2mkn); exp, log, tanh, sqrt and divide count 1 FLOP per scalar.
"""

GELU_FWD_PER_ELT = 9
GELU_BWD_PER_ELT = 13


def matmul(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def bias_add(rows: int, width: int) -> int:
    return rows * width


def bias_grad(rows: int, width: int) -> int:
    # column-wise reduction of the incoming gradient
    return rows * width


def residual_add(rows: int, width: int) -> int:
    return rows * width


def ln_fwd(rows: int, d: int) -> int:
    # mean, center, variance, rstd, normalize, scale-and-shift
    return rows * (6 * d + 5)


def ln_dbeta(rows: int, d: int) -> int:
    return rows * d


def ln_dgamma(rows: int, d: int) -> int:
    # elementwise product with the normalized input, then reduce
    return 2 * rows * d


def ln_dxhat(rows: int, d: int) -> int:
    return rows * d


def ln_norm_bwd(rows: int, d: int) -> int:
    # propagate through the normalization itself (two row means, recombine)
    return rows * (6 * d + 2)


def gelu_fwd(count: int) -> int:
    return GELU_FWD_PER_ELT * count


def gelu_bwd(count: int) -> int:
    return GELU_BWD_PER_ELT * count


def mha_core_fwd(b: int, h: int, n: int, dh: int) -> int:
    # scores matmul + scale + causal softmax (6 ops/entry) + value matmul
    return b * h * (4 * n * n * dh + 7 * n * n)


def mha_core_bwd(b: int, h: int, n: int, dh: int) -> int:
    # dV, dA matmuls + softmax Jacobian action (4 ops/entry) + scale
    # + dQ, dK matmuls
    return b * h * (8 * n * n * dh + 5 * n * n)


def ce_fwd(rows: int, vocab: int) -> int:
    # stable softmax (5 ops/entry) + per-row log pick and masking + mean
    return rows * (5 * vocab + 2) + 2 * rows + 1


def ce_bwd(rows: int, vocab: int) -> int:
    # probs minus one-hot, scaled by mask / denom
    return rows * (vocab + 2)


def mse_fwd(rows: int, width: int) -> int:
    # diff, square, accumulate, normalize
    return 3 * rows * width + 1


def mse_bwd(rows: int, width: int) -> int:
    return 2 * rows * width


def embed_scatter_bwd(rows: int, d: int) -> int:
    # scatter-add of row gradients into the embedding table
    return rows * d
