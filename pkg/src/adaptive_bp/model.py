"""Toy decoder construction, weight init, and synthetic task generators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Batch, ChainBatch
from .errors import ConfigError
from .graph import ModelDims, ModelGraph, build_dense_chain_graph, build_graph

PAD, BOS, SEP, EOS, REV = 0, 1, 2, 3, 4
_RESERVED = 5

TASKS = ("copy", "reverse", "mix", "charlm")

INIT_STD = 0.02


@dataclass(frozen=True)
class ToyModelConfig:
    dims: ModelDims
    seed: int = 0


def init_weights(graph: ModelGraph, seed: int) -> dict:
    """Gaussian(0, 0.02) matrices, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    weights = {}
    for t in graph.tensors:
        kind = t.kind.value
        if kind in ("tied_embedding", "linear_weight"):
            weights[t.name] = rng.normal(0.0, INIT_STD, size=t.shape)
        elif kind == "ln_gain":
            weights[t.name] = np.ones(t.shape)
        else:  # bias, ln_bias
            weights[t.name] = np.zeros(t.shape)
    return weights


def build_toy_decoder(config: ToyModelConfig) -> tuple[ModelGraph, dict]:
    graph = build_graph(config.dims)
    return graph, init_weights(graph, config.seed)


def build_chain(widths, seed: int = 0) -> tuple[ModelGraph, dict]:
    graph = build_dense_chain_graph(list(widths))
    rng = np.random.default_rng(seed)
    weights = {
        t.name: rng.normal(0.0, 1.0 / np.sqrt(t.shape[0]), size=t.shape)
        for t in graph.tensors
    }
    return graph, weights


def chain_batch(widths, rows: int, seed: int = 0) -> ChainBatch:
    rng = np.random.default_rng(seed)
    return ChainBatch(
        x=rng.normal(size=(rows, widths[0])),
        target=rng.normal(size=(rows, widths[-1])),
    )


# ---- sequence tasks --------------------------------------------------------


def _task_key(kind: str) -> int:
    return int.from_bytes(kind.encode(), "big") % (2**31)


def _task_rng(kind: str, seed: int, index: int) -> np.random.Generator:
    # deterministic in (kind, seed, index) and independent across indices
    return np.random.default_rng([_task_key(kind), seed, index])


def synth_batch(kind: str, dims: ModelDims, batch_size: int, seed: int,
                index: int, max_payload: int = 8) -> Batch:
    """One deterministic batch of the named synthetic task.

    copy/reverse: BOS payload SEP answer EOS, loss on the answer+EOS span.
    charlm: next-token prediction on a fixed stochastic bigram process.
    """
    if kind not in TASKS:
        raise ConfigError(f"unknown task {kind!r}; expected one of {TASKS}")
    if dims.vocab <= _RESERVED:
        raise ConfigError("task vocabulary needs at least 6 symbols")
    rng = _task_rng(kind, seed, index)
    B, n = batch_size, dims.n
    tokens = np.full((B, n), PAD, dtype=np.int64)
    labels = np.full((B, n), PAD, dtype=np.int64)
    mask = np.zeros((B, n))

    if kind == "charlm":
        # bigram transition table fixed by the seed alone, shared across batches
        trng = np.random.default_rng([_task_key(kind), seed])
        V = dims.vocab - _RESERVED
        trans = trng.dirichlet(np.ones(V) * 0.3, size=V)
        seq = np.empty((B, n), dtype=np.int64)
        seq[:, 0] = rng.integers(V, size=B)
        for t in range(1, n):
            u = rng.random(B)
            seq[:, t] = (trans[seq[:, t - 1]].cumsum(axis=1) > u[:, None]).argmax(axis=1)
        tokens[:] = seq + _RESERVED
        labels[:, :-1] = tokens[:, 1:]
        mask[:, :-1] = 1.0
        return Batch(tokens=tokens, labels=labels, loss_mask=mask)

    max_len = min(max_payload, (n - 3) // 2)
    if max_len < 1:
        raise ConfigError(f"sequence length n={n} too short for {kind}")
    payload_vocab = dims.vocab - _RESERVED
    for i in range(B):
        L = int(rng.integers(1, max_len + 1))
        payload = rng.integers(payload_vocab, size=L) + _RESERVED
        row_kind = kind
        if kind == "mix":  # per-row coin flip between the two echo tasks
            row_kind = "copy" if rng.random() < 0.5 else "reverse"
        answer = payload if row_kind == "copy" else payload[::-1]
        # in the mixture, reverse rows carry their own delimiter so the task
        # is identified before the answer starts
        delim = REV if (kind == "mix" and row_kind == "reverse") else SEP
        row = np.concatenate(([BOS], payload, [delim], answer, [EOS]))
        tokens[i, : row.size] = row
        labels[i, : row.size - 1] = row[1:]
        # supervise predictions of the answer and EOS (positions SEP .. end-1)
        mask[i, L + 1 : 2 * L + 2] = 1.0
    return Batch(tokens=tokens, labels=labels, loss_mask=mask)


def batch_accuracy(probs_or_logits: np.ndarray, batch: Batch) -> float:
    """Fraction of supervised positions predicted correctly (argmax)."""
    pred = probs_or_logits.argmax(axis=-1)
    hits = (pred == batch.labels) * batch.loss_mask
    return float(hits.sum() / batch.loss_mask.sum())
