"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from adaptive_bp.graph import ModelDims, build_graph
from adaptive_bp.model import ToyModelConfig, build_toy_decoder, synth_batch


TOY_DIMS = ModelDims(blocks=2, d=32, h=2, ffn=64, vocab=32, n=20)


def random_synthetic_profile(rng, n, tied_prob=0.3, t_fp_scale=0.0):
    """Small random FlopsProfile for selector tests."""
    from adaptive_bp.profiler import FlopsProfile

    t_dy = rng.integers(1, 100, size=n).astype(np.int64)
    t_dw = rng.integers(1, 100, size=n).astype(np.int64)
    tied = (1,) if rng.random() < tied_prob else ()
    t_fp = int(t_fp_scale * (t_dy.sum() + t_dw.sum()))
    return FlopsProfile.synthetic(t_dy, t_dw, T_fp=t_fp, tied_slots=tied)


def random_values(rng, n):
    """Slot-indexed importance vector (index 0 unused)."""
    return np.concatenate([[np.nan], rng.random(n)])


@pytest.fixture(scope="session")
def toy_graph():
    return build_graph(TOY_DIMS)


@pytest.fixture(scope="session")
def toy_model():
    graph, weights = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=0))
    return graph, weights


@pytest.fixture()
def toy_batch():
    return synth_batch("copy", TOY_DIMS, 4, seed=0, index=0)
