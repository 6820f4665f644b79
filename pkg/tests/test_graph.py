"""Graph construction and mask algebra."""

import numpy as np
import pytest

from adaptive_bp.errors import ConfigError
from adaptive_bp.graph import (ModelDims, ModelGraph, TensorKind, as_mask,
                               build_dense_chain_graph, build_graph,
                               flow_limits, sigma)
from conftest import TOY_DIMS


def test_tensor_count_and_slot_order(toy_graph):
    assert len(toy_graph) == 3 + 16 * TOY_DIMS.blocks == 35
    names = toy_graph.names_in_bp_order()
    assert names[:3] == ["embed", "ln_f.bias", "ln_f.gain"]
    # the block nearest the loss is the last one
    assert names[3] == "block1.ffn.b2"
    assert names[19] == "block0.ffn.b2"
    assert names[-1] == "block0.ln1.gain"
    assert toy_graph.slot("embed") == 1
    assert toy_graph.tied_slots == (1,)


def test_shapes_and_kinds(toy_graph):
    d, f, v = TOY_DIMS.d, TOY_DIMS.ffn, TOY_DIMS.vocab
    assert toy_graph.by_name("embed").shape == (v, d)
    assert toy_graph.by_name("embed").kind == TensorKind.TIED_EMBEDDING
    assert toy_graph.by_name("block0.ffn.w1").shape == (d, f)
    assert toy_graph.by_name("block0.ffn.w2").shape == (f, d)
    assert toy_graph.by_name("block1.attn.w_q").shape == (d, d)
    assert toy_graph.by_name("ln_f.gain").kind == TensorKind.LN_GAIN
    assert toy_graph.by_name("block0.ln1.bias").kind == TensorKind.LN_BIAS
    # bp_index is contiguous from 1
    slots = sorted(t.bp_index for t in toy_graph.tensors)
    assert slots == list(range(1, len(toy_graph) + 1))


def test_dims_validation():
    with pytest.raises(ConfigError):
        ModelDims(blocks=1, d=30, h=4, ffn=8, vocab=16, n=8).validate()
    with pytest.raises(ConfigError):
        ModelDims(blocks=0, d=8, h=2, ffn=8, vocab=16, n=8).validate()
    with pytest.raises(ConfigError):
        ModelDims(blocks=1, d=8, h=2, ffn=8, vocab=3, n=8).validate()


def test_json_round_trip(toy_graph):
    clone = ModelGraph.from_json(toy_graph.to_json())
    assert len(clone) == len(toy_graph)
    assert clone.family == toy_graph.family
    assert clone.tied_slots == toy_graph.tied_slots
    for a, b in zip(toy_graph.tensors, clone.tensors):
        assert (a.name, a.kind, a.shape, a.bp_index) == \
            (b.name, b.kind, b.shape, b.bp_index)


def test_chain_graph_layout():
    g = build_dense_chain_graph((4, 8, 3))
    assert g.family == "chain"
    assert len(g) == 2
    assert g.names_in_bp_order() == ["layer2.w", "layer1.w"]
    assert g.by_name("layer2.w").shape == (8, 3)
    assert g.by_name("layer1.w").shape == (4, 8)
    assert g.tied_slots == ()
    with pytest.raises(ConfigError):
        build_dense_chain_graph((4,))


def test_sigma_is_prefix():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = rng.random(12) < 0.3
        s = sigma(m)
        idx = np.flatnonzero(m)
        if idx.size == 0:
            assert not s.any()
        else:
            assert s[: idx[-1] + 1].all() and not s[idx[-1] + 1:].any()


def test_as_mask_length_check(toy_graph):
    with pytest.raises(ConfigError):
        as_mask([1, 0], len(toy_graph))


def test_flow_limits(toy_graph):
    n = len(toy_graph)
    m = np.zeros(n, dtype=bool)
    assert flow_limits(toy_graph, m) == (0, 0, False)

    m[4] = True  # slot 5, not tied
    assert flow_limits(toy_graph, m, "inclusive") == (5, 5, False)
    assert flow_limits(toy_graph, m, "exclusive") == (5, 4, False)

    m[0] = True  # tied embedding forces full depth
    assert flow_limits(toy_graph, m, "inclusive") == (n, n, True)
    assert flow_limits(toy_graph, m, "exclusive") == (n, n, True)

    with pytest.raises(ConfigError):
        flow_limits(toy_graph, m, "sideways")
