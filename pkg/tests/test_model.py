"""Synthetic tasks, initialization, and accuracy metric."""

import numpy as np
import pytest

from adaptive_bp.errors import ConfigError
from adaptive_bp.graph import TensorKind
from adaptive_bp.model import (BOS, EOS, PAD, REV, SEP, ToyModelConfig,
                               batch_accuracy, build_toy_decoder, synth_batch)
from conftest import TOY_DIMS


def test_init_layout_and_values():
    graph, weights = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=0))
    assert set(weights) == {t.name for t in graph.tensors}
    for t in graph.tensors:
        w = weights[t.name]
        assert w.shape == t.shape
        assert w.dtype == np.float64
        if t.kind == TensorKind.LN_GAIN:
            assert (w == 1.0).all()
        elif t.kind in (TensorKind.BIAS, TensorKind.LN_BIAS):
            assert (w == 0.0).all()
        else:
            assert abs(w.std() - 0.02) < 0.01


def test_init_is_seeded():
    _, a = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=5))
    _, b = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=5))
    _, c = build_toy_decoder(ToyModelConfig(TOY_DIMS, seed=6))
    assert np.array_equal(a["embed"], b["embed"])
    assert not np.array_equal(a["embed"], c["embed"])


def test_copy_task_layout():
    batch = synth_batch("copy", TOY_DIMS, 8, seed=1, index=0)
    for i in range(8):
        row = batch.tokens[i]
        assert row[0] == BOS
        sep = np.flatnonzero(row == SEP)
        assert sep.size == 1
        L = int(sep[0]) - 1
        payload = row[1 : L + 1]
        answer = row[L + 2 : 2 * L + 2]
        assert (payload >= 5).all() and (payload < TOY_DIMS.vocab).all()
        np.testing.assert_array_equal(answer, payload)
        assert row[2 * L + 2] == EOS
        assert (row[2 * L + 3:] == PAD).all()
        # labels are tokens shifted left; loss covers answer plus EOS
        np.testing.assert_array_equal(batch.labels[i, : 2 * L + 2],
                                      row[1 : 2 * L + 3])
        expected_mask = np.zeros(TOY_DIMS.n)
        expected_mask[L + 1 : 2 * L + 2] = 1.0
        np.testing.assert_array_equal(batch.loss_mask[i], expected_mask)


def test_reverse_task_layout():
    batch = synth_batch("reverse", TOY_DIMS, 8, seed=1, index=0)
    for i in range(8):
        row = batch.tokens[i]
        sep = int(np.flatnonzero(row == SEP)[0])
        L = sep - 1
        np.testing.assert_array_equal(row[L + 2 : 2 * L + 2],
                                      row[1 : L + 1][::-1])


def test_mix_task_is_unambiguous():
    """Reverse rows carry the REV delimiter, copy rows SEP."""
    batch = synth_batch("mix", TOY_DIMS, 64, seed=2, index=0)
    saw = set()
    for i in range(64):
        row = batch.tokens[i]
        delim_pos = np.flatnonzero((row == SEP) | (row == REV))
        assert delim_pos.size == 1
        j = int(delim_pos[0])
        L = j - 1
        payload = row[1 : L + 1]
        answer = row[L + 2 : 2 * L + 2]
        if row[j] == SEP:
            np.testing.assert_array_equal(answer, payload)
            saw.add("copy")
        else:
            np.testing.assert_array_equal(answer, payload[::-1])
            saw.add("reverse")
    assert saw == {"copy", "reverse"}


def test_charlm_task():
    batch = synth_batch("charlm", TOY_DIMS, 8, seed=3, index=0)
    assert (batch.tokens >= 5).all() and (batch.tokens < TOY_DIMS.vocab).all()
    np.testing.assert_array_equal(batch.labels[:, :-1], batch.tokens[:, 1:])
    assert batch.loss_mask[:, :-1].all() and not batch.loss_mask[:, -1].any()


def test_batches_are_deterministic_and_indexed():
    a = synth_batch("copy", TOY_DIMS, 4, seed=0, index=7)
    b = synth_batch("copy", TOY_DIMS, 4, seed=0, index=7)
    c = synth_batch("copy", TOY_DIMS, 4, seed=0, index=8)
    d = synth_batch("reverse", TOY_DIMS, 4, seed=0, index=7)
    assert np.array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, c.tokens)
    assert not np.array_equal(a.tokens, d.tokens)


def test_unknown_task_rejected():
    with pytest.raises(ConfigError):
        synth_batch("sort", TOY_DIMS, 4, seed=0, index=0)


def test_batch_accuracy():
    batch = synth_batch("copy", TOY_DIMS, 4, seed=0, index=0)
    V = TOY_DIMS.vocab
    perfect = np.eye(V)[batch.labels]
    assert batch_accuracy(perfect, batch) == 1.0
    wrong = np.eye(V)[(batch.labels + 1) % V]
    assert batch_accuracy(wrong, batch) == 0.0
