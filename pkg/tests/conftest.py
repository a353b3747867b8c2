"""Shared builders for hand-written traces and generated fixtures."""

import numpy as np
import pytest

from modkv import AttentionTrace, SyntheticTraceSpec, TraceHeader, generate_synthetic


def labels_from(spec, n):
    """'tvt' style strings, bool sequences, or None (all text) -> bool array."""
    if spec is None:
        return np.zeros(n, dtype=bool)
    if isinstance(spec, str):
        return np.array([c == "v" for c in spec], dtype=bool)
    return np.asarray(spec, dtype=bool)


def make_trace(rows, labels=None, decode=(), tile=(1, 1), validate=True):
    """Build a trace whose every (layer, head) shares one causal triangle.

    rows: list of causal rows, row i holding i+1 entries. decode: one vector
    per step, step s holding len(rows)+s entries. tile replicates the pattern
    across (layers, heads).
    """
    L, H = tile
    n = len(rows)
    prefill = np.zeros((L, H, n, n), dtype=np.float32)
    for i, row in enumerate(rows):
        prefill[:, :, i, : len(row)] = np.asarray(row, dtype=np.float32)
    dec = []
    for s, vec in enumerate(decode):
        arr = np.zeros((L, H, n + s), dtype=np.float32)
        arr[:, :] = np.asarray(vec, dtype=np.float32)
        dec.append(arr)
    header = TraceHeader(L, H, n, len(dec), labels_from(labels, n))
    trace = AttentionTrace(header, prefill, dec)
    if validate:
        trace.validate()
    return trace


def uniform_rows(n):
    """Causal rows where row i spreads its mass evenly over positions 0..i."""
    return [[1.0 / (i + 1)] * (i + 1) for i in range(n)]


def small_spec(seed, layers=2, heads=2, prompt_len=24, steps=2, skew=1.2,
               mix=0.5, bias=0.5):
    return SyntheticTraceSpec(
        num_layers=layers,
        num_heads=heads,
        prompt_len=prompt_len,
        num_decode_steps=steps,
        skew=skew,
        modality_mix=mix,
        head_preference_bias=bias,
        seed=seed,
    )


@pytest.fixture
def mixed_trace():
    """A small two-layer trace with one visual-leaning and one text-leaning head."""
    return generate_synthetic(small_spec(9, bias=(0.8, 0.2)))


@pytest.fixture
def text_only_trace():
    return generate_synthetic(small_spec(5, mix=0.0, bias=0.0))
