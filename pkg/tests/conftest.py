"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's computation paths:
dense materialization uses explicit loops or plain numpy expressions,
and the policy reference re-implements the decision branches naively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from kmerge.adapters import PROJECTIONS, FactorPair, LayerKey, LoraAdapter


def make_adapter(task_id, layer_arrays, rank, scale_numerator, problem_type="t", language="l"):
    """Adapter from {LayerKey: (a, b)} float arrays."""
    layers = {
        key: FactorPair(a=np.asarray(a, dtype=np.float32), b=np.asarray(b, dtype=np.float32))
        for key, (a, b) in layer_arrays.items()
    }
    return LoraAdapter(
        task_id=task_id,
        problem_type=problem_type,
        language=language,
        rank=rank,
        scale_numerator=scale_numerator,
        layers=layers,
    )


def small_random_adapter(task_id, rng, rank=2, n_keys=2, width=8, scale_numerator=None):
    """Tiny unstructured adapter for oracle comparisons."""
    if scale_numerator is None:
        scale_numerator = float(rank)  # unit applied scaling
    keys = [LayerKey(i // len(PROJECTIONS), PROJECTIONS[i % len(PROJECTIONS)]) for i in range(n_keys)]
    layers = {
        key: (
            rng.standard_normal((rank, width)),
            rng.standard_normal((width, rank)),
        )
        for key in keys
    }
    return make_adapter(task_id, layers, rank, scale_numerator)


# -- dense oracles ---------------------------------------------------------

def dense_delta(adapter, key):
    fp = adapter.layers[key]
    scale = adapter.scale_numerator / adapter.rank
    return scale * (fp.b.astype(np.float64) @ fp.a.astype(np.float64))


def dense_delta_map(adapter):
    return {key: dense_delta(adapter, key) for key in adapter.layers}


def dense_cosine(x, y, key):
    vx = dense_delta(x, key).reshape(-1)
    vy = dense_delta(y, key).reshape(-1)
    nx, ny = np.linalg.norm(vx), np.linalg.norm(vy)
    if nx < 1e-12 or ny < 1e-12:
        return 0.0
    return float(vx @ vy / (nx * ny))


def dense_adapter_similarity(x, y):
    return float(np.mean([dense_cosine(x, y, key) for key in x.layers]))


def naive_matmul(b, a):
    """Triple-loop product, independent of numpy matmul."""
    d_out, r = b.shape
    _, d_in = a.shape
    out = np.zeros((d_out, d_in))
    for i in range(d_out):
        for j in range(d_in):
            acc = 0.0
            for k in range(r):
                acc += float(b[i, k]) * float(a[k, j])
            out[i, j] = acc
    return out


def naive_ties(vectors, density):
    """Literal trim / elect / disjoint-mean on a list of 1-D arrays."""
    m = len(vectors)
    n = vectors[0].size
    k = math.ceil(density * n)
    trimmed = []
    for v in vectors:
        ranked = sorted(range(n), key=lambda i: (-abs(v[i]), i))
        keep = set(ranked[:k])
        trimmed.append(np.array([v[i] if i in keep else 0.0 for i in range(n)]))
    out = np.zeros(n)
    for i in range(n):
        total = sum(t[i] for t in trimmed)
        elected = 1.0 if total >= 0 else -1.0
        matching = [t[i] for t in trimmed if np.sign(t[i]) == elected]
        out[i] = sum(matching) / len(matching) if matching else 0.0
    return out


# -- naive policy reference ------------------------------------------------

@dataclass
class NaiveState:
    adapters: dict  # slot_key -> LoraAdapter (stored form, updated externally)
    history: dict   # slot_key -> list of task indices
    next_key: int = 1


def naive_policy_step(state, incoming, variant, budget_k, threshold_s):
    """Branch of the decision rule, re-implemented literally.

    Returns (action, slot_key, similarity-or-None). The caller is
    responsible for refreshing stored adapters after a merge, mirroring
    whatever the system under test holds.
    """
    occupied = len(state.adapters)
    best_key, best_sim = None, None
    if occupied > 0:
        for slot_key in sorted(state.adapters):
            sim = dense_adapter_similarity(incoming, state.adapters[slot_key])
            if best_sim is None or sim > best_sim:
                best_key, best_sim = slot_key, sim
    if variant == "k_merge":
        merge = occupied >= budget_k
    else:
        merge = occupied == budget_k or (occupied > 0 and best_sim >= threshold_s)
    if merge:
        return "merged_into", best_key, best_sim
    key = state.next_key
    state.next_key += 1
    return "allocated_new_slot", key, None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when that suite ran."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
