import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_graph
from rulekg import _fallback
from rulekg.data import build_index

compiled = pytest.importorskip("rulekg._kernels", reason="compiled extension not built")


def _kge_inputs(rng, n_ent=9, n_rel=5, k=6, n=40):
    ent_re, ent_im = rng.normal(size=(n_ent, k)), rng.normal(size=(n_ent, k))
    rel = rng.uniform(-np.pi, np.pi, (n_rel, k))
    idx = [np.ascontiguousarray(rng.integers(0, m, n)) for m in (n_ent, n_rel, n_ent)]
    return ent_re, ent_im, rel, idx


@pytest.mark.parametrize("backend", [0, 1])
@pytest.mark.parametrize("norm", [1, 2])
def test_kge_parity(backend, norm):
    rng = np.random.default_rng(backend * 10 + norm)
    ent_re, ent_im, rel, (h, r, t) = _kge_inputs(rng)
    a, b = (np.cos(rel), np.sin(rel)) if backend == 0 else (rel, rel)
    a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    d1 = compiled.kge_forward(ent_re, ent_im, a, b, h, r, t, backend, norm)
    d2 = _fallback.kge_forward(ent_re, ent_im, a, b, h, r, t, backend, norm)
    assert np.allclose(d1, d2, rtol=1e-12, atol=1e-12)
    coef = rng.normal(size=len(h))
    grads = []
    for impl in (compiled, _fallback):
        g = [np.zeros_like(ent_re), np.zeros_like(ent_im), np.zeros_like(rel)]
        impl.kge_backward(ent_re, ent_im, a, b, h, r, t, coef, d1, backend, norm, *g)
        grads.append(g)
    for x, y in zip(*grads):
        assert np.allclose(x, y, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("positional", [0, 1])
@pytest.mark.parametrize("norm", [1, 2])
@pytest.mark.parametrize("wrap", [0, 1])
def test_rule_parity(positional, norm, wrap):
    rng = np.random.default_rng(positional * 100 + norm * 10 + wrap)
    n_rel, k, n_rules, p = 6, 5, 4, 3
    rel = rng.uniform(-4, 4, (n_rel, k))
    rules = rng.uniform(0.5, 1.5, (n_rules, p if positional else 1, k))
    lengths = rng.integers(1, 4, 30)
    bodies = np.full((30, 3), -1, dtype=np.int64)
    for i, l in enumerate(lengths):
        bodies[i, :l] = rng.integers(0, n_rel, l)
    heads = rng.integers(0, n_rel, 30)
    rids = rng.integers(0, n_rules, 30)
    args = (rel, rules, bodies, lengths, heads, rids, positional, norm, wrap)
    d1, d2 = compiled.rule_forward(*args), _fallback.rule_forward(*args)
    assert np.allclose(d1, d2, rtol=1e-12, atol=1e-12)
    coef = rng.normal(size=30)
    out = []
    for impl in (compiled, _fallback):
        gr, gu = np.zeros_like(rel), np.zeros_like(rules)
        impl.rule_backward(*args, coef, d1, gr, gu)
        out.append((gr, gu))
    assert np.allclose(out[0][0], out[1][0], rtol=1e-10, atol=1e-12)
    assert np.allclose(out[0][1], out[1][1], rtol=1e-10, atol=1e-12)


def test_walk_parity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        trip = random_graph(rng, 12, 3, 50)
        g = build_index(trip, 12, 6)
        body = rng.integers(0, 6, int(rng.integers(1, 4)))
        excl = trip[rng.integers(0, len(trip), 2)]
        for ex in (np.zeros((0, 3), dtype=np.int64), excl):
            args = (g.indptr, g.indices, 6, 12, int(rng.integers(12)), body, ex)
            assert np.array_equal(compiled.walk_counts(*args), _fallback.walk_counts(*args))


def test_adam_parity():
    rng = np.random.default_rng(4)
    p = rng.normal(size=21)
    g = rng.normal(size=21)
    states = []
    for impl in (compiled, _fallback):
        q, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
        for t in range(1, 4):
            impl.adam_step(q, g * t, m, v, 1e-2, 0.9, 0.999, 1e-8, t)
        states.append((q, m, v))
    for x, y in zip(*states):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-14)


def test_environment_forces_fallback():
    env = dict(os.environ, RULEKG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from rulekg import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
