"""Pure numpy versions of the compiled kernels (same signatures, same results).

Large batches are processed in row chunks to bound temporary memory.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

_CHUNK_ELEMS = 4_000_000


def _wrap(x):
    return np.mod(x + np.pi, 2.0 * np.pi) - np.pi


def _chunks(n: int, k: int):
    step = max(1, _CHUNK_ELEMS // max(k, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def _scatter_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``target[idx] += rows`` with repeated indices accumulated."""
    m = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))),
                          shape=(target.shape[0], len(idx)))
    target += m @ rows


def kge_forward(ent_re, ent_im, rel_a, rel_b, heads, rels, tails, backend, norm):
    n, k = len(heads), ent_re.shape[1]
    out = np.empty(n, dtype=np.float64)
    for sl in _chunks(n, k):
        h, r, t = heads[sl], rels[sl], tails[sl]
        if backend == 0:
            hr, hi = ent_re[h], ent_im[h]
            c, s = rel_a[r], rel_b[r]
            a = hr * c - hi * s - ent_re[t]
            b = hr * s + hi * c - ent_im[t]
            sq = a * a + b * b
            out[sl] = np.sqrt(sq).sum(axis=1) if norm == 1 else np.sqrt(sq.sum(axis=1))
        else:
            a = ent_re[h] + rel_a[r] - ent_re[t]
            out[sl] = np.abs(a).sum(axis=1) if norm == 1 else np.sqrt((a * a).sum(axis=1))
    return out


def kge_backward(ent_re, ent_im, rel_a, rel_b, heads, rels, tails, coef, dist, backend, norm,
                 g_re, g_im, g_rel):
    n, k = len(heads), ent_re.shape[1]
    for sl in _chunks(n, k):
        keep = np.flatnonzero(coef[sl] != 0.0) + sl.start
        if len(keep) == 0:
            continue
        h, r, t, w = heads[keep], rels[keep], tails[keep], coef[keep][:, None]
        if backend == 0:
            c, s = rel_a[r], rel_b[r]
            hr, hi = ent_re[h], ent_im[h]
            rot_re = hr * c - hi * s
            rot_im = hr * s + hi * c
            a = rot_re - ent_re[t]
            b = rot_im - ent_im[t]
            if norm == 1:
                m = np.sqrt(a * a + b * b)
                safe = np.where(m == 0.0, 1.0, m)
                ga = np.where(m == 0.0, 0.0, w * a / safe)
                gb = np.where(m == 0.0, 0.0, w * b / safe)
            else:
                d = dist[keep][:, None]
                safe = np.where(d == 0.0, 1.0, d)
                ga = np.where(d == 0.0, 0.0, w * a / safe)
                gb = np.where(d == 0.0, 0.0, w * b / safe)
            _scatter_rows(g_re, h, ga * c + gb * s)
            _scatter_rows(g_im, h, -ga * s + gb * c)
            _scatter_rows(g_re, t, -ga)
            _scatter_rows(g_im, t, -gb)
            _scatter_rows(g_rel, r, -ga * rot_im + gb * rot_re)
        else:
            a = ent_re[h] + rel_a[r] - ent_re[t]
            if norm == 1:
                ga = w * np.sign(a)
            else:
                d = dist[keep][:, None]
                ga = np.where(d == 0.0, 0.0, w * a / np.where(d == 0.0, 1.0, d))
            _scatter_rows(g_re, h, ga)
            _scatter_rows(g_re, t, -ga)
            _scatter_rows(g_rel, r, ga)


def _rule_residual(rel, rule_emb, bodies, lengths, heads, rule_ids, positional, wrap):
    n, k = bodies.shape[0], rel.shape[1]
    x = np.zeros((n, k))
    for p in range(bodies.shape[1]):
        on = lengths > p
        if not on.any():
            break
        ang = rel[bodies[on, p]]
        if positional:
            if wrap:
                ang = _wrap(ang)
            x[on] += ang * rule_emb[rule_ids[on], p]
        else:
            x[on] += ang
    if not positional:
        x += rule_emb[rule_ids, 0]
    x -= rel[heads]
    return _wrap(x) if wrap else x


def rule_forward(rel, rule_emb, bodies, lengths, heads, rule_ids, positional, norm, wrap):
    n, k = bodies.shape[0], rel.shape[1]
    out = np.empty(n, dtype=np.float64)
    for sl in _chunks(n, k * bodies.shape[1]):
        x = _rule_residual(rel, rule_emb, bodies[sl], lengths[sl], heads[sl], rule_ids[sl], positional, wrap)
        out[sl] = np.abs(x).sum(axis=1) if norm == 1 else np.sqrt((x * x).sum(axis=1))
    return out


def rule_backward(rel, rule_emb, bodies, lengths, heads, rule_ids, positional, norm, wrap,
                  coef, dist, g_rel, g_rule):
    n, k = bodies.shape[0], rel.shape[1]
    for sl in _chunks(n, k * bodies.shape[1]):
        keep = np.flatnonzero(coef[sl] != 0.0) + sl.start
        if len(keep) == 0:
            continue
        b, ln, hd, rid = bodies[keep], lengths[keep], heads[keep], rule_ids[keep]
        x = _rule_residual(rel, rule_emb, b, ln, hd, rid, positional, wrap)
        w = coef[keep][:, None]
        if norm == 1:
            g = w * np.sign(x)
        else:
            d = dist[keep][:, None]
            g = np.where(d == 0.0, 0.0, w * x / np.where(d == 0.0, 1.0, d))
        for p in range(b.shape[1]):
            on = ln > p
            if not on.any():
                break
            if positional:
                ang = rel[b[on, p]]
                if wrap:
                    ang = _wrap(ang)
                _scatter_rows(g_rel, b[on, p], g[on] * rule_emb[rid[on], p])
                flat = g_rule.reshape(g_rule.shape[0] * g_rule.shape[1], k)
                _scatter_rows(flat, rid[on] * g_rule.shape[1] + p, g[on] * ang)
            else:
                _scatter_rows(g_rel, b[on, p], g[on])
        if not positional:
            flat = g_rule.reshape(g_rule.shape[0] * g_rule.shape[1], k)
            _scatter_rows(flat, rid * g_rule.shape[1], g)
        _scatter_rows(g_rel, hd, -g)


def walk_counts(indptr, indices, num_relations, num_entities, start, body, excluded):
    excl = {tuple(e) for e in np.asarray(excluded).reshape(-1, 3).tolist()}
    frontier = {int(start): 1}
    for r in np.asarray(body).tolist():
        nxt: dict[int, int] = {}
        for node, c in frontier.items():
            row = node * num_relations + r
            for nb in indices[indptr[row]:indptr[row + 1]].tolist():
                if excl and (node, r, nb) in excl:
                    continue
                nxt[nb] = nxt.get(nb, 0) + c
        frontier = nxt
        if not frontier:
            break
    out = np.zeros(num_entities, dtype=np.int64)
    for node, c in frontier.items():
        out[node] = c
    return out


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
