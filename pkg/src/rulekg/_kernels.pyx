# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: KGE / rule distances with their gradients, walk counting.

Every function has a numpy twin with the same signature in ``_fallback.py``.
Loops are serial so results are reproducible bit-for-bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, floor, M_PI

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


cdef inline double _wrap(double x) noexcept nogil:
    cdef double y = x - 2.0 * M_PI * floor((x + M_PI) * (0.5 / M_PI))
    if y >= M_PI:
        y -= 2.0 * M_PI
    return y


cdef inline double _sign(double x) noexcept nogil:
    return <double>(x > 0) - <double>(x < 0)


def kge_forward(const f64[:, ::1] ent_re, const f64[:, ::1] ent_im,
                const f64[:, ::1] rel_a, const f64[:, ::1] rel_b,
                const i64[::1] heads, const i64[::1] rels, const i64[::1] tails,
                int backend, int norm):
    """Distances for N triplets. backend 0 = RotatE (rel_a=cos, rel_b=sin), 1 = TransE."""
    cdef Py_ssize_t n = heads.shape[0], k = ent_re.shape[1], i, j
    cdef double a, b, acc, hr, hi
    cdef const f64 *hre
    cdef const f64 *him
    cdef const f64 *tre
    cdef const f64 *tim
    cdef const f64 *ca
    cdef const f64 *sb
    out = np.empty(n, dtype=np.float64)
    cdef f64[::1] o = out
    if n == 0:
        return out
    with nogil:
        for i in range(n):
            hre = &ent_re[heads[i], 0]; tre = &ent_re[tails[i], 0]; ca = &rel_a[rels[i], 0]
            acc = 0.0
            if backend == 0:
                him = &ent_im[heads[i], 0]; tim = &ent_im[tails[i], 0]; sb = &rel_b[rels[i], 0]
                if norm == 1:
                    for j in range(k):
                        a = hre[j] * ca[j] - him[j] * sb[j] - tre[j]
                        b = hre[j] * sb[j] + him[j] * ca[j] - tim[j]
                        acc += sqrt(a * a + b * b)
                else:
                    for j in range(k):
                        a = hre[j] * ca[j] - him[j] * sb[j] - tre[j]
                        b = hre[j] * sb[j] + him[j] * ca[j] - tim[j]
                        acc += a * a + b * b
            else:
                if norm == 1:
                    for j in range(k):
                        acc += fabs(hre[j] + ca[j] - tre[j])
                else:
                    for j in range(k):
                        a = hre[j] + ca[j] - tre[j]
                        acc += a * a
            o[i] = acc if norm == 1 else sqrt(acc)
    return out


def kge_backward(const f64[:, ::1] ent_re, const f64[:, ::1] ent_im,
                 const f64[:, ::1] rel_a, const f64[:, ::1] rel_b,
                 const i64[::1] heads, const i64[::1] rels, const i64[::1] tails,
                 const f64[::1] coef, const f64[::1] dist, int backend, int norm,
                 f64[:, ::1] g_re, f64[:, ::1] g_im, f64[:, ::1] g_rel):
    """Accumulate ``sum_i coef[i] * d dist_i / d params`` into the gradient buffers.

    For RotatE the relation gradient is with respect to the phase angle.
    """
    cdef Py_ssize_t n = heads.shape[0], k = ent_re.shape[1], i, j
    cdef double a, b, m, c, s, ga, gb, w, rot_re, rot_im, scale
    cdef const f64 *hre
    cdef const f64 *him
    cdef const f64 *tre
    cdef const f64 *tim
    cdef const f64 *ca
    cdef const f64 *sb
    cdef f64 *ghre
    cdef f64 *ghim
    cdef f64 *gtre
    cdef f64 *gtim
    cdef f64 *gr
    if n == 0:
        return
    with nogil:
        for i in range(n):
            w = coef[i]
            if w == 0.0:
                continue
            hre = &ent_re[heads[i], 0]; tre = &ent_re[tails[i], 0]; ca = &rel_a[rels[i], 0]
            ghre = &g_re[heads[i], 0]; gtre = &g_re[tails[i], 0]; gr = &g_rel[rels[i], 0]
            if norm != 1:
                if dist[i] == 0.0:
                    continue
                scale = w / dist[i]
            if backend == 0:
                him = &ent_im[heads[i], 0]; tim = &ent_im[tails[i], 0]; sb = &rel_b[rels[i], 0]
                ghim = &g_im[heads[i], 0]; gtim = &g_im[tails[i], 0]
                for j in range(k):
                    c = ca[j]; s = sb[j]
                    rot_re = hre[j] * c - him[j] * s
                    rot_im = hre[j] * s + him[j] * c
                    a = rot_re - tre[j]
                    b = rot_im - tim[j]
                    if norm == 1:
                        m = sqrt(a * a + b * b)
                        if m == 0.0:
                            continue
                        ga = w * a / m; gb = w * b / m
                    else:
                        ga = scale * a; gb = scale * b
                    ghre[j] += ga * c + gb * s
                    ghim[j] += -ga * s + gb * c
                    gtre[j] -= ga
                    gtim[j] -= gb
                    gr[j] += -ga * rot_im + gb * rot_re
            else:
                if norm == 1:
                    for j in range(k):
                        ga = w * _sign(hre[j] + ca[j] - tre[j])
                        ghre[j] += ga
                        gtre[j] -= ga
                        gr[j] += ga
                else:
                    for j in range(k):
                        ga = scale * (hre[j] + ca[j] - tre[j])
                        ghre[j] += ga
                        gtre[j] -= ga
                        gr[j] += ga


cdef void _residual(const f64[:, ::1] rel, const f64[:, :, ::1] rule_emb, const i64[:, ::1] bodies,
                    Py_ssize_t i, i64 l, i64 hd, i64 rid, int positional, int wrap, f64 *x) noexcept nogil:
    cdef Py_ssize_t k = rel.shape[1], j, p
    cdef const f64 *row
    cdef const f64 *w
    if positional:
        for j in range(k):
            x[j] = 0.0
        for p in range(l):
            row = &rel[bodies[i, p], 0]
            w = &rule_emb[rid, p, 0]
            if wrap:
                for j in range(k):
                    x[j] += _wrap(row[j]) * w[j]
            else:
                for j in range(k):
                    x[j] += row[j] * w[j]
    else:
        w = &rule_emb[rid, 0, 0]
        for j in range(k):
            x[j] = w[j]
        for p in range(l):
            row = &rel[bodies[i, p], 0]
            for j in range(k):
                x[j] += row[j]
    row = &rel[hd, 0]
    for j in range(k):
        x[j] -= row[j]
    if wrap:
        for j in range(k):
            x[j] = _wrap(x[j])


def rule_forward(const f64[:, ::1] rel, const f64[:, :, ::1] rule_emb,
                 const i64[:, ::1] bodies, const i64[::1] lengths, const i64[::1] heads,
                 const i64[::1] rule_ids, int positional, int norm, int wrap):
    """Rule distances for N (possibly corrupted) rule instances.

    ``rule_emb`` is ``(L, P, k)``: P = 1 for the additive form, P = max body
    length for the position-aware form.
    """
    cdef Py_ssize_t n = bodies.shape[0], k = rel.shape[1], i, j
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    scratch = np.empty(max(k, 1), dtype=np.float64)
    cdef f64[::1] o = out, xs = scratch
    cdef f64 *x = &xs[0]
    if n == 0:
        return out
    with nogil:
        for i in range(n):
            _residual(rel, rule_emb, bodies, i, lengths[i], heads[i], rule_ids[i], positional, wrap, x)
            acc = 0.0
            if norm == 1:
                for j in range(k):
                    acc += fabs(x[j])
                o[i] = acc
            else:
                for j in range(k):
                    acc += x[j] * x[j]
                o[i] = sqrt(acc)
    return out


def rule_backward(const f64[:, ::1] rel, const f64[:, :, ::1] rule_emb,
                  const i64[:, ::1] bodies, const i64[::1] lengths, const i64[::1] heads,
                  const i64[::1] rule_ids, int positional, int norm, int wrap,
                  const f64[::1] coef, const f64[::1] dist,
                  f64[:, ::1] g_rel, f64[:, :, ::1] g_rule):
    cdef Py_ssize_t n = bodies.shape[0], k = rel.shape[1], i, j, p
    cdef i64 rid, l
    cdef double w
    cdef const f64 *row
    cdef const f64 *re
    cdef f64 *gr
    cdef f64 *gw
    scratch = np.empty(max(k, 1), dtype=np.float64)
    cdef f64[::1] xs = scratch
    cdef f64 *x = &xs[0]
    if n == 0:
        return
    with nogil:
        for i in range(n):
            w = coef[i]
            if w == 0.0:
                continue
            if norm != 1 and dist[i] == 0.0:
                continue
            rid = rule_ids[i]; l = lengths[i]
            _residual(rel, rule_emb, bodies, i, l, heads[i], rid, positional, wrap, x)
            if norm == 1:
                for j in range(k):
                    x[j] = w * _sign(x[j])
            else:
                for j in range(k):
                    x[j] = w * x[j] / dist[i]
            for p in range(l):
                gr = &g_rel[bodies[i, p], 0]
                if positional:
                    row = &rel[bodies[i, p], 0]
                    re = &rule_emb[rid, p, 0]
                    gw = &g_rule[rid, p, 0]
                    for j in range(k):
                        gr[j] += x[j] * re[j]
                    if wrap:
                        for j in range(k):
                            gw[j] += x[j] * _wrap(row[j])
                    else:
                        for j in range(k):
                            gw[j] += x[j] * row[j]
                else:
                    for j in range(k):
                        gr[j] += x[j]
            if not positional:
                gw = &g_rule[rid, 0, 0]
                for j in range(k):
                    gw[j] += x[j]
            gr = &g_rel[heads[i], 0]
            for j in range(k):
                gr[j] -= x[j]


def adam_step(f64[::1] param, const f64[::1] grad, f64[::1] m, f64[::1] v,
              double lr, double beta1, double beta2, double eps, long t):
    """One fused bias-corrected Adam update over flat arrays."""
    cdef Py_ssize_t n = param.shape[0], i
    cdef double c1 = 1.0 - beta1 ** t, c2 = 1.0 - beta2 ** t, g, mh, vh
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            mh = m[i] / c1
            vh = v[i] / c2
            param[i] -= lr * mh / (sqrt(vh) + eps)


def walk_counts(const i64[::1] indptr, const i64[::1] indices, i64 num_relations,
                i64 num_entities, i64 start, const i64[::1] body, const i64[:, ::1] excluded):
    """Number of walks from ``start`` following ``body`` that end at each entity.

    Edges listed in ``excluded`` (rows of h, r, t) are skipped.
    """
    bufs = np.zeros((2, num_entities), dtype=np.int64)
    acts = np.empty((2, num_entities), dtype=np.int64)
    cdef i64[:, ::1] bv = bufs, av = acts
    cdef i64* cur = &bv[0, 0]
    cdef i64* new = &bv[1, 0]
    cdef i64* act = &av[0, 0]
    cdef i64* act2 = &av[1, 0]
    cdef i64* tmp
    cdef Py_ssize_t n_act = 1, n_new, a, e, x, step, m = excluded.shape[0]
    cdef Py_ssize_t parity = 0
    cdef i64 node, r, row, nb, c
    cdef bint skip
    with nogil:
        cur[start] = 1
        act[0] = start
        for step in range(body.shape[0]):
            r = body[step]
            n_new = 0
            for a in range(n_act):
                node = act[a]
                c = cur[node]
                cur[node] = 0
                row = node * num_relations + r
                for e in range(indptr[row], indptr[row + 1]):
                    nb = indices[e]
                    skip = False
                    for x in range(m):
                        if excluded[x, 0] == node and excluded[x, 1] == r and excluded[x, 2] == nb:
                            skip = True
                            break
                    if skip:
                        continue
                    if new[nb] == 0:
                        act2[n_new] = nb
                        n_new += 1
                    new[nb] += c
            tmp = cur; cur = new; new = tmp
            tmp = act; act = act2; act2 = tmp
            n_act = n_new
            parity = 1 - parity
    return bufs[parity].copy()
