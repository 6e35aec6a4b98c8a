"""Independent reference implementations used by the unit and acceptance tests."""

import itertools

import numpy as np

from rulekg.data import Rule, RuleSet
from rulekg.train import (TrainConfig, _zero_grads, init_store, rule_loss_batch, sample_negative_rules,
                          self_adversarial_weights, triplet_loss_batch)

KINK = 1e-4


# --------------------------------------------------------------------------- finite differences


def _wrap(x):
    return np.mod(x + np.pi, 2 * np.pi) - np.pi


def _near_kink(store, pos, neg, ruleset, rule_ids, nb, nl, nh):
    """True if some residual sits close to a point where the loss is not differentiable."""
    trip = np.concatenate([pos, neg.reshape(-1, 3)])
    h, r, t = trip[:, 0], trip[:, 1], trip[:, 2]
    l1 = store.norm == "L1"
    if store.kge == "rotate":
        hc = store.ent_re[h] + 1j * store.ent_im[h]
        res = np.abs(hc * np.exp(1j * store.rel[r]) - (store.ent_re[t] + 1j * store.ent_im[t]))
    else:
        res = np.abs(store.ent_re[h] + store.rel[r] - store.ent_re[t])
    if l1 and res.min() < KINK:
        return True
    bodies_all, lengths_all, heads_all = ruleset.padded()
    insts = [(bodies_all[i, :lengths_all[i]], heads_all[i], i) for i in rule_ids]
    for b, i in enumerate(rule_ids):
        for j in range(nb.shape[1]):
            insts.append((nb[b, j, :nl[b, j]], nh[b, j], i))
    for body, head, rid in insts:
        if store.rule_variant == "positional":
            ang = store.rel[body]
            if store.wraps:
                if (np.pi - np.abs(_wrap(ang))).min() < KINK:
                    return True
                ang = _wrap(ang)
            x = (ang * store.rules[rid, :len(body)]).sum(0) - store.rel[head]
        else:
            x = store.rel[body].sum(0) + store.rules[rid, 0] - store.rel[head]
        if store.wraps:
            x = _wrap(x)
            if (np.pi - np.abs(x)).min() < KINK:
                return True
        if l1 and np.abs(x).min() < KINK:
            return True
    return False


def random_gradient_instance(rng, kge=None, variant=None, norm=None, unit=None, wrap=True):
    """A small random store, batch and negatives away from non-differentiable points."""
    while True:
        k = int(rng.integers(2, 9))
        n_ent, n_rel = int(rng.integers(4, 11)), 4
        cfg = TrainConfig(dim=k, kge=kge or rng.choice(["rotate", "transe"]),
                          rule_variant=variant or rng.choice(["default", "positional"]),
                          norm=norm or rng.choice(["L1", "L2"]), angle_unit=unit or rng.choice(["range", "radian"]),
                          gamma_t=float(rng.uniform(0.5, 3)), gamma_r=float(rng.uniform(0.5, 3)), rule_wrap=wrap)
        rs = RuleSet([Rule((0, 1), 2), Rule((3,), 1), Rule((1, 2, 0), 3)])
        st = init_store(n_ent, n_rel, rs, cfg, rng)
        st.ent_re[...] = rng.normal(size=st.ent_re.shape)
        if cfg.kge == "rotate":
            st.ent_im[...] = rng.normal(size=st.ent_im.shape)
            st.rel[...] = rng.uniform(-4, 4, st.rel.shape)
        else:
            st.rel[...] = rng.normal(size=st.rel.shape)
        if cfg.rule_variant == "positional":
            st.rules[...] = rng.uniform(0.5, 1.5, st.rules.shape)
        else:
            st.rules[...] = rng.normal(size=st.rules.shape)
        pos = np.stack([rng.integers(0, n_ent, 3), rng.integers(0, n_rel, 3), rng.integers(0, n_ent, 3)], 1)
        neg = rng.integers(0, n_ent, (3, 4, 3))
        neg[..., 1] = pos[:, None, 1]
        rule_ids = np.array([0, 2])
        nb, nl, nh = sample_negative_rules(rule_ids, rs, n_rel, 3, rng)
        if not _near_kink(st, pos, neg, rs, rule_ids, nb, nl, nh):
            return st, rs, pos, neg, rule_ids, (nb, nl, nh), cfg


def gradient_rel_error(st, rs, pos, neg, rule_ids, rneg, adv=0.5, eps=1e-5):
    """Max relative error between analytic and central-difference gradients of both losses."""
    nb, nl, nh = rneg
    d_neg = st.kge_distance(neg.reshape(-1, 3)).reshape(neg.shape[:2])
    w = self_adversarial_weights(d_neg, st.gamma_t, adv)
    g_t = _zero_grads(st)
    l_t = triplet_loss_batch(st, pos, neg, adv, g_t)[0]
    g_r = _zero_grads(st)
    l_r = rule_loss_batch(st, rs, rule_ids, nb, nl, nh, g_r)[0]
    # central differences carry round-off of order |L| * 1e-16 / eps, so tiny
    # components are compared against a floor proportional to the loss
    floor_t, floor_r = 1e-6 * max(1.0, abs(l_t)), 1e-6 * max(1.0, abs(l_r))
    worst = 0.0
    for name, p in st.params().items():
        if name == "ent_im" and st.kge == "transe":
            continue
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            lt_p = triplet_loss_batch(st, pos, neg, adv, weights=w)[0]
            lr_p = rule_loss_batch(st, rs, rule_ids, nb, nl, nh)[0]
            p[idx] = orig - eps
            lt_m = triplet_loss_batch(st, pos, neg, adv, weights=w)[0]
            lr_m = rule_loss_batch(st, rs, rule_ids, nb, nl, nh)[0]
            p[idx] = orig
            for fd, an, fl in (((lt_p - lt_m) / (2 * eps), g_t[name][idx], floor_t),
                               ((lr_p - lr_m) / (2 * eps), g_r[name][idx], floor_r)):
                worst = max(worst, abs(fd - an) / max(abs(fd) + abs(an), fl))
    return worst


# --------------------------------------------------------------------------- walks


def enumerate_walks(triplets, start, body, n_ent, excluded=()):
    """Walk counts per end entity by trying every entity sequence."""
    known = {tuple(x) for x in np.asarray(triplets).tolist()} - {tuple(e) for e in excluded}
    counts = np.zeros(n_ent, dtype=np.int64)
    for mids in itertools.product(range(n_ent), repeat=len(body)):
        path = (start, *mids)
        if all((path[i], body[i], path[i + 1]) in known for i in range(len(body))):
            counts[path[-1]] += 1
    return counts


# --------------------------------------------------------------------------- ranks


def monte_carlo_rank(scores, true_index, mask, n_shuffles, rng):
    """Average 1-based position of the true entity after sorting with random tie-breaking."""
    keep = ~np.asarray(mask, dtype=bool)
    keep[true_index] = True
    idx = np.flatnonzero(keep)
    s = np.asarray(scores)[idx]
    target = int(np.flatnonzero(idx == true_index)[0])
    ranks = np.empty(n_shuffles)
    for i in range(n_shuffles):
        tie = rng.random(len(s))
        order = np.lexsort((tie, -s))
        ranks[i] = int(np.flatnonzero(order == target)[0]) + 1
    return ranks.mean(), ranks.std(ddof=1) / np.sqrt(n_shuffles)
