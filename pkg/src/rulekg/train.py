"""Joint training of entity, relation and rule embeddings."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import kernels
from .data import GraphIndex, RuleSet
from .geometry import wrap_angle

logger = logging.getLogger(__name__)

KGE_BACKENDS = ("rotate", "transe")
RULE_VARIANTS = ("default", "positional")
ANGLE_UNITS = ("range", "radian")


class TrainingError(RuntimeError):
    pass


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _norm_code(norm: str) -> int:
    if norm in ("L1", "l1", 1):
        return 1
    if norm in ("L2", "l2", 2):
        return 2
    raise ValueError(f"unknown norm {norm!r}")


@dataclass
class TrainConfig:
    dim: int = 500
    gamma_t: float = 6.0
    gamma_r: float = 8.0
    alpha: float = 1.0
    lr: float = 1e-4
    adv: float = 0.25
    lam: float = 0.0
    neg_triplets: int = 256
    neg_rules: int = 64
    batch_triplets: int = 256
    batch_rules: int = 256
    steps: int = 1000
    seed: int = 0
    kge: str = "rotate"
    rule_variant: str = "default"
    norm: str = "L1"
    angle_unit: str = "range"
    rule_wrap: bool = True
    eval_every: int = 0
    patience: int = 0

    def __post_init__(self):
        for name in ("dim", "neg_triplets", "neg_rules", "batch_triplets", "batch_rules"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.adv < 0:
            raise ValueError("adv must be >= 0")
        if self.gamma_t <= 0 or self.gamma_r <= 0:
            raise ValueError("margins must be > 0")
        if self.kge not in KGE_BACKENDS:
            raise ValueError(f"kge must be one of {KGE_BACKENDS}")
        if self.rule_variant not in RULE_VARIANTS:
            raise ValueError(f"rule_variant must be one of {RULE_VARIANTS}")
        _norm_code(self.norm)
        if self.angle_unit not in ANGLE_UNITS:
            raise ValueError(f"angle_unit must be one of {ANGLE_UNITS}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in names:
                continue
            default = getattr(cls, k, None)
            kwargs[k] = type(default)(v) if default is not None and not isinstance(v, type(default)) else v
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- store


@dataclass
class EmbeddingStore:
    """Entity complex vectors, relation/rule angle (or translation) vectors and margins.

    ``rules`` has shape ``(L, P, k)``: P is 1 for the additive rule form and the
    maximum body length for the position-aware form.
    """

    ent_re: np.ndarray
    ent_im: np.ndarray
    rel: np.ndarray
    rules: np.ndarray
    gamma_t: float
    gamma_r: float
    kge: str = "rotate"
    rule_variant: str = "default"
    norm: str = "L1"
    angle_scale: float = 1.0  # rule distances are reported in units of angle_scale per radian
    rule_wrap: bool = True  # RotatE only: wrap rule residuals to [-pi, pi) before the norm

    @property
    def dim(self) -> int:
        return self.ent_re.shape[1]

    @property
    def num_entities(self) -> int:
        return self.ent_re.shape[0]

    @property
    def num_relations(self) -> int:
        return self.rel.shape[0]

    @property
    def num_rules(self) -> int:
        return self.rules.shape[0]

    @property
    def wraps(self) -> bool:
        return self.kge == "rotate" and self.rule_wrap

    def params(self) -> dict[str, np.ndarray]:
        return {"ent_re": self.ent_re, "ent_im": self.ent_im, "rel": self.rel, "rules": self.rules}

    def copy(self) -> "EmbeddingStore":
        return copy.deepcopy(self)

    def canonicalize(self) -> None:
        """Map stored angles to ``[-pi, pi)`` (wrapped RotatE only; positional blocks are scales).

        Unwrapped rule distances depend on the raw angles, so they are left alone.
        """
        if self.wraps:
            self.rel[...] = wrap_angle(self.rel)
            if self.rule_variant == "default":
                self.rules[...] = wrap_angle(self.rules)

    def relation_tables(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kge == "rotate":
            return np.ascontiguousarray(np.cos(self.rel)), np.ascontiguousarray(np.sin(self.rel))
        return self.rel, self.rel

    def kge_distance(self, triplets: np.ndarray) -> np.ndarray:
        t = np.ascontiguousarray(np.asarray(triplets, dtype=np.int64).reshape(-1, 3))
        a, b = self.relation_tables()
        return kernels.kge_forward(self.ent_re, self.ent_im, a, b,
                                   np.ascontiguousarray(t[:, 0]), np.ascontiguousarray(t[:, 1]),
                                   np.ascontiguousarray(t[:, 2]), KGE_BACKENDS.index(self.kge),
                                   _norm_code(self.norm))

    def kge_score(self, triplets: np.ndarray) -> np.ndarray:
        return self.gamma_t - self.kge_distance(triplets)

    def score_all_tails(self, heads, rels, chunk: int = 8_000_000) -> np.ndarray:
        """KGE scores ``gamma_t - d(h, r, e)`` for every entity ``e``; shape ``(Q, E)``."""
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        n_ent, k = self.num_entities, self.dim
        out = np.empty((len(heads), n_ent))
        step = max(1, chunk // max(1, n_ent * k))
        p = 1 if _norm_code(self.norm) == 1 else 2
        for lo in range(0, len(heads), step):
            h, r = heads[lo:lo + step], rels[lo:lo + step]
            if self.kge == "rotate":
                rot = (self.ent_re[h] + 1j * self.ent_im[h]) * np.exp(1j * self.rel[r])
                ent = self.ent_re + 1j * self.ent_im
                m = np.abs(rot[:, None, :] - ent[None, :, :])
            else:
                m = np.abs((self.ent_re[h] + self.rel[r])[:, None, :] - self.ent_re[None, :, :])
            d = m.sum(axis=2) if p == 1 else np.sqrt((m * m).sum(axis=2))
            out[lo:lo + step] = self.gamma_t - d
        return out

    def rule_distance(self, ruleset: RuleSet, rule_ids=None) -> np.ndarray:
        bodies, lengths, heads = ruleset.padded()
        ids = np.arange(len(ruleset)) if rule_ids is None else np.asarray(rule_ids, dtype=np.int64)
        d = kernels.rule_forward(self.rel, self.rules, np.ascontiguousarray(bodies[ids]),
                                 np.ascontiguousarray(lengths[ids]), np.ascontiguousarray(heads[ids]),
                                 np.ascontiguousarray(ids), int(self.rule_variant == "positional"),
                                 _norm_code(self.norm), int(self.wraps))
        return self.angle_scale * d

    def rule_residuals(self, ruleset: RuleSet) -> np.ndarray:
        """Per-dimension residuals (wrapped for RotatE), shape ``(L, k)``."""
        bodies, lengths, heads = ruleset.padded()
        k = self.dim
        x = np.zeros((len(ruleset), k))
        pos = self.rule_variant == "positional"
        for p in range(bodies.shape[1]):
            on = lengths > p
            ang = self.rel[bodies[on, p]]
            if pos:
                if self.wraps:
                    ang = wrap_angle(ang)
                x[on] += ang * self.rules[np.flatnonzero(on), p]
            else:
                x[on] += ang
        if not pos:
            x += self.rules[:, 0]
        x -= self.rel[heads]
        return wrap_angle(x) if self.wraps else x


def init_store(num_entities: int, num_relations: int, ruleset: RuleSet, config: TrainConfig,
               rng: np.random.Generator | None = None) -> EmbeddingStore:
    """Entities uniform in ``+-(gamma_t + 2) / k``; RotatE angles uniform in ``[-pi, pi)``.

    With ``angle_unit="range"`` RotatE rule distances are measured in units where
    pi corresponds to the entity initialization range ``(gamma_t + 2) / k``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    k = config.dim
    eps = (config.gamma_t + 2.0) / k
    ent_re = rng.uniform(-eps, eps, size=(num_entities, k))
    ent_im = rng.uniform(-eps, eps, size=(num_entities, k)) if config.kge == "rotate" else np.zeros((num_entities, k))
    positional = config.rule_variant == "positional"
    p = max(ruleset.max_length, 1) if positional else 1
    if config.kge == "rotate":
        rel = rng.uniform(-np.pi, np.pi, size=(num_relations, k))
        rules = np.ones((len(ruleset), p, k)) if positional else rng.uniform(-np.pi, np.pi, size=(len(ruleset), 1, k))
    else:
        rel = rng.uniform(-eps, eps, size=(num_relations, k))
        rules = np.ones((len(ruleset), p, k)) if positional else rng.uniform(-eps, eps, size=(len(ruleset), 1, k))
    scale = eps / np.pi if (config.kge == "rotate" and config.angle_unit == "range") else 1.0
    return EmbeddingStore(ent_re, ent_im, rel, rules, config.gamma_t, config.gamma_r,
                          config.kge, config.rule_variant, config.norm, scale, config.rule_wrap)


# --------------------------------------------------------------------------- sampling


def sample_negative_triplets(triplets, graph: GraphIndex, n: int, rng: np.random.Generator,
                             retries: int = 10) -> np.ndarray:
    """Corrupt the head or the tail (each with probability 1/2) by a different random entity.

    Corruptions that are known triplets are redrawn up to ``retries`` times and
    then kept.  Returns ``(B, n, 3)``.
    """
    pos = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    n_ent = graph.num_entities
    if n_ent < 2:
        raise ValueError("need at least two entities to corrupt triplets")
    b = len(pos)
    corrupt_head = rng.random((b, n)) < 0.5
    neg = np.broadcast_to(pos[:, None, :], (b, n, 3)).copy()
    side = np.where(corrupt_head, 0, 2)
    orig = np.where(corrupt_head, neg[..., 0], neg[..., 2])

    def draw(mask_shape_orig):
        repl = rng.integers(0, n_ent - 1, size=mask_shape_orig.shape)
        return repl + (repl >= mask_shape_orig)

    repl = draw(orig)
    rows, cols = np.indices((b, n))
    neg[rows, cols, side] = repl
    for _ in range(retries):
        bad = graph.contains_many(neg.reshape(-1, 3)).reshape(b, n)
        if not bad.any():
            break
        bi, ni = np.nonzero(bad)
        neg[bi, ni, side[bi, ni]] = draw(orig[bi, ni])
    return neg


def _rule_keys(bodies: np.ndarray, heads: np.ndarray, num_relations: int) -> np.ndarray:
    base = num_relations + 1
    key = heads.astype(np.int64).copy()
    for p in range(bodies.shape[-1]):
        key = key * base + (bodies[..., p] + 1)
    return key


def sample_negative_rules(rule_ids, ruleset: RuleSet, num_relations: int, m: int,
                          rng: np.random.Generator, retries: int = 10):
    """Replace one relation slot (body position or head, uniformly) by a different relation.

    Returns ``(bodies, lengths, heads)`` of shapes ``(B, m, P)``, ``(B, m)``, ``(B, m)``.
    Corruptions that coincide with a rule of ``ruleset``, or that degenerate to
    the tautology ``r => r``, are redrawn.
    """
    if num_relations < 2:
        raise ValueError("need at least two relations to corrupt rules")
    bodies_all, lengths_all, heads_all = ruleset.padded()
    ids = np.asarray(rule_ids, dtype=np.int64)
    b = len(ids)
    bodies = np.broadcast_to(bodies_all[ids][:, None, :], (b, m, bodies_all.shape[1])).copy()
    heads = np.broadcast_to(heads_all[ids][:, None], (b, m)).copy()
    lengths = np.broadcast_to(lengths_all[ids][:, None], (b, m)).copy()
    known = np.sort(_rule_keys(bodies_all, heads_all, num_relations))

    slot = np.floor(rng.random((b, m)) * (lengths + 1)).astype(np.int64)
    slot = np.minimum(slot, lengths)
    is_head = slot == lengths
    rows, cols = np.indices((b, m))
    body_slot = np.minimum(slot, bodies.shape[2] - 1)
    orig = np.where(is_head, heads, bodies[rows, cols, body_slot])

    def apply(sel):
        repl = rng.integers(0, num_relations - 1, size=int(sel.sum()))
        repl = repl + (repl >= orig[sel])
        hs = sel & is_head
        bs = sel & ~is_head
        heads[hs] = repl[is_head[sel]]
        bodies[rows[bs], cols[bs], body_slot[bs]] = repl[~is_head[sel]]

    apply(np.ones((b, m), dtype=bool))
    for _ in range(retries):
        keys = _rule_keys(bodies, heads, num_relations)
        pos = np.minimum(np.searchsorted(known, keys), len(known) - 1)
        bad = (known[pos] == keys) | ((lengths == 1) & (bodies[..., 0] == heads))
        if not bad.any():
            break
        apply(bad)
    return bodies, lengths, heads


# --------------------------------------------------------------------------- losses


def _zero_grads(store: EmbeddingStore) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in store.params().items()}


def self_adversarial_weights(neg_dist: np.ndarray, gamma: float, adv: float) -> np.ndarray:
    """Softmax over negatives of ``adv * (gamma - d)``, row-wise."""
    z = adv * (gamma - np.asarray(neg_dist, dtype=np.float64))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def triplet_loss_batch(store: EmbeddingStore, pos: np.ndarray, neg: np.ndarray, adv: float,
                       grads: dict | None = None, scale: float = 1.0, weights: np.ndarray | None = None):
    """Mean self-adversarial triplet loss over the batch; gradients are accumulated into ``grads``.

    ``weights`` overrides the adversarial weights (they are constants for the gradient).
    """
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    b, n = neg.shape[0], neg.shape[1]
    trip = np.concatenate([pos, neg.reshape(-1, 3)])
    a_tab, b_tab = store.relation_tables()
    h = np.ascontiguousarray(trip[:, 0])
    r = np.ascontiguousarray(trip[:, 1])
    t = np.ascontiguousarray(trip[:, 2])
    backend, norm = KGE_BACKENDS.index(store.kge), _norm_code(store.norm)
    d = kernels.kge_forward(store.ent_re, store.ent_im, a_tab, b_tab, h, r, t, backend, norm)
    dp, dn = d[:b], d[b:].reshape(b, n)
    g = store.gamma_t
    p = self_adversarial_weights(dn, g, adv) if weights is None else weights
    per = -log_sigmoid(g - dp) - (p * log_sigmoid(dn - g)).sum(axis=1)
    loss = float(per.mean())
    if grads is not None:
        coef = np.concatenate([sigmoid(dp - g), (-p * sigmoid(g - dn)).ravel()]) * (scale / b)
        kernels.kge_backward(store.ent_re, store.ent_im, a_tab, b_tab, h, r, t,
                             np.ascontiguousarray(coef), d, backend, norm,
                             grads["ent_re"], grads["ent_im"], grads["rel"])
    return loss, per


def triplet_loss(store: EmbeddingStore, triplet, negatives, adv: float):
    """Loss of one positive triplet against its negatives, with parameter gradients."""
    grads = _zero_grads(store)
    neg = np.asarray(negatives, dtype=np.int64).reshape(1, -1, 3)
    loss, _ = triplet_loss_batch(store, np.asarray(triplet).reshape(1, 3), neg, adv, grads)
    return loss, grads


def rule_loss_batch(store: EmbeddingStore, ruleset: RuleSet, rule_ids, neg_bodies, neg_lengths, neg_heads,
                    grads: dict | None = None, scale: float = 1.0):
    """Mean rule loss; negatives share the rule embedding of their source rule."""
    ids = np.asarray(rule_ids, dtype=np.int64)
    b, m = neg_heads.shape
    bodies_all, lengths_all, heads_all = ruleset.padded()
    pmax = max(bodies_all.shape[1], neg_bodies.shape[2])
    bodies = np.full((b * (m + 1), pmax), -1, dtype=np.int64)
    bodies[:b, : bodies_all.shape[1]] = bodies_all[ids]
    bodies[b:, : neg_bodies.shape[2]] = neg_bodies.reshape(b * m, -1)
    lengths = np.concatenate([lengths_all[ids], neg_lengths.ravel()])
    heads = np.concatenate([heads_all[ids], neg_heads.ravel()])
    rids = np.concatenate([ids, np.repeat(ids, m)])
    positional, norm, wrap = int(store.rule_variant == "positional"), _norm_code(store.norm), int(store.wraps)
    raw = kernels.rule_forward(store.rel, store.rules, bodies, lengths, heads, rids, positional, norm, wrap)
    d = store.angle_scale * raw
    dp, dn = d[:b], d[b:].reshape(b, m)
    g = store.gamma_r
    per = -log_sigmoid(g - dp) - log_sigmoid(dn - g).mean(axis=1)
    loss = float(per.mean())
    if grads is not None:
        coef = np.concatenate([sigmoid(dp - g), (-sigmoid(g - dn) / m).ravel()]) * (scale * store.angle_scale / b)
        kernels.rule_backward(store.rel, store.rules, bodies, lengths, heads, rids, positional, norm, wrap,
                              np.ascontiguousarray(coef), raw, grads["rel"], grads["rules"])
    return loss, per


def rule_loss(store: EmbeddingStore, ruleset: RuleSet, rule_id: int, negatives):
    """Loss of one rule against ``negatives = (bodies, lengths, heads)`` for that rule."""
    grads = _zero_grads(store)
    bodies, lengths, heads = (np.asarray(x, dtype=np.int64) for x in negatives)
    loss, _ = rule_loss_batch(store, ruleset, [rule_id], bodies.reshape(1, len(heads), -1),
                              lengths.reshape(1, -1), heads.reshape(1, -1), grads)
    return loss, grads


# --------------------------------------------------------------------------- optimizer


class Adam:
    """Dense Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        kernels.adam_step(param.reshape(-1), np.ascontiguousarray(grad).reshape(-1), self.m[name].reshape(-1),
                          self.v[name].reshape(-1), self.lr if lr is None else lr, self.beta1, self.beta2, self.eps, self.t[name])

    def state(self) -> dict:
        out = {}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
            out[f"t.{k}"] = np.array(self.t[k])
        return out

    def load_state(self, state: dict) -> None:
        for key, val in state.items():
            kind, name = key.split(".", 1)
            if kind == "m":
                self.m[name] = np.array(val, dtype=np.float64)
            elif kind == "v":
                self.v[name] = np.array(val, dtype=np.float64)
            elif kind == "t":
                self.t[name] = int(val)


# --------------------------------------------------------------------------- training loop


@dataclass
class StepResult:
    step: int
    triplet_loss: float
    rule_loss: float
    total: float


@dataclass
class JointTrainer:
    """Owns the store, optimizer state and the two sampling streams.

    Triplet and rule batches draw from separate generators, so a run with
    ``alpha = 0`` follows exactly the same triplet trajectory as a run without rules.
    """

    store: EmbeddingStore
    graph: GraphIndex
    ruleset: RuleSet
    config: TrainConfig
    step_count: int = 0
    history: list = field(default_factory=list)
    best_metric: float = -np.inf
    bad_evals: int = 0

    def __post_init__(self):
        ss = np.random.SeedSequence(self.config.seed)
        _, trip_ss, rule_ss = ss.spawn(3)
        self.rng_triplets = np.random.default_rng(trip_ss)
        self.rng_rules = np.random.default_rng(rule_ss)
        self.opt = Adam(self.config.lr)
        self._trip_perm = np.empty(0, dtype=np.int64)
        self._rule_perm = np.empty(0, dtype=np.int64)

    def _next(self, attr: str, n_items: int, size: int, rng) -> np.ndarray:
        perm = getattr(self, attr)
        out = []
        while size > 0:
            if len(perm) == 0:
                perm = rng.permutation(n_items)
            take = perm[:size]
            perm = perm[size:]
            out.append(take)
            size -= len(take)
        setattr(self, attr, perm)
        return np.concatenate(out)

    def param_lr(self, name: str) -> float:
        """Angles move in the same units their distances are measured in."""
        angle = name == "rel" or (name == "rules" and self.store.rule_variant == "default")
        if angle and self.store.kge == "rotate":
            return self.config.lr / self.store.angle_scale
        return self.config.lr

    def next_triplet_batch(self) -> np.ndarray:
        idx = self._next("_trip_perm", len(self.graph.triplets), self.config.batch_triplets, self.rng_triplets)
        return self.graph.triplets[idx]

    def next_rule_batch(self) -> np.ndarray:
        return self._next("_rule_perm", len(self.ruleset), self.config.batch_rules, self.rng_rules)

    def step(self, triplet_batch=None, rule_batch=None) -> StepResult:
        cfg, store = self.config, self.store
        use_rules = cfg.alpha != 0 and len(self.ruleset) > 0
        pos = self.next_triplet_batch() if triplet_batch is None else np.asarray(triplet_batch, dtype=np.int64)
        neg = sample_negative_triplets(pos, self.graph, cfg.neg_triplets, self.rng_triplets)
        grads = _zero_grads(store) if use_rules else {
            "ent_re": np.zeros_like(store.ent_re), "ent_im": np.zeros_like(store.ent_im),
            "rel": np.zeros_like(store.rel)}
        lt, _ = triplet_loss_batch(store, pos, neg, cfg.adv, grads)
        total = lt
        if cfg.lam > 0:
            rows = np.concatenate([pos[:, 0], pos[:, 2]])
            denom = len(rows) * store.dim
            total += cfg.lam * float((store.ent_re[rows] ** 2 + store.ent_im[rows] ** 2).sum() / denom)
            coef = 2 * cfg.lam / denom
            np.add.at(grads["ent_re"], rows, coef * store.ent_re[rows])
            np.add.at(grads["ent_im"], rows, coef * store.ent_im[rows])
        lr_val = 0.0
        if use_rules:
            rb = self.next_rule_batch() if rule_batch is None else np.asarray(rule_batch, dtype=np.int64)
            nb, nl, nh = sample_negative_rules(rb, self.ruleset, store.num_relations, cfg.neg_rules, self.rng_rules)
            lr_val, _ = rule_loss_batch(store, self.ruleset, rb, nb, nl, nh, grads, scale=cfg.alpha)
            total += cfg.alpha * lr_val
        if not np.isfinite(total):
            raise TrainingError(
                f"non-finite loss at step {self.step_count}: L_t={lt}, L_r={lr_val}; "
                f"triplet batch head ids {pos[:5, 0].tolist()}...")
        for name, g in grads.items():
            if name == "ent_im" and store.kge == "transe":
                continue
            self.opt.update(name, store.params()[name], g, self.param_lr(name))
        self.step_count += 1
        res = StepResult(self.step_count, lt, lr_val, total)
        self.history.append(res)
        return res

    # resume support: exact float64 state plus generator states
    def state(self) -> dict:
        st = {f"param.{k}": v for k, v in self.store.params().items()}
        st.update({f"opt.{k}": v for k, v in self.opt.state().items()})
        st["step_count"] = np.array(self.step_count)
        st["best_metric"] = np.array(self.best_metric)
        st["bad_evals"] = np.array(self.bad_evals)
        st["trip_perm"] = self._trip_perm
        st["rule_perm"] = self._rule_perm
        st["rng_triplets"] = np.frombuffer(repr(self.rng_triplets.bit_generator.state).encode(), dtype=np.uint8)
        st["rng_rules"] = np.frombuffer(repr(self.rng_rules.bit_generator.state).encode(), dtype=np.uint8)
        return st

    def load_state(self, st: dict) -> None:
        import ast

        for k, v in self.store.params().items():
            v[...] = st[f"param.{k}"]
        self.opt = Adam(self.config.lr)
        self.opt.load_state({k[4:]: v for k, v in st.items() if k.startswith("opt.")})
        self.step_count = int(st["step_count"])
        self.best_metric = float(st.get("best_metric", -np.inf))
        self.bad_evals = int(st.get("bad_evals", 0))
        self._trip_perm = np.array(st["trip_perm"], dtype=np.int64)
        self._rule_perm = np.array(st["rule_perm"], dtype=np.int64)
        self.rng_triplets.bit_generator.state = ast.literal_eval(bytes(st["rng_triplets"]).decode())
        self.rng_rules.bit_generator.state = ast.literal_eval(bytes(st["rng_rules"]).decode())


def joint_step(trainer: JointTrainer, triplet_batch=None, rule_batch=None) -> StepResult:
    """One optimizer update on ``L_t + alpha * L_r`` (+ entity regularization)."""
    return trainer.step(triplet_batch, rule_batch)


def train_joint(graph: GraphIndex, ruleset: RuleSet, config: TrainConfig,
                eval_fn: Callable[[EmbeddingStore], float] | None = None,
                checkpoint_fn: Callable[[JointTrainer, bool], None] | None = None,
                trainer: JointTrainer | None = None, log_every: int = 100,
                checkpoint_every: int = 0, best_store: EmbeddingStore | None = None) -> EmbeddingStore:
    """Run ``config.steps`` joint updates and return the final (or best validated) store.

    With ``eval_fn`` and ``config.eval_every > 0`` the store scoring the highest
    validation metric is kept; ``config.patience`` evaluations without
    improvement stop the run early.  ``checkpoint_fn(trainer, is_best)`` is
    called after each evaluation and every ``checkpoint_every`` steps.
    Passing a restored ``trainer`` (and the best store saved so far) resumes a run.
    """
    if trainer is None:
        store = init_store(graph.num_entities, graph.num_relations, ruleset, config)
        trainer = JointTrainer(store, graph, ruleset, config)
    validating = eval_fn is not None and config.eval_every > 0
    t0 = time.perf_counter()
    while trainer.step_count < config.steps:
        res = trainer.step()
        if log_every and res.step % log_every == 0:
            logger.info("step %d  L_t %.4f  L_r %.4f  (%.1fs)", res.step, res.triplet_loss, res.rule_loss,
                        time.perf_counter() - t0)
        if validating and res.step % config.eval_every == 0:
            metric = eval_fn(trainer.store)
            improved = metric > trainer.best_metric
            logger.info("step %d  validation %.4f%s", res.step, metric, "  *" if improved else "")
            if improved:
                trainer.best_metric, trainer.bad_evals = metric, 0
                best_store = trainer.store.copy()
            else:
                trainer.bad_evals += 1
            if checkpoint_fn is not None:
                checkpoint_fn(trainer, improved)
            if config.patience and trainer.bad_evals >= config.patience:
                logger.info("early stop at step %d", res.step)
                break
        elif checkpoint_fn is not None and checkpoint_every and res.step % checkpoint_every == 0:
            checkpoint_fn(trainer, False)
    if validating and trainer.step_count % config.eval_every:
        metric = eval_fn(trainer.store)
        if metric > trainer.best_metric:
            trainer.best_metric, best_store = metric, trainer.store.copy()
    # canonicalize a copy so the trainer state stays resumable bit for bit
    out = (best_store if (validating and best_store is not None) else trainer.store).copy()
    out.canonicalize()
    return out
