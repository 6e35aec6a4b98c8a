"""Soft rule reasoning: rule confidences, support counting and the grounding MLP."""

from __future__ import annotations

import copy
import logging
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from . import kernels
from .data import GraphIndex, RuleSet, inverse_relation
from .train import Adam, EmbeddingStore

logger = logging.getLogger(__name__)

MAX_SUPPORT = 2**31 - 1
AGG_MODES = ("mlp", "sum", "max", "hard")
CONF_MODES = ("scalar", "finegrained")


class GroundingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- confidences


def _check_rule_ids(store: EmbeddingStore, ruleset: RuleSet, rule_ids) -> np.ndarray:
    if len(ruleset) != store.num_rules:
        raise KeyError(f"store holds {store.num_rules} rule embeddings, rule set has {len(ruleset)}")
    ids = np.arange(len(ruleset)) if rule_ids is None else np.atleast_1d(np.asarray(rule_ids, dtype=np.int64))
    if len(ids) and (ids.min() < 0 or ids.max() >= len(ruleset)):
        raise KeyError(f"unknown rule id in {ids.tolist()}")
    for i in ids:
        r = ruleset[int(i)]
        if max(*r.body, r.head) >= store.num_relations:
            raise KeyError(f"rule {int(i)} references a relation outside the store")
    return ids


def rule_confidence(store: EmbeddingStore, ruleset: RuleSet, rule_ids=None) -> np.ndarray:
    """``gamma_r - rule_distance`` for each rule (all rules when ``rule_ids`` is None)."""
    ids = _check_rule_ids(store, ruleset, rule_ids)
    return store.gamma_r - store.rule_distance(ruleset, ids)


def rule_confidence_vector(store: EmbeddingStore, ruleset: RuleSet, p: int | None = None) -> np.ndarray:
    """Per-dimension confidences ``gamma_r / k - |residual| ** p``, shape ``(L, k)``.

    With ``p = 1`` each row sums to the L1 scalar confidence.
    """
    _check_rule_ids(store, ruleset, None)
    if p is None:
        p = 1 if store.norm in ("L1", 1) else 2
    res = store.angle_scale * store.rule_residuals(ruleset)
    return store.gamma_r / store.dim - np.abs(res) ** p


# --------------------------------------------------------------------------- grounding


@dataclass
class SupportTable:
    """Support counts for one query: rows are candidate tails, columns rule ids."""

    candidates: np.ndarray
    counts: sparse.csr_matrix

    @property
    def num_rules(self) -> int:
        return self.counts.shape[1]

    def row(self, entity: int) -> dict[int, int]:
        pos = np.searchsorted(self.candidates, entity)
        if pos >= len(self.candidates) or self.candidates[pos] != entity:
            return {}
        r = self.counts.getrow(pos)
        return {int(c): int(v) for c, v in zip(r.indices, r.data)}

    def dense_row(self, entity: int) -> np.ndarray:
        out = np.zeros(self.num_rules)
        for c, v in self.row(entity).items():
            out[c] = v
        return out

    def as_dict(self) -> dict[int, dict[int, int]]:
        return {int(e): self.row(int(e)) for e in self.candidates}


def ground_query(graph: GraphIndex, head_entity: int, query_relation: int, ruleset: RuleSet,
                 exclusions=()) -> SupportTable:
    """Count, for every rule concluding ``query_relation``, the body walks from ``head_entity``.

    ``exclusions`` lists ``(h, r, t)`` edges that may not be traversed.  Walks may
    revisit entities.
    """
    excl = np.asarray(list(exclusions), dtype=np.int64).reshape(-1, 3)
    excl_rels = set(excl[:, 1].tolist())
    no_excl = np.zeros((0, 3), dtype=np.int64)
    cand_rows: dict[int, dict[int, int]] = {}
    for rid in ruleset.by_head.get(query_relation, ()):
        body = ruleset[rid].body
        use = excl if excl_rels.intersection(body) else no_excl
        counts = kernels.walk_counts(graph.indptr, graph.indices, graph.num_relations, graph.num_entities,
                                     int(head_entity), np.asarray(body, dtype=np.int64), use)
        for e in np.flatnonzero(counts):
            cand_rows.setdefault(int(e), {})[rid] = min(int(counts[e]), MAX_SUPPORT)
    cands = np.array(sorted(cand_rows), dtype=np.int64)
    rows, cols, vals = [], [], []
    for i, e in enumerate(cands):
        for rid, c in cand_rows[int(e)].items():
            rows.append(i)
            cols.append(rid)
            vals.append(c)
    counts = sparse.csr_matrix((np.array(vals, dtype=np.float64), (rows, cols)), shape=(len(cands), len(ruleset)))
    return SupportTable(cands, counts)


# --------------------------------------------------------------------------- encodings and MLP


def encode_soft_multihot(table_row, confidences) -> np.ndarray:
    """``v_i = w_i * support_i``.

    ``table_row`` is a ``{rule_id: support}`` mapping or a dense support vector.
    With a ``(L, k)`` confidence matrix the result is ``(k, L)``: one encoding
    per embedding dimension.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    n_rules = conf.shape[0]
    if isinstance(table_row, dict):
        support = np.zeros(n_rules)
        for i, c in table_row.items():
            support[i] = c
    else:
        support = np.asarray(table_row, dtype=np.float64)
    if conf.ndim == 1:
        return conf * support
    return (conf * support[:, None]).T


def _he_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GroundingModel:
    """One-hidden-layer ReLU MLP mapping a rule encoding to a scalar score."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    fingerprint: bytes = b"\0" * 32
    agg: str = "mlp"
    conf_mode: str = "scalar"
    p: float = 1.0

    @classmethod
    def init(cls, num_rules: int, hidden: int = 256, seed: int = 0, **kw) -> "GroundingModel":
        rng = np.random.default_rng(seed)
        w1 = _he_uniform(rng, num_rules, (hidden, num_rules))
        w2 = _he_uniform(rng, hidden, (hidden,))
        return cls(w1, np.zeros(hidden), w2, 0.0, **kw)

    @property
    def num_rules(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def forward(self, enc):
        """Scores for the rows of ``enc`` (dense or sparse ``(N, L)``); returns ``(scores, hidden_pre)``."""
        if enc.shape[-1] != self.num_rules:
            raise ValueError(f"encoding width {enc.shape[-1]} != model input width {self.num_rules}")
        z = enc @ self.w1.T
        z = np.asarray(z) + self.b1
        return np.maximum(z, 0.0) @ self.w2 + self.b2, z

    def score(self, enc) -> np.ndarray:
        return self.forward(enc)[0]

    def zero_score(self) -> float:
        return float(np.maximum(self.b1, 0.0) @ self.w2 + self.b2)

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": np.atleast_1d(np.asarray(self.b2, dtype=np.float64))}


def grounding_score(model: GroundingModel, encoding) -> float:
    """MLP score of one encoding; a ``(k, L)`` stack is scored as the mean over its rows."""
    enc = np.asarray(encoding, dtype=np.float64)
    if enc.ndim == 1:
        return float(model.score(enc[None, :])[0])
    return float(model.score(enc).mean())


def aggregate_ablation(table_row, confidences, mode: str, model: GroundingModel | None = None):
    """Score one candidate under an aggregator.

    ``sum``: sum of ``w_i * support_i``; ``max``: largest ``w_i`` among
    activated rules (``-inf`` when none); ``mlp``/``hard``: encoding fed to
    ``model`` (the encoding itself is returned when no model is given), where
    ``hard`` replaces every confidence by 1.
    """
    if mode not in AGG_MODES:
        raise ValueError(f"unknown aggregator {mode!r}")
    conf = np.asarray(confidences, dtype=np.float64)
    if isinstance(table_row, dict):
        support = np.zeros(conf.shape[0])
        for i, c in table_row.items():
            support[i] = c
    else:
        support = np.asarray(table_row, dtype=np.float64)
    if mode == "sum":
        return float(np.sum(conf * support))
    if mode == "max":
        act = support > 0
        return float(conf[act].max()) if act.any() else float("-inf")
    enc = support.copy() if mode == "hard" else encode_soft_multihot(support, conf)
    return enc if model is None else grounding_score(model, enc)


def _encode_table(table: SupportTable, conf: np.ndarray, agg: str):
    """Sparse encodings of a support table under an MLP-style aggregator."""
    if agg == "hard":
        return table.counts
    return table.counts @ sparse.diags(conf)


def candidate_scores(table: SupportTable, model: GroundingModel | None, conf: np.ndarray,
                     agg: str = "mlp") -> np.ndarray:
    """Scores for ``table.candidates`` (rows with at least one activated rule)."""
    if len(table.candidates) == 0:
        return np.zeros(0)
    if agg == "sum":
        return np.asarray(table.counts @ conf).ravel()
    if agg == "max":
        s = table.counts.tocoo()
        out = np.full(len(table.candidates), -np.inf)
        np.maximum.at(out, s.row, conf[s.col])
        return out
    if model is None:
        raise GroundingError(f"aggregator {agg!r} needs a trained model")
    if conf.ndim == 2:  # fine-grained: average the shared MLP over the k encodings
        total = np.zeros(len(table.candidates))
        for j in range(conf.shape[1]):
            total += model.score(table.counts @ sparse.diags(conf[:, j]))
        return total / conf.shape[1]
    return model.score(_encode_table(table, conf, agg))


def entity_scores(table: SupportTable, model: GroundingModel | None, conf: np.ndarray, num_entities: int,
                  agg: str = "mlp") -> np.ndarray:
    """Grounding score of every entity; unactivated entities get the empty-encoding score."""
    if agg == "sum":
        base = 0.0
    elif agg == "max":
        base = -np.inf
    else:
        base = model.zero_score()
    out = np.full(num_entities, base)
    out[table.candidates] = candidate_scores(table, model, conf, agg)
    return out


# --------------------------------------------------------------------------- training


@dataclass
class GroundingConfig:
    hidden: int = 256
    lr: float = 1e-4
    batch: int = 16
    epochs: int = 10
    seed: int = 0
    agg: str = "mlp"
    conf_mode: str = "scalar"
    p: float = 0.0  # 0 -> follow the embedding norm
    patience: int = 0  # epochs without validation gain before stopping (0: run all epochs)

    def __post_init__(self):
        if self.agg not in AGG_MODES:
            raise ValueError(f"agg must be one of {AGG_MODES}")
        if self.conf_mode not in CONF_MODES:
            raise ValueError(f"conf_mode must be one of {CONF_MODES}")
        if self.hidden < 1 or self.batch < 1 or self.epochs < 0 or self.lr <= 0 or self.patience < 0:
            raise ValueError("hidden, batch must be >= 1, epochs, patience >= 0, lr > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundingQuery:
    head: int
    rel: int
    answer: int
    table: SupportTable
    gold: int  # row of the answer in the candidate block


def _query_block(table: SupportTable, answer: int) -> tuple[np.ndarray, sparse.csr_matrix, int]:
    pos = np.searchsorted(table.candidates, answer)
    if pos < len(table.candidates) and table.candidates[pos] == answer:
        return table.candidates, table.counts, int(pos)
    cands = np.append(table.candidates, answer)
    counts = sparse.vstack([table.counts, sparse.csr_matrix((1, table.num_rules))]).tocsr()
    return cands, counts, len(cands) - 1


def build_training_queries(graph: GraphIndex, ruleset: RuleSet, triplets, num_base_relations: int,
                           exclude_query_edge: bool = True) -> list[GroundingQuery]:
    """Ground every training triplet, hiding the triplet and its inverse from its own walks."""
    out = []
    for h, r, t in np.asarray(triplets, dtype=np.int64).tolist():
        if r not in ruleset.by_head:
            continue
        excl = [(h, r, t), (t, inverse_relation(r, num_base_relations), h)] if exclude_query_edge else []
        table = ground_query(graph, h, r, ruleset, excl)
        cands, counts, gold = _query_block(table, t)
        out.append(GroundingQuery(h, r, t, SupportTable(cands, counts), gold))
    return out


def _softmax_nll(scores: np.ndarray, offsets: np.ndarray, gold: np.ndarray, rest_score: float = 0.0,
                 rest_counts: np.ndarray | None = None):
    """Per-query log-softmax NLL over contiguous segments; returns (loss, dscores, probs, drest).

    ``rest_counts[q]`` extra entities share the logit ``rest_score`` (the empty
    encoding); ``drest`` is the summed gradient with respect to that logit.
    """
    rest = np.zeros(len(gold)) if rest_counts is None else np.asarray(rest_counts, dtype=np.float64)
    probs = np.empty_like(scores)
    losses = np.empty(len(gold))
    drest = 0.0
    for q in range(len(gold)):
        s = scores[offsets[q]:offsets[q + 1]]
        m = max(s.max(), rest_score) if rest[q] else s.max()
        e = np.exp(s - m)
        e_rest = rest[q] * np.exp(rest_score - m)
        total = e.sum() + e_rest
        probs[offsets[q]:offsets[q + 1]] = e / total
        drest += e_rest / total
        losses[q] = -(s[gold[q]] - m - np.log(total))
    d = probs.copy()
    d[offsets[:-1] + gold] -= 1.0
    return losses, d, probs, drest


def batch_loss_and_grads(model: GroundingModel, views, offsets: np.ndarray, gold: np.ndarray,
                         rest_counts: np.ndarray) -> tuple[np.ndarray, dict]:
    """Per-query NLL and gradients of their mean for one batch.

    ``views`` are stacked candidate encodings (one per confidence dimension, a
    single one for scalar confidences); scores are averaged over the views.
    """
    outs = [model.forward(v) for v in views]
    scores = sum(o[0] for o in outs) / len(views)
    losses, dscore, _, drest = _softmax_nll(scores, offsets, gold, model.zero_score(), rest_counts)
    n = len(gold)
    dscore /= n * len(views)
    drest /= n
    g = {"w1": np.zeros_like(model.w1), "b1": drest * model.w2 * (model.b1 > 0),
         "w2": drest * np.maximum(model.b1, 0.0), "b2": np.array([drest])}
    for v, (_, z) in zip(views, outs):
        g["w2"] += np.maximum(z, 0.0).T @ dscore
        g["b2"] += dscore.sum()
        dz = np.outer(dscore, model.w2) * (z > 0)
        g["b1"] += dz.sum(axis=0)
        g["w1"] += np.asarray((v.T @ dz).T)
    return losses, g


def train_grounding(graph: GraphIndex, ruleset: RuleSet, store: EmbeddingStore | None, train_triplets,
                    num_base_relations: int, config: GroundingConfig | None = None,
                    queries: list[GroundingQuery] | None = None, conf: np.ndarray | None = None,
                    eval_fn: Callable[[GroundingModel], float] | None = None) -> GroundingModel:
    """Fit the grounding MLP by maximising the softmax likelihood of the true tails.

    Each query's softmax runs over all entities: the ones activated by some rule
    plus the true answer get their own rows, every other entity shares the
    empty-encoding score, exactly as at inference.  ``queries`` may be passed to
    reuse a precomputed grounding and ``conf`` to bypass the store's confidences.
    With ``eval_fn`` (higher is better) the model is validated after every epoch
    and the best one is returned; ``config.patience`` enables early stopping.
    """
    config = config or GroundingConfig()
    if config.agg not in ("mlp", "hard"):
        raise GroundingError(f"aggregator {config.agg!r} has no trainable parameters")
    if store is None and conf is None:
        raise GroundingError("need an embedding store or precomputed confidences")
    p = config.p or (1 if store is None or store.norm in ("L1", 1) else 2)
    if conf is None:
        conf = (rule_confidence_vector(store, ruleset, p) if config.conf_mode == "finegrained"
                else rule_confidence(store, ruleset))
    t0 = time.perf_counter()
    if queries is None:
        queries = build_training_queries(graph, ruleset, train_triplets, num_base_relations)
    logger.info("grounded %d training queries in %.1fs", len(queries), time.perf_counter() - t0)

    model = GroundingModel.init(len(ruleset), config.hidden, config.seed, fingerprint=ruleset.fingerprint(),
                                agg=config.agg, conf_mode=config.conf_mode, p=float(p))
    if not queries or config.epochs == 0:
        return model
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(config.lr)
    params = model.params()
    fine = conf.ndim == 2
    encs = None
    if not fine:
        encs = [_encode_table(q.table, conf, config.agg).tocsr() for q in queries]
    best, best_metric, bad = None, -np.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(queries))
        total = 0.0
        for lo in range(0, len(order), config.batch):
            idx = order[lo:lo + config.batch]
            sizes = np.array([len(queries[i].table.candidates) for i in idx])
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            gold = np.array([queries[i].gold for i in idx])
            if fine:
                counts = sparse.vstack([queries[i].table.counts for i in idx]).tocsr()
                views = [counts @ sparse.diags(conf[:, j]) for j in range(conf.shape[1])]
            else:
                views = [sparse.vstack([encs[i] for i in idx]).tocsr()]
            losses, g = batch_loss_and_grads(model, views, offsets, gold, graph.num_entities - sizes)
            if not np.all(np.isfinite(losses)):
                raise GroundingError(f"non-finite grounding loss in epoch {epoch}, queries {idx[:5].tolist()}")
            total += losses.sum()
            for name, arr in params.items():
                opt.update(name, arr, g[name])
            model.b2 = float(params["b2"][0])
        logger.info("grounding epoch %d  nll %.4f", epoch + 1, total / len(queries))
        if eval_fn is not None:
            metric = eval_fn(model)
            logger.info("grounding epoch %d  valid %.4f", epoch + 1, metric)
            if metric > best_metric:
                best_metric, best, bad = metric, copy.deepcopy(model), 0
            else:
                bad += 1
                if config.patience and bad >= config.patience:
                    break
    model.b2 = float(params["b2"][0])
    return model if best is None else best


@dataclass
class RuleScorer:
    """Bundles a grounding model with the confidences it was trained against."""

    model: GroundingModel | None
    conf: np.ndarray
    agg: str = "mlp"
    cache: dict = field(default_factory=dict)

    def scores(self, graph: GraphIndex, ruleset: RuleSet, head: int, rel: int) -> np.ndarray:
        key = (head, rel)
        if key not in self.cache:
            self.cache[key] = ground_query(graph, head, rel, ruleset)
        return entity_scores(self.cache[key], self.model, self.conf, graph.num_entities, self.agg)
