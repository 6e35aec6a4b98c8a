"""Integrated scoring, expected-rank computation and link-prediction metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import GraphIndex, RuleSet, inverse_relation
from .grounding import RuleScorer
from .train import EmbeddingStore

SCORE_MODES = ("normalized", "eq8")
SCORE_SOURCES = ("emb", "rule", "both")


class EvalError(ValueError):
    pass


def _rescale(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map of ``values`` onto ``[lo, hi]``; a constant vector maps to the midpoint."""
    finite = np.isfinite(values)
    if not finite.any():
        return np.full(values.shape, 0.5 * (lo + hi))
    vmin, vmax = values[finite].min(), values[finite].max()
    if vmax == vmin:
        out = np.full(values.shape, 0.5 * (lo + hi))
    else:
        out = lo + (values - vmin) * (hi - lo) / (vmax - vmin)
    out[~finite & (values < 0)] = lo - 1.0  # e.g. "max" over no activated rule
    return out


def integrated_score(kge_scores, grounding_scores, beta: float, mode: str = "normalized") -> np.ndarray:
    """Blend KGE and grounding scores for one query.

    ``eq8``: ``s_t + beta * s_g``.  ``normalized``: ``s_g`` is mapped onto the
    query's KGE score range, then ``beta * s_g + (1 - beta) * s_t``.
    """
    s_t = np.asarray(kge_scores, dtype=np.float64)
    s_g = np.asarray(grounding_scores, dtype=np.float64)
    if s_t.shape != s_g.shape:
        raise EvalError(f"score length mismatch: {s_t.shape} vs {s_g.shape}")
    if mode == "eq8":
        return s_t + beta * s_g
    if mode != "normalized":
        raise EvalError(f"unknown score mode {mode!r}")
    if not 0.0 <= beta <= 1.0:
        raise EvalError("beta must lie in [0, 1] in normalized mode")
    if beta == 0.0:
        return s_t.copy()
    s_hat = _rescale(s_g, float(s_t.min()), float(s_t.max()))
    if beta == 1.0:
        return s_hat
    return beta * s_hat + (1.0 - beta) * s_t


def expected_rank(scores, true_index: int, filter_mask=None) -> float:
    """Mean rank of the true entity over uniformly random orderings of ties.

    ``filter_mask`` marks entities to ignore (other known answers); the true
    entity itself is never ignored.
    """
    s = np.asarray(scores, dtype=np.float64)
    target = s[true_index]
    keep = np.ones(len(s), dtype=bool) if filter_mask is None else ~np.asarray(filter_mask, dtype=bool)
    if not keep[true_index]:
        raise EvalError("the true answer is masked")
    keep = keep.copy()
    keep[true_index] = False
    others = s[keep]
    return 1.0 + float(np.count_nonzero(others > target)) + 0.5 * float(np.count_nonzero(others == target))


@dataclass
class EvalReport:
    ranks: np.ndarray
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int
    label: str = ""

    @classmethod
    def from_ranks(cls, ranks, label: str = "") -> "EvalReport":
        r = np.asarray(ranks, dtype=np.float64)
        if len(r) == 0:
            return cls(r, 0.0, 0.0, 0.0, 0.0, 0, label)
        return cls(r, float(np.mean(1.0 / r)), 100.0 * float(np.mean(r <= 1)), 100.0 * float(np.mean(r <= 3)),
                   100.0 * float(np.mean(r <= 10)), len(r), label)

    def to_dict(self, with_ranks: bool = False) -> dict:
        out = {"mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3, "hits10": self.hits10,
               "n_queries": self.n_queries}
        if self.label:
            out["label"] = self.label
        if with_ranks:
            out["ranks"] = self.ranks.tolist()
        return out

    def to_json(self, with_ranks: bool = False) -> str:
        return json.dumps(self.to_dict(with_ranks), indent=2, sort_keys=True)

    def to_text(self) -> str:
        head = f"[{self.label}] " if self.label else ""
        return (f"{head}MRR {self.mrr:.4f}  Hits@1 {self.hits1:.2f}  Hits@3 {self.hits3:.2f}  "
                f"Hits@10 {self.hits10:.2f}  queries {self.n_queries}")


@dataclass
class ModelBundle:
    """Everything needed to answer queries.

    ``graph`` is the graph rules are grounded on (the training graph);
    ``known`` holds every known triplet and drives filtering.
    """

    store: EmbeddingStore
    graph: GraphIndex
    known: GraphIndex
    num_base_relations: int
    ruleset: RuleSet | None = None
    scorer: RuleScorer | None = None
    dumps: list = field(default_factory=list)


def _queries(test_triplets, num_base_relations: int) -> np.ndarray:
    t = np.asarray(test_triplets, dtype=np.int64).reshape(-1, 3)
    inv = np.stack([t[:, 2], inverse_relation(t[:, 1], num_base_relations), t[:, 0]], axis=1)
    out = np.empty((2 * len(t), 3), dtype=np.int64)
    out[0::2] = t
    out[1::2] = inv
    return out


def query_scores(bundle: ModelBundle, head: int, rel: int, kge_row: np.ndarray | None, beta: float,
                 mode: str, score: str) -> np.ndarray:
    if score == "emb":
        return kge_row
    if bundle.scorer is None or bundle.ruleset is None:
        raise EvalError("rule scoring requested but the bundle has no grounding scorer / rule set")
    s_g = bundle.scorer.scores(bundle.graph, bundle.ruleset, head, rel)
    if score == "rule":
        return s_g
    return integrated_score(kge_row, s_g, beta, mode)


def evaluate(bundle: ModelBundle, test_triplets, beta: float = 0.0, mode: str = "normalized",
             filtered: bool = True, score: str = "both", dump: bool = False, label: str = "",
             batch: int = 64) -> EvalReport:
    """Rank the answers of ``(h, r, ?)`` and ``(t, r_inv, ?)`` for every test triplet."""
    if score not in SCORE_SOURCES:
        raise EvalError(f"score must be one of {SCORE_SOURCES}")
    if mode not in SCORE_MODES:
        raise EvalError(f"mode must be one of {SCORE_MODES}")
    if bundle.store is None and score != "rule":
        raise EvalError("bundle has no embedding store")
    qs = _queries(test_triplets, bundle.num_base_relations)
    ranks = np.empty(len(qs))
    for lo in range(0, len(qs), batch):
        block = qs[lo:lo + batch]
        kge = None
        if score != "rule":
            kge = bundle.store.score_all_tails(block[:, 0], block[:, 1])
        for i, (h, r, t) in enumerate(block.tolist()):
            row = kge[i] if kge is not None else None
            s = query_scores(bundle, h, r, row, beta, mode, score)
            mask = None
            if filtered:
                mask = np.zeros(len(s), dtype=bool)
                mask[bundle.known.neighbors(h, r)] = True
                mask[t] = False
            ranks[lo + i] = expected_rank(s, t, mask)
            if dump:
                bundle.dumps.append({"query": (h, r, t), "scores": s.copy(), "mask": mask})
    return EvalReport.from_ranks(ranks, label)
