"""Rule-inferrability diagnostics: share of edges lying on short undirected cycles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse


class AnalysisError(ValueError):
    pass


@dataclass
class CycleReport:
    proportion_2cycle: float
    proportion_3cycle: float
    proportion_le3cycle: float
    n_edges: int
    n_2cycle: int
    n_3cycle: int
    n_le3cycle: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return (f"edges {self.n_edges}  2-cycle {self.proportion_2cycle:.3f}  "
                f"3-cycle {self.proportion_3cycle:.3f}  <=3-cycle {self.proportion_le3cycle:.3f}")


def cycle_membership(triplets, num_entities: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge flags ``(in_2cycle, in_3cycle)`` with edge directions ignored.

    An edge lies on a 2-cycle when another stored edge joins the same pair of
    entities, and on a 3-cycle when some third entity is adjacent to both ends.
    Self-loops never lie on a 3-cycle.
    """
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(t) == 0:
        raise AnalysisError("cannot analyse an empty graph")
    h, tl = t[:, 0], t[:, 2]
    n = int(num_entities if num_entities is not None else max(h.max(), tl.max()) + 1)
    lo, hi = np.minimum(h, tl), np.maximum(h, tl)
    pair = lo * n + hi
    _, inv, counts = np.unique(pair, return_inverse=True, return_counts=True)
    in2 = counts[inv] > 1

    off = lo != hi
    adj = sparse.coo_matrix((np.ones(off.sum()), (lo[off], hi[off])), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.float64).tocsr()
    common = adj @ adj
    in3 = np.zeros(len(t), dtype=bool)
    in3[off] = np.asarray(common[lo[off], hi[off]]).ravel() > 0
    return in2, in3


def cycle_edge_proportion(triplets, max_len: int = 3, num_entities: int | None = None) -> CycleReport:
    """Fraction of edges on 2- and 3-membered cycles.  ``max_len=2`` skips 3-cycles."""
    if max_len not in (2, 3):
        raise AnalysisError("max_len must be 2 or 3")
    in2, in3 = cycle_membership(triplets, num_entities)
    if max_len == 2:
        in3 = np.zeros_like(in3)
    n = len(in2)
    both = in2 | in3
    return CycleReport(float(in2.mean()), float(in3.mean()), float(both.mean()), n,
                       int(in2.sum()), int(in3.sum()), int(both.sum()))


def corrupt_triplets(triplets, fraction: float, num_entities: int, num_relations: int,
                     seed: int = 0) -> np.ndarray:
    """Replace a random ``fraction`` of triplets with uniformly sampled triplets."""
    if not 0.0 <= fraction <= 1.0:
        raise AnalysisError("corruption fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = np.array(triplets, dtype=np.int64).reshape(-1, 3)
    n = int(round(fraction * len(out)))
    idx = rng.choice(len(out), size=n, replace=False)
    out[idx, 0] = rng.integers(0, num_entities, n)
    out[idx, 1] = rng.integers(0, num_relations, n)
    out[idx, 2] = rng.integers(0, num_entities, n)
    return out


def corruption_study(triplets, percents, num_entities: int, num_relations: int, seed: int = 0,
                     max_len: int = 3) -> dict[float, CycleReport]:
    return {p: cycle_edge_proportion(corrupt_triplets(triplets, p / 100.0, num_entities, num_relations, seed),
                                     max_len, num_entities)
            for p in percents}


def dataset_statistics(ds) -> dict:
    """Entity / relation / split sizes of a :class:`rulekg.data.Dataset`."""
    return {"entities": ds.num_entities, "relations": ds.num_base_relations,
            "train": len(ds.base("train")), "valid": len(ds.base("valid")), "test": len(ds.base("test"))}
