"""Knowledge-graph ingestion, inverse augmentation, rule files and indexing."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

INVERSE_SUFFIX = "_inv"
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Raised for malformed dataset or rule files."""


class Triplet(NamedTuple):
    head: int
    rel: int
    tail: int


class Vocab:
    """Dense string <-> id mapping in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        name = name.strip()
        idx = self.ids.get(name)
        if idx is None:
            idx = len(self.names)
            self.ids[name] = idx
            self.names.append(name)
        return idx

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.ids[name]

    def __contains__(self, name: str) -> bool:
        return name in self.ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.names == other.names

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, n in enumerate(self.names):
                fh.write(f"{i}\t{n}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'id<TAB>name'")
                pairs.append((int(parts[0]), parts[1]))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DataError(f"{path}: ids are not dense 0..n-1")
        return cls(n for _, n in pairs)


def inverse_relation(r, num_base_relations: int):
    """Id of the inverse relation; the map is an involution on ``[0, 2R)``."""
    return (r + num_base_relations) % (2 * num_base_relations)


def read_raw_triplets(path: str | os.PathLike) -> list[tuple[str, str, str]]:
    """Parse ``head<TAB>relation<TAB>tail`` lines into stripped string triples."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n\r").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = (p.strip() for p in parts)
            if not (h and r and t):
                raise DataError(f"{path}:{lineno}: empty field")
            rows.append((h, r, t))
    if not rows:
        raise DataError(f"{path}: no triplets")
    return rows


def load_triplets(path, entities: Vocab | None = None, relations: Vocab | None = None):
    """Load a triplet file, assigning dense ids in first-appearance order.

    Existing vocabularies are extended in place, which lets valid/test files
    share ids with train.  Duplicate lines are stored once.

    Returns ``(triplets, entities, relations)`` with ``triplets`` an
    ``(n, 3)`` int64 array.
    """
    entities = Vocab() if entities is None else entities
    relations = Vocab() if relations is None else relations
    seen: dict[tuple[int, int, int], None] = {}
    for h, r, t in read_raw_triplets(path):
        key = (entities.add(h), relations.add(r), entities.add(t))
        seen.setdefault(key, None)
    arr = np.array(list(seen), dtype=np.int64).reshape(-1, 3)
    return arr, entities, relations


def augment_inverses(triplets, num_base_relations: int) -> np.ndarray:
    """Append ``(t, r + R, h)`` for every ``(h, r, t)``; duplicates are dropped."""
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(triplets) and triplets[:, 1].max() >= num_base_relations:
        raise DataError("relation id out of range for inverse augmentation")
    inv = np.stack([triplets[:, 2], triplets[:, 1] + num_base_relations, triplets[:, 0]], axis=1)
    both = np.concatenate([triplets, inv])
    _, first = np.unique(both, axis=0, return_index=True)
    return both[np.sort(first)]


def augmented_relation_vocab(relations: Vocab) -> Vocab:
    return Vocab(list(relations.names) + [n + INVERSE_SUFFIX for n in relations.names])


# --------------------------------------------------------------------------- rules


@dataclass(frozen=True)
class Rule:
    body: tuple[int, ...]
    head: int
    prior: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.body) == 0:
            raise DataError("rule body must be non-empty")

    @property
    def length(self) -> int:
        return len(self.body)


class RuleSet:
    """Ordered collection of chain rules; order defines encoding positions."""

    def __init__(self, rules: Iterable[Rule] = ()):
        self.rules: list[Rule] = list(rules)
        self.by_head: dict[int, list[int]] = defaultdict(list)
        for i, rule in enumerate(self.rules):
            self.by_head[rule.head].append(i)
        self._members = {(r.body, r.head) for r in self.rules}
        self._padded = None

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __getitem__(self, i: int) -> Rule:
        return self.rules[i]

    def __contains__(self, item) -> bool:
        if isinstance(item, Rule):
            item = (item.body, item.head)
        return tuple(item) in self._members

    @property
    def max_length(self) -> int:
        return max((r.length for r in self.rules), default=0)

    def fingerprint(self) -> bytes:
        """SHA-256 over the ordered (head, body) list; priors are excluded."""
        h = hashlib.sha256()
        for r in self.rules:
            h.update((",".join(map(str, (r.head, *r.body))) + ";").encode())
        return h.digest()

    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Bodies padded with -1 to ``(n, max_len)``, plus lengths and heads (read-only, cached)."""
        if self._padded is None:
            self._padded = self._build_padded()
        return self._padded

    def _build_padded(self):
        n, lmax = len(self.rules), max(self.max_length, 1)
        bodies = np.full((n, lmax), -1, dtype=np.int64)
        for i, r in enumerate(self.rules):
            bodies[i, : r.length] = r.body
        lengths = np.array([r.length for r in self.rules], dtype=np.int64)
        heads = np.array([r.head for r in self.rules], dtype=np.int64)
        for a in (bodies, lengths, heads):
            a.setflags(write=False)
        return bodies, lengths, heads

    def validate(self, num_relations: int, max_len: int | None = None) -> None:
        for i, r in enumerate(self.rules):
            ids = (*r.body, r.head)
            if min(ids) < 0 or max(ids) >= num_relations:
                raise DataError(f"rule {i}: relation id out of range")
            if max_len is not None and r.length > max_len:
                raise DataError(f"rule {i}: body length {r.length} exceeds {max_len}")


def _resolve_relation(name: str, relations: Vocab, num_base: int | None) -> int | None:
    if name in relations:
        return relations[name]
    if name.endswith(INVERSE_SUFFIX) and num_base is not None:
        base = name[: -len(INVERSE_SUFFIX)]
        if base in relations and relations[base] < num_base:
            return inverse_relation(relations[base], num_base)
    return None


def parse_rule_line(line: str, relations: Vocab, num_base: int | None = None, max_len: int = 3,
                    where: str = "") -> Rule:
    """Parse ``head<TAB>body...[<TAB>prior]`` (whitespace-only separation also accepted)."""
    prior = None
    if "\t" in line:
        fields = [f.strip() for f in line.strip().split("\t")]
        if len(fields) not in (2, 3):
            raise DataError(f"{where}: expected head, body and optional prior")
        tokens = [fields[0], *fields[1].split()]
        if len(fields) == 3:
            prior = float(fields[2])
    else:
        tokens = line.split()
        if len(tokens) >= 3 and _resolve_relation(tokens[-1], relations, num_base) is None:
            try:
                prior = float(tokens[-1])
                tokens = tokens[:-1]
            except ValueError:
                pass
    if len(tokens) < 2:
        raise DataError(f"{where}: a rule needs a head and at least one body relation")
    ids = []
    for name in tokens:
        rid = _resolve_relation(name, relations, num_base)
        if rid is None:
            raise DataError(f"{where}: unknown relation {name!r}")
        ids.append(rid)
    if len(ids) - 1 > max_len:
        raise DataError(f"{where}: body length {len(ids) - 1} exceeds maximum {max_len}")
    return Rule(body=tuple(ids[1:]), head=ids[0], prior=prior)


def load_rules(path, relations: Vocab, num_base: int | None = None, max_len: int = 3) -> RuleSet:
    """Read a rule file; the body order is kept exactly as written.

    ``relations`` may be the augmented vocabulary (names with the inverse
    suffix resolve directly) or the base one combined with ``num_base``.
    """
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rules.append(parse_rule_line(line, relations, num_base, max_len, where=f"{path}:{lineno}"))
    return RuleSet(rules)


def save_rules(ruleset: RuleSet, path, relations: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in ruleset:
            line = relations.names[r.head] + "\t" + " ".join(relations.names[b] for b in r.body)
            if r.prior is not None:
                line += f"\t{r.prior:.6g}"
            fh.write(line + "\n")


# --------------------------------------------------------------------------- index


class GraphIndex:
    """Immutable adjacency over ``(entity, relation) -> sorted tails``.

    Stored as CSR: row ``h * num_relations + r`` lists the tails of ``(h, r)``.
    """

    def __init__(self, triplets, num_entities: int, num_relations: int):
        t = np.unique(np.asarray(triplets, dtype=np.int64).reshape(-1, 3), axis=0)
        if len(t):
            if t[:, [0, 2]].max() >= num_entities or t[:, 1].max() >= num_relations:
                raise DataError("triplet ids exceed declared vocabulary sizes")
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.triplets = t
        rows = t[:, 0] * self.num_relations + t[:, 1]
        order = np.lexsort((t[:, 2], rows))
        self.indices = np.ascontiguousarray(t[order, 2])
        counts = np.bincount(rows, minlength=self.num_entities * self.num_relations)
        self.indptr = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        self._keys = np.sort(self.encode(t))
        for a in (self.indices, self.indptr, self._keys, self.triplets):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.triplets)

    def encode(self, triplets) -> np.ndarray:
        t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        return (t[:, 0] * self.num_relations + t[:, 1]) * self.num_entities + t[:, 2]

    def neighbors(self, h: int, r: int) -> np.ndarray:
        row = h * self.num_relations + r
        return self.indices[self.indptr[row]: self.indptr[row + 1]]

    def contains_many(self, triplets) -> np.ndarray:
        keys = self.encode(triplets)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return (len(self._keys) > 0) & (self._keys[pos] == keys)

    def __contains__(self, triplet) -> bool:
        return bool(self.contains_many([triplet])[0])

    def relation_matrix(self, r: int) -> sparse.csr_matrix:
        """Sparse 0/1 adjacency of relation ``r`` (rows heads, cols tails)."""
        sel = self.triplets[self.triplets[:, 1] == r]
        n = self.num_entities
        return sparse.csr_matrix((np.ones(len(sel)), (sel[:, 0], sel[:, 2])), shape=(n, n))


def build_index(triplets, num_entities: int | None = None, num_relations: int | None = None) -> GraphIndex:
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if num_entities is None:
        num_entities = int(t[:, [0, 2]].max()) + 1 if len(t) else 0
    if num_relations is None:
        num_relations = int(t[:, 1].max()) + 1 if len(t) else 0
    return GraphIndex(t, num_entities, num_relations)


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """A prepared dataset: augmented id triplets per split plus vocabularies."""

    entities: Vocab
    relations: Vocab  # augmented, 2 * num_base entries
    num_base_relations: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def train_index(self) -> GraphIndex:
        return GraphIndex(self.train, self.num_entities, self.num_relations)

    def all_index(self) -> GraphIndex:
        return GraphIndex(np.concatenate([self.train, self.valid, self.test]), self.num_entities,
                          self.num_relations)

    def base(self, split: str) -> np.ndarray:
        t = getattr(self, split)
        return t[t[:, 1] < self.num_base_relations]


def read_dataset(dataset_dir) -> Dataset:
    """Load raw ``train/valid/test.txt`` and add inverse triplets."""
    d = Path(dataset_dir)
    missing = [f"{s}.txt" for s in SPLITS if not (d / f"{s}.txt").exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)} (expected train.txt, valid.txt, test.txt)")
    ents, rels = Vocab(), Vocab()
    raw = {s: load_triplets(d / f"{s}.txt", ents, rels)[0] for s in SPLITS}
    nb = len(rels)
    aug = {s: augment_inverses(raw[s], nb) for s in SPLITS}
    return Dataset(ents, augmented_relation_vocab(rels), nb, aug["train"], aug["valid"], aug["test"])


def _write_ids(path: Path, triplets: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triplets:
            fh.write(f"{h}\t{r}\t{t}\n")


def _read_ids(path: Path) -> np.ndarray:
    arr = np.loadtxt(path, dtype=np.int64, ndmin=2, delimiter="\t")
    return arr.reshape(-1, 3)


def save_prepared(ds: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.entities.save(out / "entities.dict")
    ds.relations.save(out / "relations.dict")
    for s in SPLITS:
        _write_ids(out / f"{s}.ids", getattr(ds, s))
    manifest = {
        "num_entities": ds.num_entities,
        "num_relations": ds.num_relations,
        "num_base_relations": ds.num_base_relations,
        "inverse_suffix": INVERSE_SUFFIX,
        "splits": {s: int(len(getattr(ds, s))) for s in SPLITS},
        "sha256": {s: hashlib.sha256(getattr(ds, s).tobytes()).hexdigest() for s in SPLITS},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_prepared(prepared_dir) -> Dataset:
    d = Path(prepared_dir)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"{d}: no manifest.json; run `rulekg prepare` first")
    with open(d / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    parts = {s: _read_ids(d / f"{s}.ids") for s in SPLITS}
    return Dataset(Vocab.load(d / "entities.dict"), Vocab.load(d / "relations.dict"),
                   int(manifest["num_base_relations"]), parts["train"], parts["valid"], parts["test"])


def open_dataset(path) -> Dataset:
    """Accept either a prepared directory or a raw dataset directory."""
    p = Path(path)
    if (p / "manifest.json").exists():
        return load_prepared(p)
    if (p / "prepared" / "manifest.json").exists():
        return load_prepared(p / "prepared")
    return read_dataset(p)


# --------------------------------------------------------------------------- miner


def _walk_matrix(mats: Sequence[sparse.csr_matrix], body: Sequence[int]) -> sparse.csr_matrix:
    m = mats[body[0]]
    for r in body[1:]:
        m = m @ mats[r]
    return m


def rule_statistics(graph: GraphIndex, body: Sequence[int], head: int, mats=None) -> tuple[int, int]:
    """(support, body walk count) for ``body -> head`` counted over walks."""
    if mats is None:
        mats = [graph.relation_matrix(r) for r in range(graph.num_relations)]
    walks = _walk_matrix(mats, body)
    support = walks.multiply(mats[head]).sum()
    return int(round(support)), int(round(walks.sum()))


def _candidate_bodies(graph: GraphIndex, head: int, max_len: int, max_triplets: int,
                      rng: np.random.Generator) -> Counter:
    """Relation sequences connecting the endpoints of sampled ``head`` triplets.

    The sampled head edge itself (and its inverse) is not used inside its own
    paths, so rules are proposed only when some other evidence connects the pair.
    """
    nr = graph.num_relations
    facts = graph.triplets[graph.triplets[:, 1] == head]
    if len(facts) > max_triplets:
        facts = facts[rng.choice(len(facts), size=max_triplets, replace=False)]
    out_edges: dict[int, list[tuple[int, int]]] = defaultdict(list)
    pair_rels: dict[tuple[int, int], list[int]] = defaultdict(list)
    for h, r, t in graph.triplets.tolist():
        out_edges[h].append((r, t))
        pair_rels[(h, t)].append(r)
    nb = nr // 2
    counts: Counter = Counter()
    for x, _, y in facts.tolist():
        banned = {(x, head, y), (y, inverse_relation(head, nb), x)}
        # length 1
        for r in pair_rels.get((x, y), ()):
            if (x, r, y) not in banned:
                counts[(r,)] += 1
        if max_len < 2:
            continue
        in_y = [(inverse_relation(r, nb), a) for r, a in out_edges.get(y, ())]  # edges a -r-> y
        for r1, a in out_edges.get(x, ()):
            if (x, r1, a) in banned:
                continue
            # length 2: x -r1-> a -r2-> y
            for r2 in pair_rels.get((a, y), ()):
                if (a, r2, y) not in banned:
                    counts[(r1, r2)] += 1
            if max_len < 3:
                continue
            # length 3: x -r1-> a -r2-> b -r3-> y
            for r3, b in in_y:
                if (b, r3, y) in banned:
                    continue
                for r2 in pair_rels.get((a, b), ()):
                    if (a, r2, b) not in banned:
                        counts[(r1, r2, r3)] += 1
    counts.pop((head,), None)
    return counts


def mine_candidate_rules(graph: GraphIndex, max_len: int = 3, min_support: int = 1,
                         top_k_per_head: int = 100, max_candidates_per_head: int = 2000,
                         max_triplets_per_head: int = 500, seed: int = 0) -> RuleSet:
    """Enumerate closed chain rules and keep the best per head relation.

    Candidate bodies come from paths between the endpoints of (a sample of)
    head triplets.  Support and body walk counts of each candidate are then
    computed exactly with sparse walk matrices; candidates with support below
    ``min_support`` are dropped and the rest ranked by ``support / walks``.
    The returned rules carry that ratio as ``prior``.
    """
    rng = np.random.default_rng(seed)
    mats = [graph.relation_matrix(r) for r in range(graph.num_relations)]
    rules: list[Rule] = []
    for head in range(graph.num_relations):
        cands = _candidate_bodies(graph, head, max_len, max_triplets_per_head, rng)
        scored = []
        for body, _ in sorted(cands.items(), key=lambda kv: (-kv[1], kv[0]))[:max_candidates_per_head]:
            support, walks = rule_statistics(graph, body, head, mats)
            if support >= min_support and walks > 0:
                scored.append((support / walks, support, body))
        scored.sort(key=lambda s: (-s[0], -s[1], s[2]))
        rules.extend(Rule(body=b, head=head, prior=ratio) for ratio, _, b in scored[:top_k_per_head])
    logger.info("mined %d rules over %d head relations", len(rules), graph.num_relations)
    return RuleSet(rules)
