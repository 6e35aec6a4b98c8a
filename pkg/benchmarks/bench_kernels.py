"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--dim 500]

Inputs are synthetic but sized like one UMLS training step (256 positives with
64 negatives each, 256 rules with 64 negatives each).
"""

import argparse
import timeit

import numpy as np

from rulekg import _fallback
from rulekg.data import build_index

try:
    from rulekg import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def make_inputs(dim: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    n_ent, n_rel, n_rules, n_trip, n_rule_rows = 135, 92, 9000, 256 * 65, 256 * 65
    rel = rng.uniform(-np.pi, np.pi, (n_rel, dim))
    lengths = rng.integers(1, 4, n_rule_rows)
    bodies = np.full((n_rule_rows, 3), -1, dtype=np.int64)
    for i, l in enumerate(lengths):
        bodies[i, :l] = rng.integers(0, n_rel, l)
    trip = rng.integers(0, [n_ent, n_rel, n_ent], (n_trip, 3))
    graph = build_index(rng.integers(0, [n_ent, n_rel, n_ent], (6000, 3)), n_ent, n_rel)
    return {
        "ent_re": rng.normal(size=(n_ent, dim)), "ent_im": rng.normal(size=(n_ent, dim)),
        "rel_a": np.cos(rel), "rel_b": np.sin(rel), "rel": rel,
        "rules": rng.uniform(-np.pi, np.pi, (n_rules, 1, dim)),
        "h": np.ascontiguousarray(trip[:, 0]), "r": np.ascontiguousarray(trip[:, 1]),
        "t": np.ascontiguousarray(trip[:, 2]),
        "bodies": bodies, "lengths": lengths, "heads": rng.integers(0, n_rel, n_rule_rows),
        "rids": rng.integers(0, n_rules, n_rule_rows),
        "indptr": graph.indptr, "indices": graph.indices, "n_rel": n_rel, "n_ent": n_ent,
        "param": rng.normal(size=n_ent * dim), "grad": rng.normal(size=n_ent * dim),
    }


def cases(impl, x: dict) -> dict:
    d = impl.kge_forward(x["ent_re"], x["ent_im"], x["rel_a"], x["rel_b"], x["h"], x["r"], x["t"], 0, 1)
    dr = impl.rule_forward(x["rel"], x["rules"], x["bodies"], x["lengths"], x["heads"], x["rids"], 0, 1, 1)
    coef = np.ones_like(d)
    no_excl = np.zeros((0, 3), dtype=np.int64)
    m, v = np.zeros_like(x["param"]), np.zeros_like(x["param"])

    def kge_bwd():
        g = [np.zeros_like(x["ent_re"]), np.zeros_like(x["ent_im"]), np.zeros_like(x["rel"])]
        impl.kge_backward(x["ent_re"], x["ent_im"], x["rel_a"], x["rel_b"], x["h"], x["r"], x["t"], coef, d, 0, 1,
                          *g)

    def rule_bwd():
        impl.rule_backward(x["rel"], x["rules"], x["bodies"], x["lengths"], x["heads"], x["rids"], 0, 1, 1,
                           np.ones_like(dr), dr, np.zeros_like(x["rel"]), np.zeros_like(x["rules"]))

    def walks():
        for start in range(0, x["n_ent"], 5):
            impl.walk_counts(x["indptr"], x["indices"], x["n_rel"], x["n_ent"], start,
                             np.array([1, 2, 3], dtype=np.int64), no_excl)

    return {
        "kge_forward": lambda: impl.kge_forward(x["ent_re"], x["ent_im"], x["rel_a"], x["rel_b"], x["h"], x["r"],
                                                x["t"], 0, 1),
        "kge_backward": kge_bwd,
        "rule_forward": lambda: impl.rule_forward(x["rel"], x["rules"], x["bodies"], x["lengths"], x["heads"],
                                                  x["rids"], 0, 1, 1),
        "rule_backward": rule_bwd,
        "walk_counts": walks,
        "adam_step": lambda: impl.adam_step(x["param"], x["grad"], m, v, 1e-3, 0.9, 0.999, 1e-8, 1),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dim", type=int, default=500)
    args = ap.parse_args()
    x = make_inputs(args.dim)
    impls = {"python": _fallback}
    if _kernels is not None:
        impls["compiled"] = _kernels
    timings = {name: {k: min(timeit.repeat(f, number=1, repeat=args.repeat)) for k, f in cases(impl, x).items()}
               for name, impl in impls.items()}
    print(f"{'kernel':<14}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for k in timings["python"]:
        py = timings["python"][k] * 1e3
        if "compiled" in timings:
            c = timings["compiled"][k] * 1e3
            print(f"{k:<14}{py:>12.2f}{c:>14.2f}{py / c:>9.1f}x")
        else:
            print(f"{k:<14}{py:>12.2f}{'n/a':>14}")


if __name__ == "__main__":
    main()
