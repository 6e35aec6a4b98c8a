"""Command line entry point: ``rulekg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

logger = logging.getLogger("rulekg")

PROFILE_DIR = Path(__file__).with_name("profiles")

# run-level settings beyond the training config, with their defaults
RUN_DEFAULTS = {
    "grounding": "scalar",
    "agg": "mlp",
    "p": 0.0,
    "grounding_lr": 1e-4,
    "grounding_batch": 16,
    "grounding_epochs": 10,
    "grounding_hidden": 256,
    "grounding_validate": True,
    "grounding_patience": 3,
    "beta": 0.2,
    "score_mode": "normalized",
    "filtered": True,
    "score": "both",
    "checkpoint_every": 500,
    "max_rule_len": 3,
}

_FLAG_KEYS = {
    "seed": "seed", "kge": "kge", "rule_variant": "rule_variant", "grounding": "grounding", "agg": "agg",
    "score_mode": "score_mode", "filtered": "filtered", "beta": "beta", "alpha": "alpha", "steps": "steps",
    "dim": "dim", "lr": "lr", "score": "score",
}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------- config


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, val = (x.strip() for x in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def _coerce(key: str, value, defaults: dict):
    ref = defaults.get(key)
    if ref is None or isinstance(value, type(ref)):
        return value
    if isinstance(ref, bool):
        return parse_bool(value)
    return type(ref)(value)


def resolve_config(args) -> dict:
    """Defaults, then the dataset profile, then ``--config``, then explicit flags."""
    from .train import TrainConfig

    defaults = {**TrainConfig().to_dict(), **RUN_DEFAULTS}
    cfg = dict(defaults)
    profile = getattr(args, "profile", None)
    if profile is None and getattr(args, "data", None):
        name = Path(args.data).name.lower()
        if (PROFILE_DIR / f"{name}.conf").exists():
            profile = name
    if profile:
        p = Path(profile)
        if not p.exists():
            p = PROFILE_DIR / f"{profile}.conf"
        if not p.exists():
            raise CliError(f"unknown profile {profile!r}")
        cfg.update(read_config_file(p))
        cfg["profile"] = str(p.name)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    unknown = set(cfg) - set(defaults) - {"profile"}
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return {k: _coerce(k, v, defaults) for k, v in cfg.items()}


def data_root() -> Path:
    return Path(os.environ.get("RULE_DATA_DIR", "data"))


def resolve_data(path: str | None) -> Path:
    if path is None:
        raise CliError("no dataset given (--data)")
    p = Path(path)
    if p.exists():
        return p
    q = data_root() / path
    if q.exists():
        return q
    raise CliError(f"dataset {path!r} not found (looked in . and {data_root()})")


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# --------------------------------------------------------------------------- shared loading


def _load_dataset(args):
    from .data import open_dataset

    return open_dataset(resolve_data(args.data))


def _load_rules(args, ds, cfg):
    from .data import load_rules

    if not args.rules:
        raise CliError("--rules is required")
    return load_rules(args.rules, ds.relations, ds.num_base_relations, cfg["max_rule_len"])


def _run_dir(args) -> Path:
    if not args.run:
        raise CliError("--run is required")
    return Path(args.run)


def _load_store(run: Path, ruleset):
    from .checkpoint import load_store

    path = run / "embeddings.rulekg"
    if not path.exists():
        raise CliError(f"{path} not found; run train-joint first")
    return load_store(path, ruleset.fingerprint())


def _confidences(store, ruleset, cfg):
    from .grounding import rule_confidence, rule_confidence_vector

    if cfg["grounding"] == "finegrained":
        return rule_confidence_vector(store, ruleset, int(cfg["p"]) or None)
    return rule_confidence(store, ruleset)


# --------------------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    from .data import read_dataset, save_prepared

    src = resolve_data(args.data)
    ds = read_dataset(src)
    out = Path(args.out) if args.out else src / "prepared"
    manifest = save_prepared(ds, out)
    print(f"prepared {src} -> {out}: {manifest['num_entities']} entities, "
          f"{manifest['num_relations']} relations (with inverses), splits {manifest['splits']}")
    return 0


def cmd_mine(args) -> int:
    from .data import mine_candidate_rules, save_rules

    cfg = resolve_config(args)
    ds = _load_dataset(args)
    rs = mine_candidate_rules(ds.train_index(), max_len=cfg["max_rule_len"], min_support=args.min_support,
                              top_k_per_head=args.top_k, seed=cfg["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rules(rs, out, ds.relations)
    print(f"wrote {len(rs)} rules to {out}")
    return 0


def cmd_train_joint(args) -> int:
    import numpy as np

    from .checkpoint import load_store, save_store
    from .evaluate import ModelBundle, evaluate
    from .train import JointTrainer, TrainConfig, init_store, train_joint

    cfg = resolve_config(args)
    ds = _load_dataset(args)
    rs = _load_rules(args, ds, cfg)
    run = _run_dir(args)
    run.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig.from_mapping(cfg)
    graph, known = ds.train_index(), ds.all_index()
    fp = rs.fingerprint()
    meta = {"command": "train-joint", "config": cfg, "rules": str(args.rules), "rules_sha256": fp.hex(),
            "data": str(resolve_data(args.data)), "num_rules": len(rs)}
    _write_json(run / "meta.json", meta)

    store = init_store(graph.num_entities, graph.num_relations, rs, tc)
    trainer = JointTrainer(store, graph, rs, tc)
    best = None
    resume = run / "resume.npz"
    if args.resume and resume.exists():
        with np.load(resume) as st:
            trainer.load_state(dict(st))
        if (run / "embeddings.rulekg").exists():
            best = load_store(run / "embeddings.rulekg", fp)
        logger.info("resumed at step %d", trainer.step_count)

    def eval_fn(s):
        bundle = ModelBundle(s, graph, known, ds.num_base_relations)
        return evaluate(bundle, ds.base("valid"), score="emb", filtered=cfg["filtered"]).mrr

    def checkpoint_fn(tr, is_best):
        np.savez(resume, **tr.state())
        if is_best:
            save_store(tr.store, run / "embeddings.rulekg", fp, meta)

    out = train_joint(graph, rs, tc, eval_fn=eval_fn, checkpoint_fn=checkpoint_fn, trainer=trainer,
                      checkpoint_every=cfg["checkpoint_every"], best_store=best)
    np.savez(resume, **trainer.state())
    meta["steps_done"] = trainer.step_count
    meta["best_valid_mrr"] = None if not np.isfinite(trainer.best_metric) else trainer.best_metric
    save_store(out, run / "embeddings.rulekg", fp, meta)
    _write_json(run / "meta.json", meta)
    if not all(np.all(np.isfinite(v)) for v in out.params().values()):
        raise CliError("training produced non-finite parameters")
    print(f"trained {trainer.step_count} steps; embeddings written to {run / 'embeddings.rulekg'}")
    return 0


def cmd_train_grounding(args) -> int:
    import numpy as np

    from .checkpoint import save_grounding
    from .evaluate import ModelBundle, evaluate
    from .grounding import GroundingConfig, RuleScorer, train_grounding

    cfg = resolve_config(args)
    ds = _load_dataset(args)
    rs = _load_rules(args, ds, cfg)
    run = _run_dir(args)
    store = _load_store(run, rs)
    gc = GroundingConfig(hidden=cfg["grounding_hidden"], lr=cfg["grounding_lr"], batch=cfg["grounding_batch"],
                         epochs=cfg["grounding_epochs"], seed=cfg["seed"], agg=cfg["agg"],
                         conf_mode=cfg["grounding"], p=cfg["p"], patience=cfg["grounding_patience"])
    graph = ds.train_index()
    eval_fn = None
    if cfg["grounding_validate"] and len(ds.base("valid")):
        conf, cache = _confidences(store, rs, cfg), {}
        known = ds.all_index()

        def eval_fn(model):
            bundle = ModelBundle(store, graph, known, ds.num_base_relations, rs,
                                 RuleScorer(model, conf, cfg["agg"], cache))
            return evaluate(bundle, ds.base("valid"), score="rule", filtered=cfg["filtered"]).mrr

    model = train_grounding(graph, rs, store, ds.train, ds.num_base_relations, gc, eval_fn=eval_fn)
    if not all(np.all(np.isfinite(v)) for v in model.params().values()):
        raise CliError("grounding training produced non-finite parameters")
    meta = {"command": "train-grounding", "config": cfg, "rules_sha256": rs.fingerprint().hex()}
    path = run / f"grounding-{cfg['agg']}.rulekg"
    save_grounding(model, path, meta)
    print(f"grounding model written to {path}")
    return 0


def _bundle(args, cfg, ds, rs, need_rules: bool, need_emb: bool = True):
    from .checkpoint import load_grounding
    from .evaluate import ModelBundle
    from .grounding import RuleScorer

    run = _run_dir(args)
    store = _load_store(run, rs)
    scorer = None
    if need_rules:
        conf = _confidences(store, rs, cfg)
        model = None
        if cfg["agg"] in ("mlp", "hard"):
            path = run / f"grounding-{cfg['agg']}.rulekg"
            if not path.exists():
                raise CliError(f"{path} not found; run train-grounding --agg {cfg['agg']} first")
            model = load_grounding(path, rs.fingerprint())
            if model.conf_mode != cfg["grounding"]:
                raise CliError(f"grounding model was trained with --grounding {model.conf_mode}")
        scorer = RuleScorer(model, conf, cfg["agg"])
    return ModelBundle(store, ds.train_index(), ds.all_index(), ds.num_base_relations, rs, scorer)


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    cfg = resolve_config(args)
    ds = _load_dataset(args)
    rs = _load_rules(args, ds, cfg)
    score = cfg["score"]
    bundle = _bundle(args, cfg, ds, rs, need_rules=score != "emb")
    beta = 0.0 if score == "emb" else cfg["beta"]
    label = {"emb": "emb", "rule": f"rule/{cfg['agg']}", "both": f"emb+rule/{cfg['agg']}"}[score]
    t0 = time.perf_counter()
    report = evaluate(bundle, ds.base(args.split), beta=beta, mode=cfg["score_mode"], filtered=cfg["filtered"],
                      score=score, dump=args.dump, label=label)
    run = _run_dir(args)
    stem = run / f"eval-{args.split}-{score}-{cfg['agg']}"
    _write_json(Path(f"{stem}.json"), {**report.to_dict(args.ranks), "config": cfg})
    Path(f"{stem}.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    if args.dump:
        import numpy as np

        np.savez_compressed(f"{stem}-dump.npz", queries=[d["query"] for d in bundle.dumps],
                            scores=[d["scores"] for d in bundle.dumps])
    print(report.to_text())
    logger.info("evaluated %d queries in %.1fs", report.n_queries, time.perf_counter() - t0)
    return 0


def cmd_analyze(args) -> int:
    import numpy as np

    from .analysis import corruption_study, cycle_edge_proportion, dataset_statistics

    ds = _load_dataset(args)
    base = np.concatenate([ds.base(s) for s in ("train", "valid", "test")])
    report = cycle_edge_proportion(base, args.max_len, ds.num_entities)
    out = {"statistics": dataset_statistics(ds), "cycles": report.to_dict()}
    print(report.to_text())
    if args.corrupt:
        pcts = [float(x) for x in args.corrupt.split(",") if x.strip()]
        study = corruption_study(base, pcts, ds.num_entities, ds.num_base_relations, args.seed or 0, args.max_len)
        out["corruption"] = {str(p): r.to_dict() for p, r in study.items()}
        for p, r in study.items():
            print(f"random {p:g}%: {r.to_text()}")
    if args.json:
        _write_json(Path(args.json), out)
    return 0


def cmd_score(args) -> int:
    import numpy as np

    from .evaluate import query_scores

    cfg = resolve_config(args)
    ds = _load_dataset(args)
    rs = _load_rules(args, ds, cfg)
    score = cfg["score"]
    bundle = _bundle(args, cfg, ds, rs, need_rules=score != "emb")
    try:
        h = ds.entities[args.head]
        r = ds.relations[args.relation]
    except KeyError as exc:
        raise CliError(f"unknown entity or relation: {exc}") from None
    kge = bundle.store.score_all_tails([h], [r])[0]
    beta = 0.0 if score == "emb" else cfg["beta"]
    s = query_scores(bundle, h, r, kge, beta, cfg["score_mode"], score)
    names = ds.entities.names
    for rank, e in enumerate(np.argsort(-s, kind="stable")[: args.top], 1):
        known = " (known)" if e in set(bundle.known.neighbors(h, r).tolist()) else ""
        print(f"{rank}\t{names[e]}\t{s[e]:.4f}{known}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rulekg", description="Knowledge graph reasoning with embedded rules.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, rules=True, run=True):
        p.add_argument("--data", help="dataset directory or name under $RULE_DATA_DIR")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--profile", help="bundled profile name or path (default: matches the dataset name)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        if rules:
            p.add_argument("--rules", help="rule file")
        if run:
            p.add_argument("--run", help="run directory for checkpoints and reports")

    def model_flags(p):
        p.add_argument("--kge", choices=("rotate", "transe"))
        p.add_argument("--rule-variant", choices=("default", "positional"))
        p.add_argument("--alpha", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--dim", type=int)
        p.add_argument("--lr", type=float)

    def reasoning_flags(p):
        p.add_argument("--grounding", choices=("scalar", "finegrained"))
        p.add_argument("--agg", choices=("mlp", "sum", "max", "hard"))

    def scoring_flags(p):
        p.add_argument("--score", choices=("emb", "rule", "both"))
        p.add_argument("--score-mode", choices=("normalized", "eq8"))
        p.add_argument("--filtered", type=parse_bool)
        p.add_argument("--beta", type=float)

    p = sub.add_parser("prepare", help="add inverse triplets and write id files")
    p.add_argument("data")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("mine", help="mine chain rules from the training graph")
    common(p, rules=False, run=False)
    p.add_argument("--out", required=True, help="output rule file")
    p.add_argument("--top-k", type=int, default=100, help="rules kept per head relation")
    p.add_argument("--min-support", type=int, default=1)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train-joint", help="jointly embed entities, relations and rules")
    common(p)
    model_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from <run>/resume.npz")
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("train-grounding", help="fit the rule-grounding scorer")
    common(p)
    reasoning_flags(p)
    p.set_defaults(func=cmd_train_grounding)

    p = sub.add_parser("eval", help="link-prediction metrics")
    common(p)
    reasoning_flags(p)
    scoring_flags(p)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--ranks", action="store_true", help="include per-query ranks in the JSON report")
    p.add_argument("--dump", action="store_true", help="save per-query score vectors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="cycle proportions and dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--max-len", type=int, choices=(2, 3), default=3)
    p.add_argument("--corrupt", help="comma separated corruption percentages, e.g. 5,10,20")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", help="write the report as JSON")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("score", help="rank tails for one (head, relation, ?) query")
    common(p)
    reasoning_flags(p)
    scoring_flags(p)
    p.add_argument("--head", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_score)
    return parser


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    from .checkpoint import CheckpointError
    from .data import DataError

    try:
        return args.func(args)
    except (CliError, DataError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rulekg {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
