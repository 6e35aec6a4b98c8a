import json
import subprocess
import sys

import numpy as np
import pytest

from rulekg import cli


def _write_split(path, rows):
    path.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8")


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    """A small chain-structured graph where ``a . b => c`` holds."""
    root = tmp_path_factory.mktemp("tiny")
    rng = np.random.default_rng(0)
    rows = []
    for i, (x, y, z) in enumerate(rng.permutation(60).reshape(20, 3).tolist()):
        rows += [(f"e{x}", "a", f"e{y}"), (f"e{y}", "b", f"e{z}"), (f"e{x}", "c", f"e{z}")]
    rows += [(f"e{h}", "noise", f"e{t}") for h, t in rng.integers(0, 60, (30, 2)).tolist()]
    rows = list(dict.fromkeys(rows))
    c_rows = [r for r in rows if r[1] == "c"]
    held = set(c_rows[-6:])
    train = [r for r in rows if r not in held]
    data = root / "chain"
    data.mkdir()
    _write_split(data / "train.txt", train)
    _write_split(data / "valid.txt", sorted(held)[:3])
    _write_split(data / "test.txt", sorted(held)[3:])
    run = root / "run"
    rules = root / "rules.txt"
    conf = root / "tiny.conf"
    conf.write_text("grounding_lr = 0.01\ngrounding_epochs = 40\ngrounding_hidden = 16\ngrounding_validate = false\n")
    common = ["--data", str(data), "--seed", "1", "--config", str(conf)]
    assert cli.main(["mine", *common, "--out", str(rules), "--top-k", "20"]) == 0
    train_flags = ["--rules", str(rules), "--run", str(run), "--dim", "8", "--steps", "60", "--lr", "0.01"]
    assert cli.main(["train-joint", *common, *train_flags]) == 0
    for agg in ("mlp", "hard"):
        assert cli.main(["train-grounding", *common, "--rules", str(rules), "--run", str(run), "--agg", agg]) == 0
    return {"data": data, "run": run, "rules": rules, "common": common}


def _eval(tiny, *flags):
    argv = ["eval", *tiny["common"], "--rules", str(tiny["rules"]), "--run", str(tiny["run"]), "--ranks", *flags]
    assert cli.main(argv) == 0


def _report(tiny, score, agg="mlp"):
    stem = tiny["run"] / f"eval-test-{score}-{agg}"
    return json.loads(stem.with_suffix(".json").read_text()), stem.with_suffix(".txt").read_text()


# --------------------------------------------------------------------------- prepare


def test_prepare_umls_is_idempotent(umls_dir, tmp_path):
    out = tmp_path / "prep"
    assert cli.main(["prepare", str(umls_dir), "--out", str(out)]) == 0
    rels = (out / "relations.dict").read_text().splitlines()
    assert len(rels) == 92
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert cli.main(["prepare", str(umls_dir), "--out", str(out)]) == 0
    assert first == {p.name: p.read_bytes() for p in out.iterdir()}


def test_corrupt_line_reports_line_number(tmp_path, capsys):
    d = tmp_path / "bad"
    d.mkdir()
    _write_split(d / "train.txt", [("a", "r", "b"), ("b", "r", "c")])
    (d / "train.txt").write_text("a\tr\tb\nb\tr\tc\nbroken line\n")
    _write_split(d / "valid.txt", [("a", "r", "c")])
    _write_split(d / "test.txt", [("c", "r", "a")])
    assert cli.main(["prepare", str(d)]) != 0
    err = capsys.readouterr().err
    assert "train.txt" in err and ":3" in err


def test_missing_split_lists_expectations(tmp_path, capsys):
    assert cli.main(["prepare", str(tmp_path)]) != 0
    assert "train.txt" in capsys.readouterr().err


def test_data_dir_from_environment(monkeypatch, umls_dir):
    monkeypatch.setenv("RULE_DATA_DIR", str(umls_dir.parent))
    assert cli.resolve_data("umls") == umls_dir.parent / "umls"


# --------------------------------------------------------------------------- configuration


def test_umls_profile_values(umls_dir):
    args = cli.build_parser().parse_args(["train-joint", "--data", str(umls_dir)])
    cfg = cli.resolve_config(args)
    assert cfg["profile"] == "umls.conf"
    assert (cfg["dim"], cfg["batch_triplets"], cfg["batch_rules"]) == (2000, 256, 256)
    assert (cfg["gamma_t"], cfg["gamma_r"], cfg["lr"], cfg["adv"], cfg["alpha"]) == (6.0, 8.0, 1e-4, 0.25, 1.0)
    assert (cfg["grounding_lr"], cfg["grounding_batch"], cfg["beta"]) == (1e-4, 16, 0.2)


def test_flags_override_config_file(umls_dir, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# local overrides\nalpha = 2.5\ndim = 64\n")
    args = cli.build_parser().parse_args(["train-joint", "--data", str(umls_dir), "--config", str(conf),
                                          "--alpha", "0", "--kge", "transe"])
    cfg = cli.resolve_config(args)
    assert (cfg["alpha"], cfg["dim"], cfg["kge"]) == (0.0, 64, "transe")


def test_unknown_config_key(tmp_path, capsys, tiny):
    conf = tmp_path / "bad.conf"
    conf.write_text("no_such_key = 1\n")
    argv = ["train-joint", *tiny["common"], "--config", str(conf), "--rules", str(tiny["rules"]),
            "--run", str(tmp_path / "r")]
    assert cli.main(argv) == 2
    assert "no_such_key" in capsys.readouterr().err


# --------------------------------------------------------------------------- pipeline


def test_run_directory_contents(tiny):
    run = tiny["run"]
    for name in ("meta.json", "resume.npz", "embeddings.rulekg", "embeddings.rulekg.json",
                 "grounding-mlp.rulekg", "grounding-hard.rulekg"):
        assert (run / name).exists(), name
    meta = json.loads((run / "meta.json").read_text())
    assert meta["config"]["seed"] == 1 and meta["config"]["dim"] == 8 and meta["steps_done"] == 60


def test_json_and_text_reports_agree(tiny):
    _eval(tiny, "--score", "both")
    d, text = _report(tiny, "both")
    assert d["n_queries"] == 6
    assert f"MRR {d['mrr']:.4f}" in text and f"Hits@1 {d['hits1']:.2f}" in text


def test_emb_score_matches_beta_zero(tiny):
    _eval(tiny, "--score", "emb")
    emb, _ = _report(tiny, "emb")
    _eval(tiny, "--score", "both", "--beta", "0")
    both, _ = _report(tiny, "both")
    assert emb["ranks"] == both["ranks"]


@pytest.mark.parametrize("agg", ["mlp", "hard", "sum", "max"])
def test_rule_only_scores(tiny, agg):
    _eval(tiny, "--score", "rule", "--agg", agg)
    d, _ = _report(tiny, "rule", agg)
    assert 0 < d["mrr"] <= 1


def test_rules_predict_held_out_chain_facts(tiny):
    _eval(tiny, "--score", "rule", "--agg", "hard")
    d, _ = _report(tiny, "rule", "hard")
    # forward queries (x, c, ?) are answered by the mined a . b rule
    assert all(r == 1 for r in d["ranks"][0::2])


def test_wrong_rule_file_rejected(tiny, tmp_path, capsys):
    other = tmp_path / "other.txt"
    lines = tiny["rules"].read_text().splitlines()
    other.write_text("\n".join(lines[:1]) + "\n")
    argv = ["eval", *tiny["common"], "--rules", str(other), "--run", str(tiny["run"])]
    assert cli.main(argv) == 2
    assert "rule set" in capsys.readouterr().err


def test_missing_grounding_model(tiny, tmp_path, capsys):
    run = tmp_path / "empty"
    run.mkdir()
    (run / "embeddings.rulekg").write_bytes((tiny["run"] / "embeddings.rulekg").read_bytes())
    argv = ["eval", *tiny["common"], "--rules", str(tiny["rules"]), "--run", str(run)]
    assert cli.main(argv) == 2
    assert "train-grounding" in capsys.readouterr().err


def test_score_command(tiny, capsys):
    rows = (tiny["data"] / "test.txt").read_text().split()
    argv = ["score", *tiny["common"], "--rules", str(tiny["rules"]), "--run", str(tiny["run"]),
            "--head", rows[0], "--relation", "c", "--top", "3"]
    assert cli.main(argv) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("1\t")


def test_resume_continues_same_trajectory(tiny, tmp_path):
    base = [*tiny["common"], "--rules", str(tiny["rules"]), "--dim", "8", "--lr", "0.01"]
    straight, split = tmp_path / "straight", tmp_path / "split"
    assert cli.main(["train-joint", *base, "--run", str(straight), "--steps", "30"]) == 0
    assert cli.main(["train-joint", *base, "--run", str(split), "--steps", "12"]) == 0
    assert cli.main(["train-joint", *base, "--run", str(split), "--steps", "30", "--resume"]) == 0
    with np.load(straight / "resume.npz") as a, np.load(split / "resume.npz") as b:
        for key in ("param.ent_re", "param.ent_im", "param.rel", "param.rules"):
            assert np.array_equal(a[key], b[key])
    assert (straight / "embeddings.rulekg").read_bytes() == (split / "embeddings.rulekg").read_bytes()


def test_alpha_zero_flag_matches_kge_only(tiny, tmp_path):
    base = [*tiny["common"], "--dim", "8", "--lr", "0.01", "--steps", "10", "--alpha", "0"]
    empty = tmp_path / "none.txt"
    empty.write_text("")
    assert cli.main(["train-joint", *base, "--rules", str(tiny["rules"]), "--run", str(tmp_path / "a")]) == 0
    assert cli.main(["train-joint", *base, "--rules", str(empty), "--run", str(tmp_path / "b")]) == 0
    with np.load(tmp_path / "a" / "resume.npz") as a, np.load(tmp_path / "b" / "resume.npz") as b:
        for key in ("param.ent_re", "param.ent_im", "param.rel"):
            assert np.array_equal(a[key], b[key])


# --------------------------------------------------------------------------- analyze


def test_analyze_umls(umls_dir, tmp_path, capsys):
    out = tmp_path / "cycles.json"
    assert cli.main(["analyze", "--data", str(umls_dir), "--json", str(out), "--corrupt", "10"]) == 0
    text = capsys.readouterr().out
    assert "2-cycle 0.676" in text
    d = json.loads(out.read_text())
    assert d["statistics"]["relations"] == 46
    assert "10.0" in d["corruption"]


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "rulekg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("prepare", "mine", "train-joint", "train-grounding", "eval", "analyze", "score"):
        assert cmd in out.stdout
