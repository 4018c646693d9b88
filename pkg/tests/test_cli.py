import csv
import json

import numpy as np
import pytest

from cmkg import cli
from cmkg.config import from_dict, load_config
from cmkg.errors import ConfigError

SMALL = """
run: {out_dir: runs, run_id: %s}
data: {K: 3, samples_per_class: 10}
trainer: {epochs_c: 1, epochs_m: 1}
"""


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("CMKG_OUTPUT_ROOT", str(tmp_path / "out"))
    return tmp_path


def write(root, text, name="c.yaml"):
    p = root / name
    p.write_text(text)
    return str(p)


def test_config_defaults_hash_and_unknown_keys():
    cfg = from_dict({})
    assert cfg.trainer.epochs_c == 10 and cfg.distill.lam == 0.1 and cfg.data.synthetic.K == 5
    moved = from_dict({"run": {"out_dir": "elsewhere"}})
    assert moved.hash() == cfg.hash()
    assert from_dict({"trainer": {"lr": 0.1}}).hash() != cfg.hash()
    with pytest.raises(ConfigError, match="trainer.lrr"):
        from_dict({"trainer": {"lrr": 0.1}})
    with pytest.raises(ConfigError, match="unknown key extra"):
        from_dict({"extra": {}})
    with pytest.raises(ConfigError):
        from_dict({"trainer": {"epochs_c": 2.5}})
    with pytest.raises(ConfigError):
        from_dict({"trainer": {"mi": "yes"}})


def test_echoed_config_round_trips(root):
    from cmkg.config import dump_config
    cfg = from_dict({"trainer": {"seed": 3}})
    p = root / "echo.json"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    raw = json.loads(p.read_text())
    raw["trainer"]["seed"] = 4
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_gen_is_deterministic_and_validated(root, capsys):
    cfg = write(root, "data: {K: 5, samples_per_class: 5}\n")
    assert cli.main(["gen", "--config", cfg, "--out", str(root / "a.jsonl")]) == 0
    assert cli.main(["gen", "--config", cfg, "--out", str(root / "b.jsonl")]) == 0
    assert (root / "a.jsonl").read_bytes() == (root / "b.jsonl").read_bytes()
    man = json.loads((root / "a.jsonl.manifest.json").read_text())
    assert len(man["tasks"]) == 5 and "config_hash" in man
    bad = write(root, "data: {snr_visual: -1}\n", "bad.yaml")
    assert cli.main(["gen", "--config", bad, "--out", str(root / "c.jsonl")]) == cli.EXIT_CONFIG
    assert "snr" in capsys.readouterr().err


def test_train_artifacts_score_and_reducer(root):
    cfg = write(root, SMALL % "a")
    assert cli.main(["train", "--config", cfg]) == 0
    run = root / "out" / "runs" / "a"
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [f"task_{k}.ckpt" for k in (1, 2, 3)]
    chash = json.loads((run / "resolved_config.json").read_text())["config_hash"]
    for name in ("score_matrix.csv", "gamma_trace.csv", "forgetting_curve.csv"):
        assert (run / name).read_text().startswith(f"# config_hash={chash}\n")
    for name in ("metrics.json", "predictions.json"):
        assert json.loads((run / name).read_text())["config_hash"] == chash
    assert all(json.loads(l)["config_hash"] == chash for l in (run / "results.jsonl").read_text().splitlines())
    assert cli.main(["score", "--run-dir", str(run)]) == 0

    rows = list(csv.DictReader(l for l in (run / "gamma_trace.csv").open() if not l.startswith("#")))
    summaries = [json.loads(l) for l in (run / "results.jsonl").read_text().splitlines()
                 if json.loads(l)["event"] == "task-summary"]
    for s in summaries:
        reduced = np.mean([abs(float(r["gamma"]) - 1) for r in rows if int(r["task"]) == s["task"]])
        assert reduced == pytest.approx(s["gamma_abs_dev"], rel=1e-12)


def test_score_detects_tampering(root):
    cfg = write(root, SMALL % "b")
    assert cli.main(["train", "--config", cfg]) == 0
    run = root / "out" / "runs" / "b"
    metrics = json.loads((run / "metrics.json").read_text())
    metrics["A"][0] = 0.123
    (run / "metrics.json").write_text(json.dumps(metrics))
    assert cli.main(["score", "--run-dir", str(run)]) == cli.EXIT_MISMATCH
    metrics["config_hash"] = "other"
    (run / "metrics.json").write_text(json.dumps(metrics))
    assert cli.main(["score", "--run-dir", str(run)]) == cli.EXIT_MISMATCH


def test_train_errors(root):
    missing = write(root, "data: {path: %s}\n" % (root / "nope.jsonl"), "m.yaml")
    assert cli.main(["train", "--config", missing]) == cli.EXIT_INPUT
    cfg = write(root, SMALL % "c")
    (root / "bad.ckpt").write_bytes(b"CMKGCKPT\x01\x00\x00\x00\x10\x00\x00\x00{broken")
    assert cli.main(["train", "--config", cfg, "--resume", str(root / "bad.ckpt")]) == cli.EXIT_VERSION


def test_train_from_generated_file_matches_in_memory(root):
    assert cli.main(["gen", "--config", write(root, SMALL % "x"), "--out", str(root / "s.jsonl")]) == 0
    file_cfg = write(root, (SMALL % "f").replace("data: {K: 3, samples_per_class: 10}",
                                                 "data: {path: %s}" % (root / "s.jsonl")), "f.yaml")
    assert cli.main(["train", "--config", write(root, SMALL % "g", "g.yaml")]) == 0
    assert cli.main(["train", "--config", file_cfg]) == 0
    body = lambda r: (root / "out" / "runs" / r / "score_matrix.csv").read_text().split("\n", 1)[1]
    assert body("f") == body("g")


def test_ablate_writes_five_rows(root):
    cfg = write(root, SMALL % "ab")
    assert cli.main(["ablate", "--config", cfg]) == 0
    lines = (root / "out" / "runs" / "ab" / "ablation.csv").read_text().splitlines()
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 5 and rows[0]["variant"] == "full"
