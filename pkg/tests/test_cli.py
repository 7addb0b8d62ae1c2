import json

import numpy as np
import pytest

from xmic.cli import run
from xmic.datastore import ClipRecord, write_store


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    cfg = d / "synth.json"
    cfg.write_text(json.dumps({"C": 8, "D": 16, "clips_per_class": 6, "frames_per_clip": 8, "visual_shift": 3.0}))
    assert run(["gen-synth", "--config", str(cfg), "--seed", "3", "--out", str(d)]) == 0
    return d


def common(d):
    return ["--store-v", str(d / "train.xmic"), "--vocab", str(d / "vocab_a.txt")]


def evals(d):
    return ["--eval-store", str(d / "test.xmic"), "--eval-store", str(d / "cross.xmic"),
            "--eval-vocab", str(d / "vocab_b.txt")]


def test_partition_published_counts(capsys):
    assert run(["partition", "--vocab-a", "ego4d_nouns.txt", "--vocab-b", "ek_nouns.txt"]) == 0
    assert capsys.readouterr().out.strip() == "shared=163 novel_a=358 novel_b=137"
    assert run(["partition", "--vocab-a", "ego4d_verbs.txt", "--vocab-b", "ek_verbs.txt", "--task", "verb"]) == 0
    assert capsys.readouterr().out.strip() == "shared=51 novel_a=66 novel_b=46"


def test_resolved_config_printed(capsys):
    run(["partition", "--vocab-a", "ego4d_nouns.txt", "--vocab-b", "ek_nouns.txt"])
    err = capsys.readouterr().err
    assert err.startswith("resolved config: ") and '"vocab_a": "ego4d_nouns.txt"' in err


def test_usage_errors(capsys, synth_dir):
    assert run(["train", "--bogus", "1"]) == 1
    err = capsys.readouterr().err
    assert "unrecognized arguments: --bogus" in err and "usage: xmic train" in err
    assert run(["train", "--epochs", "many"]) == 1
    assert run([]) == 1
    assert run(["ablate", "bogus", *common(synth_dir)]) == 1
    assert "unknown ablation" in capsys.readouterr().err
    assert run(["partition", "--vocab-a", "ego4d_nouns.txt"]) == 1
    assert run(["partition", "--vocab-a", "missing.txt", "--vocab-b", "ek_nouns.txt"]) == 1


def test_gen_synth_outputs(synth_dir):
    names = {p.name for p in synth_dir.iterdir()}
    assert {"train.xmic", "test.xmic", "cross.xmic", "train.jsonl", "vocab_a.txt", "vocab_b.npy",
            "synthetic.json"} <= names
    assert not [n for n in names if n.startswith(".") or n.endswith(".tmp")]
    side = json.loads((synth_dir / "synthetic.json").read_text())
    assert side["spec"]["seed"] == 3 and side["shared_classes"] == [f"class {i:02d}" for i in range(4)]


def test_ingest_summary_and_dim_mismatch(synth_dir, tmp_path, capsys):
    assert run(["ingest", *common(synth_dir)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"clips": 48, "dim": 16, "classes": 8, "classes_present": 8, "with_hands": 48,
                       "separate_v2": False}
    other = tmp_path / "wide.xmic"
    write_store([ClipRecord("x", np.ones((8, 24)))], other)
    assert run(["ingest", *common(synth_dir), "--store-v2", str(other)]) == 1
    bad = tmp_path / "bad.xmic"
    bad.write_bytes(b"NOPE" + b"\0" * 12)
    assert run(["ingest", "--store-v", str(bad), "--vocab", str(synth_dir / "vocab_a.txt")]) == 1


def test_train_twice_identical_checkpoints(synth_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 2, "lr": 1e-3, "batch_size": 16, "seed": 1}))
    outs = []
    for run_id in ("a", "b"):
        ck, log = tmp_path / f"{run_id}.ckpt", tmp_path / f"{run_id}.jsonl"
        assert run(["train", "--config", str(cfg), "--seed", "7", *common(synth_dir), "--ckpt", str(ck),
                    "--out", str(log), *evals(synth_dir)]) == 0
        outs.append((ck.read_bytes(), log.read_bytes()))
    assert outs[0] == outs[1]
    rows = [json.loads(line) for line in outs[0][1].decode().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2] and "acc_cross" in rows[0]
    # the flag beat the config file
    from xmic.adapters import read_checkpoint

    meta, _ = read_checkpoint(tmp_path / "a.ckpt")
    assert meta["extra"]["config"]["seed"] == 7


def test_train_joint_flag(synth_dir, tmp_path, capsys):
    ck = tmp_path / "joint.ckpt"
    # synthetic verb labels reuse the noun names, so vocab_a doubles as the verb vocabulary
    assert run(["train", *common(synth_dir), "--epochs", "1", "--lr", "1e-3", "--joint-vocab",
                str(synth_dir / "vocab_a.txt"), "--ckpt", str(ck)]) == 0
    from xmic.adapters import read_checkpoint

    meta, _ = read_checkpoint(ck)
    assert meta["extra"]["config"]["joint"] is True
    assert run(["train", *common(synth_dir), "--epochs", "1", "--lr", "1e-3", "--joint-vocab",
                str(tmp_path / "missing.txt")]) == 1


def test_eval_formats(synth_dir, tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    assert run(["train", *common(synth_dir), "--epochs", "1", "--lr", "1e-3", "--ckpt", str(ck)]) == 0
    capsys.readouterr()
    assert run(["eval", "--vocab", str(synth_dir / "vocab_a.txt"), "--ckpt", str(ck), *evals(synth_dir),
                "--format", "json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {c["subset"] for c in report["cells"]} == {"all", "shared", "novel"}
    assert set(report["hm"]) == {"within_cross", "shared_novel"}
    out = tmp_path / "r.csv"
    assert run(["eval", "--vocab", str(synth_dir / "vocab_a.txt"), *evals(synth_dir), "--format", "csv",
                "--out", str(out)]) == 0
    assert out.read_text().startswith("variant,within,cross,hm")


def test_eval_deterministic_across_threads(synth_dir, tmp_path, monkeypatch):
    texts = []
    for threads in ("1", "4"):
        monkeypatch.setenv("XMIC_THREADS", threads)
        out = tmp_path / f"r{threads}.json"
        assert run(["eval", "--vocab", str(synth_dir / "vocab_a.txt"), *evals(synth_dir), "--out", str(out)]) == 0
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]


@pytest.mark.parametrize("kind,n", [("norm", 6), ("alpha", 5), ("spatial", 3)])
def test_ablate_row_counts(kind, n, synth_dir, tmp_path):
    out = tmp_path / "a.json"
    assert run(["ablate", kind, *common(synth_dir), "--epochs", "1", "--lr", "1e-3", *evals(synth_dir),
                "--format", "json", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == n
    if kind == "norm":
        assert [r["variant"] for r in rows] == ["norm=n1", "norm=none", "norm=n2,n3", "norm=n1,n2,n3",
                                                "norm=n1,n2", "norm=n1,n3"]


def test_profile_cost_law(capsys):
    assert run(["profile", "--strategy", "early-cross", "--frames", "2", "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    acts = {r["B"]: r["text_encoder_activations"] for r in rows}
    assert acts[2] == 2 * acts[1] and acts[8] == 8 * acts[1]


@pytest.mark.slow
def test_gradcheck_verb(capsys):
    assert run(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "xmic pipeline" in out
