import fcntl
import json

import pytest

from hetkr.cli import LOCK, PIPELINE_ORDER, run

SMALL = """
seed = 3

[synth]
n_subjects = 30
n_names = 4
n_train = 40
n_test = 20

[encoder]
dim = 16

[train.stage1]
lr = 0.01
epochs = 1
batch_size = 32

[train.stage2]
lr = 0.01
epochs = 1
batch_size = 32

[train.stage3]
lr = 0.003
epochs = 1
batch_size = 16
"""

ARTIFACTS = ("vocab.tsv", "encoder.bin", "index.hgix", "metrics.json", "run.jsonl")


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "hetkr.toml"
    path.write_text(SMALL)
    return path


def cli(*args):
    return run([str(a) for a in args])


def synth_into(config, workdir):
    assert cli("synth", "--config", config, "--workdir", workdir) == 0


def test_stats(config, tmp_path, capsys):
    synth_into(config, tmp_path / "w")
    assert cli("stats", "--config", config, "--workdir", tmp_path / "w") == 0
    out = capsys.readouterr().out
    for row in ("Text", "KG", "Table", "Infobox", "Sum", "100.00%"):
        assert row in out


def test_missing_pairs_names_path(tmp_path, capsys):
    assert cli("pretrain", "--workdir", tmp_path / "w") == 1
    assert str(tmp_path / "w" / "pairs.jsonl") in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert cli("train-everything") == 1
    assert "usage:" in capsys.readouterr().err


def test_bad_flags_and_config(tmp_path, capsys):
    assert cli("search", "--group", "I_Video") == 1
    assert cli("stats", "--config", tmp_path / "nope.toml") == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[encoder]\nwidth = 3\n")
    assert cli("stats", "--config", bad) == 1
    assert "width" in capsys.readouterr().err


def test_pipeline_deterministic_and_equivalent(config, tmp_path, capsys):
    dirs = [tmp_path / n for n in ("a", "b", "c")]
    for d in dirs:
        synth_into(config, d)
    assert cli("pipeline", "--config", config, "--workdir", dirs[0]) == 0
    assert cli("pipeline", "--config", config, "--workdir", dirs[1]) == 0
    for name in PIPELINE_ORDER:
        assert cli(name, "--config", config, "--workdir", dirs[2]) == 0, name
    for name in ARTIFACTS:
        ref = (dirs[0] / name).read_bytes()
        assert (dirs[1] / name).read_bytes() == ref, name
        assert (dirs[2] / name).read_bytes() == ref, name
    metrics = json.loads((dirs[0] / "metrics.json").read_text())
    assert metrics["scenario1"]["hit@100"]["n"] == 20
    assert (dirs[0] / "metrics_bm25.json").is_file()
    for stage in ("stage1", "stage2", "stage3"):
        rec = json.loads((dirs[0] / f"{stage}.jsonl").read_text().splitlines()[0])
        assert set(rec) == {"stage", "epoch", "mean_loss", "samples", "wall_ms"}

    # rerunning a phase rewrites identical bytes
    before = (dirs[0] / "index.hgix").read_bytes()
    assert cli("index", "--config", config, "--workdir", dirs[0]) == 0
    assert (dirs[0] / "index.hgix").read_bytes() == before

    capsys.readouterr()
    assert cli("search", "--config", config, "--workdir", dirs[0], "--query", "Who wrote it?", "--group", "I_KG", "--domain", "books", "--k", 4) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# Given a question in the books domain") and lines[0].endswith("Who wrote it?")
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["1", "2", "3", "4"]
    assert cli("search", "--config", config, "--workdir", dirs[0], "--query", "x", "--domain", "cooking") == 1
    assert cli("search", "--config", config, "--workdir", dirs[0]) == 1

    # a damaged artifact is a runtime failure
    raw = bytearray((dirs[0] / "encoder.bin").read_bytes())
    raw[50] ^= 1
    (dirs[0] / "encoder.bin").write_bytes(bytes(raw))
    assert cli("index", "--config", config, "--workdir", dirs[0]) == 2


def test_seed_flag_changes_output(config, tmp_path):
    for d, seed in (("a", 1), ("b", 2)):
        assert cli("synth", "--config", config, "--workdir", tmp_path / d, "--seed", seed) == 0
    assert (tmp_path / "a/input/corpus.jsonl").read_bytes() != (tmp_path / "b/input/corpus.jsonl").read_bytes()


def test_lock_is_enforced(tmp_path, capsys):
    work = tmp_path / "w"
    work.mkdir()
    with open(work / LOCK, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        assert cli("stats", "--workdir", work) == 2
    assert "locked" in capsys.readouterr().err
