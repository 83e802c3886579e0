import json
import subprocess
import sys

import pytest

from orderlab.cli import main
from orderlab.config import ConfigError, load_config

TINY = [
    "data.n_personas=3",
    "data.n_train=40",
    "data.n_test=6",
    "data.n_categories=4",
    "model.d_model=16",
    "model.n_heads=2",
    "model.n_layers=1",
    "model.d_ff=16",
    "train.epochs=2",
    "train.batch_size=10",
    "decode.max_new_tokens=6",
    "analysis.runs=2",
    "analysis.pairs_per_sample=1",
]


def run(*args, overrides=TINY):
    argv = list(args)
    for o in overrides:
        argv += ["--set", o]
    return main(argv)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_load_config_rules():
    assert load_config()["train"]["gamma"] == 1.0
    assert load_config({"version": 1}, ["train.gamma=0.5", "train.name=foo"])["train"]["name"] == "foo"
    with pytest.raises(ConfigError, match="version"):
        load_config({"train": {}})
    with pytest.raises(ConfigError) as exc:
        load_config({"version": 1, "train": {"gama": 1}})
    assert exc.value.path == "train.gama"


def test_unknown_key_exits_2(workdir, capsys):
    assert run("gen-data", overrides=["data.sed=1"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["key"] == "data.sed"


def test_invalid_value_exits_2(workdir, capsys):
    assert run("gen-data", overrides=["data.n_personas=0"]) == 2
    assert json.loads(capsys.readouterr().err)["key"] == "data"


def test_missing_artifact_exits_3(workdir, capsys):
    assert run("train") == 3
    assert "data/train.jsonl" in json.loads(capsys.readouterr().err)["message"]


def test_config_file_needs_version(workdir, capsys):
    (workdir / "c.json").write_text(json.dumps({"train": {"epochs": 1}}))
    assert main(["gen-data", "--config", "c.json"]) == 2


def test_gen_data_deterministic(tmp_path, monkeypatch):
    digests = []
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        monkeypatch.chdir(tmp_path / d)
        assert run("gen-data", overrides=TINY + ["data.seed=42"]) == 0
        digests.append({p: (tmp_path / d / "runs/default" / p).read_bytes()
                        for p in ("data/train.jsonl", "data/test.jsonl", "data/vocab.json", "manifests/gen-data.json")})
    assert digests[0] == digests[1]


def test_gamma_zero_checkpoint_equals_mle(workdir):
    assert run("gen-data") == 0
    assert run("train", overrides=TINY + ["train.objective=orig", "train.gamma=0", "train.name=g0"]) == 0
    assert run("train", overrides=TINY + ["train.objective=mle"]) == 0
    models = workdir / "runs/default/models"
    assert (models / "g0/final.orgc").read_bytes() == (models / "mle/final.orgc").read_bytes()


def test_full_pipeline_and_manifests(workdir):
    assert run("gen-data") == 0
    for obj in ("mle", "orig"):
        assert run("train", overrides=TINY + [f"train.objective={obj}"]) == 0
    for name in ("mle", "orig"):
        extra = [f"decode.model={name}", f"analysis.model={name}"]
        for cmd in ("decode", "eval", "sweep", "variance", "divergence"):
            assert run(cmd, overrides=TINY + extra) == 0, cmd
    assert run("report") == 0
    out = workdir / "runs/default"
    metrics = json.loads((out / "metrics/mle.json").read_text())
    assert {"bleu1", "rouge_l", "cider", "c_proxy"} <= set(metrics)
    variance = json.loads((out / "reports/variance-orig.json").read_text())
    assert variance["kind"] == "variance" and len(variance["runs"]) == 2
    assert (out / "reports/variance-boxplot.svg").read_text().startswith("<svg")
    import hashlib

    for manifest in (out / "manifests").glob("*.json"):
        m = json.loads(manifest.read_text())
        assert len(m["config_hash"]) == 64
        for rel, digest in {**m["inputs"], **m["outputs"]}.items():
            assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest, rel


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "orderlab", "gen-data", "--set", "data.bogus=1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_shuffle_at_eval_changes_decode_orderings(workdir, monkeypatch):
    from orderlab import analysis

    assert run("gen-data") == 0
    assert run("train") == 0
    seen = []
    real = analysis.decode_response
    monkeypatch.setattr(analysis, "decode_response", lambda m, s, perm, *a: seen.append(tuple(perm)) or real(m, s, perm, *a))
    assert run("decode") == 0
    assert set(seen) == {(0, 1, 2)}
    seen.clear()
    assert run("decode", overrides=TINY + ["train.shuffle_at_eval=true"]) == 0
    assert len(seen) == 6 and set(seen) != {(0, 1, 2)}
    assert all(sorted(p) == [0, 1, 2] for p in seen)
