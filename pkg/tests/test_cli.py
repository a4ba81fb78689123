import hashlib
import json
import os

import pytest

from stackprop.cli import main
from stackprop.corpus import emit_conllu, parse_conllu
from stackprop.synthetic import generate_corpus

TINY_FLAGS = [
    "--h-tagger", "16", "--h-parser", "24", "--d-implicit", "8", "--d-label", "4",
    "--d-word", "8", "--d-affix", "4", "--d-caps", "2", "--d-symbols", "2",
    "--parser-epochs", "2", "--tagger-epochs", "1", "--pretrain-epochs", "1",
    "--eta0", "0.03", "--gamma", "5000", "--batch-size", "16",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    train = d / "train.conllu"
    dev = d / "dev.conllu"
    train.write_text(emit_conllu(generate_corpus(20, seed=50)), encoding="utf-8")
    dev.write_text(emit_conllu(generate_corpus(6, seed=51)), encoding="utf-8")
    return d


@pytest.fixture(scope="module")
def trained_model(workdir):
    model = workdir / "m.model"
    rc = main(
        ["train", "--train", str(workdir / "train.conllu"), "--dev",
         str(workdir / "dev.conllu"), "--model", str(model), "--seed", "3"]
        + TINY_FLAGS
    )
    assert rc == 0
    return model


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_writes_model_and_manifest(trained_model, workdir):
    assert trained_model.exists()
    manifest_path = trained_model.with_name(trained_model.name + ".manifest.json")
    manifest = json.loads(manifest_path.read_text())
    assert manifest["config"]["mode"] == "stackprop"
    assert manifest["config"]["seed"] == 3
    assert manifest["model"]["sha256"] == sha(trained_model)
    assert "train" in manifest["inputs"] and "dev" in manifest["inputs"]


def test_manifest_replay_reproduces_model_bytes(trained_model, workdir):
    manifest_path = trained_model.with_name(trained_model.name + ".manifest.json")
    replayed = workdir / "replayed.model"
    rc = main(["train", "--replay", str(manifest_path), "--model", str(replayed)])
    assert rc == 0
    assert sha(replayed) == sha(trained_model)


def test_parse_roundtrip_and_threads(trained_model, workdir, capsys):
    out1 = workdir / "out1.conllu"
    out4 = workdir / "out4.conllu"
    for threads, out in (("1", out1), ("4", out4)):
        rc = main(
            ["parse", "--model", str(trained_model), "--input",
             str(workdir / "dev.conllu"), "--output", str(out), "--threads", threads]
        )
        assert rc == 0
    assert out1.read_bytes() == out4.read_bytes()
    reparsed = parse_conllu(out1.read_text())
    assert len(reparsed) == 6


def test_parse_empty_input_empty_output(trained_model, workdir):
    empty_in = workdir / "empty.conllu"
    empty_in.write_text("")
    out = workdir / "empty_out.conllu"
    rc = main(["parse", "--model", str(trained_model), "--input", str(empty_in),
               "--output", str(out)])
    assert rc == 0
    assert out.read_text() == ""


def test_tag_fills_upos(trained_model, workdir):
    out = workdir / "tagged.conllu"
    rc = main(["tag", "--model", str(trained_model), "--input",
               str(workdir / "dev.conllu"), "--output", str(out)])
    assert rc == 0
    tagged = parse_conllu(out.read_text())
    gold = parse_conllu((workdir / "dev.conllu").read_text())
    assert all(t.gold_upos != "_" for s in tagged for t in s.tokens)
    # heads preserved from the input
    assert [t.gold_head for s in tagged for t in s.tokens] == [
        t.gold_head for s in gold for t in s.tokens
    ]


def test_emit_activations(trained_model, workdir):
    acts = workdir / "acts.tsv"
    rc = main(["parse", "--model", str(trained_model), "--input",
               str(workdir / "dev.conllu"), "--output", os.devnull,
               "--emit-activations", str(acts)])
    assert rc == 0
    lines = acts.read_text().strip().split("\n")
    n_tokens = sum(len(s) for s in parse_conllu((workdir / "dev.conllu").read_text()))
    assert len(lines) == n_tokens
    assert len(lines[0].split("\t")) == 3 + 16  # id, index, form, H floats


def test_eval_identical_files(workdir, capsys):
    rc = main(["eval", "--gold", str(workdir / "dev.conllu"), "--system",
               str(workdir / "dev.conllu"), "--machine"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "uas=1.0000" in out and "las=1.0000" in out


def test_eval_parsed_output(trained_model, workdir, capsys):
    out = workdir / "out1.conllu"
    rc = main(["eval", "--gold", str(workdir / "dev.conllu"), "--system", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "uas" in text and "las" in text


def test_eval_cascade_breakdown(workdir, capsys):
    rc = main(["eval", "--gold", str(workdir / "dev.conllu"), "--system",
               str(workdir / "dev.conllu"), "--reference-tags",
               str(workdir / "dev.conllu"), "--machine"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "las_on_rest=1.0000" in out


def test_jackknife_writes_folds_and_corpus(workdir):
    merged = workdir / "jk.conllu"
    prefix = workdir / "jk"
    rc = main(["jackknife", "--train", str(workdir / "train.conllu"), "--output",
               str(merged), "--folds", "2", "--model-prefix", str(prefix), "--seed", "2"]
              + TINY_FLAGS)
    assert rc == 0
    assert (workdir / "jk.fold0.model").exists()
    assert (workdir / "jk.fold1.model").exists()
    tagged = parse_conllu(merged.read_text())
    assert len(tagged) == 20


def test_neighbors_prints_rows(trained_model, workdir, capsys):
    rc = main(["neighbors", "--model", str(trained_model), "--corpus",
               str(workdir / "dev.conllu"), "--sentence", "1", "--token", "2", "-k", "3"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0].startswith("query:")
    assert len(lines) == 4


def test_inspect_model(trained_model, capsys):
    rc = main(["inspect-model", "--model", str(trained_model)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mode          stackprop" in out
    assert "total_params" in out


def test_exit_code_usage_on_bad_path(workdir):
    rc = main(["train", "--train", str(workdir / "nope.conllu"), "--model",
               str(workdir / "x.model")] + TINY_FLAGS)
    assert rc == 1


def test_exit_code_data_on_malformed_corpus(workdir, trained_model):
    bad = workdir / "bad.conllu"
    bad.write_text("1\tonly\tthree\n")
    rc = main(["parse", "--model", str(trained_model), "--input", str(bad),
               "--output", os.devnull])
    assert rc == 2


def test_exit_code_model_on_corrupt_model(workdir):
    bogus = workdir / "bogus.model"
    bogus.write_bytes(b"not a model at all")
    rc = main(["parse", "--model", str(bogus), "--input", os.devnull,
               "--output", os.devnull])
    assert rc == 3


def test_exit_code_usage_on_unknown_flag():
    with pytest.raises(SystemExit) as e:
        main(["train", "--frobnicate"])
    assert e.value.code == 1


def test_config_file_with_cli_override(workdir):
    cfg = workdir / "run.cfg"
    cfg.write_text(
        "mode = stackprop\n"
        "h_tagger = 16\nh_parser = 24\nd_implicit = 8\nd_label = 4\n"
        "d_word = 8\nd_affix = 4\nd_caps = 2\nd_symbols = 2\n"
        "parser_epochs = 1\ntagger_epochs = 1\npretrain_epochs = 0\n"
        "eta0 = 0.03\nbatch_size = 16\nseed = 9\n"
    )
    model = workdir / "cfg.model"
    rc = main(["train", "--config", str(cfg), "--train", str(workdir / "train.conllu"),
               "--model", str(model), "--seed", "11"])
    assert rc == 0
    manifest = json.loads(model.with_name(model.name + ".manifest.json").read_text())
    assert manifest["config"]["seed"] == 11  # CLI wins over config file
    assert manifest["config"]["h_tagger"] == 16


def test_unknown_config_key_rejected(workdir):
    cfg = workdir / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    rc = main(["train", "--config", str(cfg), "--train",
               str(workdir / "train.conllu"), "--model", str(workdir / "y.model")])
    assert rc == 1
