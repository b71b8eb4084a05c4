import csv
import io
import json
import re
from dataclasses import replace

import numpy as np
import pytest

from helpers import random_params
from qgt import checkpoint, cli, model, train
from qgt.model import CLASSICAL, QUANTUM, ModelConfig


def write_config(path, fixtures_dir, **extra):
    values = {"dataset": fixtures_dir / "mc.tsv", "embeddings": fixtures_dir / "embeddings50.txt",
              "format": "mcrp", "seed": 7, "max_epochs": 2, "patience": 2}
    values.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, fixtures_dir):
    root = tmp_path_factory.mktemp("train")
    cfg = write_config(root / "run.cfg", fixtures_dir)
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root


def test_checkpoint_round_trip_exact(rng, tmp_path):
    for cfg in (ModelConfig(QUANTUM, layer_count=2), ModelConfig(CLASSICAL, dk=16, classes=3)):
        p = random_params(cfg, rng, scale=1.0)
        p.tensors["clf_b"][0] = 1 / 3
        p.tensors["proj_w"][0, 0] = 5e-324
        ck = checkpoint.Checkpoint(p, 11, {"lr": 0.01})
        checkpoint.save(ck, tmp_path / "c.qgt")
        back = checkpoint.load(tmp_path / "c.qgt")
        assert back.params.config == replace(p.config, scale_dim=p.config.effective_scale_dim)
        assert back.seed == 11 and back.config == {"lr": 0.01}
        for k in p.tensors:
            assert np.array_equal(back.params[k], p[k])
            assert back.params[k].tobytes() == p[k].tobytes()


def test_checkpoint_records_scale_dim():
    p = model.ModelParams.zeros(ModelConfig(QUANTUM))
    text = checkpoint.dumps(checkpoint.Checkpoint(p))
    assert "scale_dim=16" in text and text.startswith("QGT-CHECKPOINT 1\n") and text.endswith("end\n")


@pytest.mark.parametrize("mutate", [
    lambda t: t.replace("QGT-CHECKPOINT 1", "QGT-CHECKPOINT 9"),
    lambda t: t.replace("\nend\n", "\n"),
    lambda t: t.replace("model_kind quantum", "model_kind sideways"),
    lambda t: t.replace("tensor clf_b 2", "tensor clf_b 3"),
    lambda t: t.replace("tensor clf_b 2\n0 0", "tensor clf_b 2\n0 zero"),
    lambda t: t.split("tensor proj_b")[0],
    lambda t: "",
])
def test_checkpoint_rejects_corruption(mutate):
    text = checkpoint.dumps(checkpoint.Checkpoint(model.ModelParams.zeros(ModelConfig(QUANTUM))))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(mutate(text))


def test_run_config_parsing(tmp_path, fixtures_dir):
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir, graph="knn:2", rl="on(0.1,0.02)",
                       scale_dim=4, split="0.8,0.1,0.1")
    run = cli.RunConfig.from_mapping(cli.parse_config_file(cfg))
    assert run.train.graph_mode == "knn:2" and run.train.rl_reg
    assert (run.train.rl_sigma, run.train.rl_step) == (0.1, 0.02)
    assert run.train.scale_dim == 4 and run.split == (0.8, 0.1, 0.1)


def test_config_relative_paths_resolve_against_file(tmp_path, fixtures_dir):
    (tmp_path / "mc.tsv").write_text((fixtures_dir / "mc.tsv").read_text())
    (tmp_path / "run.cfg").write_text("dataset = mc.tsv\n")
    values = cli.parse_config_file(tmp_path / "run.cfg")
    assert values["dataset"] == str(tmp_path / "mc.tsv")


@pytest.mark.parametrize("line", ["colour = blue", "lr = fast", "model = hybrid", "graph = ring",
                                  "split = 0.5,0.5", "fractions = 0,1", "no equals sign"])
def test_bad_config_exit_2(tmp_path, fixtures_dir, capsys, line):
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir)
    cfg.write_text(cfg.read_text() + line + "\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_output_contract(trained):
    out = trained / "out"
    assert sorted(p.name for p in out.iterdir()) == ["checkpoint.qgt", "manifest.json", "metrics.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["seed"] == 7
    assert 0 <= manifest["test"]["accuracy"] <= 1
    assert {k: v["size"] for k, v in manifest["splits"].items()} == {"train": 91, "val": 13, "test": 26}
    rows = list(csv.reader(io.StringIO((out / "metrics.csv").read_text())))
    assert rows[0] == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    assert len(rows) - 1 == manifest["epochs_run"] == 2
    ck = checkpoint.load(out / "checkpoint.qgt")
    assert ck.seed == 7 and ck.params.config.kind == QUANTUM


def test_train_rerun_is_byte_identical(trained, tmp_path):
    cfg = trained / "run.cfg"
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in ("metrics.csv", "checkpoint.qgt"):
        assert (tmp_path / "again" / name).read_bytes() == (trained / "out" / name).read_bytes()


def test_cli_overrides(tmp_path, fixtures_dir):
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir, max_epochs=1, patience=1)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3",
                     "--model", "classical", "--graph", "knn:1"]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["config"]["model"] == CLASSICAL and manifest["config"]["graph_mode"] == "knn:1"


def test_missing_embeddings_exit_2_without_outputs(tmp_path, fixtures_dir, capsys):
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir, embeddings=tmp_path / "absent.txt")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "embeddings" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_runtime_failure_exit_1(tmp_path, fixtures_dir, monkeypatch, capsys):
    def boom(*a, **k):
        raise train.NonFiniteGradientError("non-finite gradient for proj_w")

    monkeypatch.setattr(train, "fit", boom)
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1
    assert "non-finite" in capsys.readouterr().err


def test_argparse_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["dance"]) == 2
    assert cli.main(["eval"]) == 2
    assert cli.main(["sweep", "--fractions", "a,b"]) == 2


def test_eval_matches_manifest(trained, capsys):
    out = trained / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.qgt"), "--split", "test"]) == 0
    printed = capsys.readouterr().out
    acc = float(re.search(r"accuracy=(\S+)", printed).group(1))
    loss = float(re.search(r"loss=(\S+)", printed).group(1))
    assert abs(acc - manifest["test"]["accuracy"]) < 1e-9
    assert abs(loss - manifest["test"]["loss"]) < 1e-9
    assert "samples=26" in printed


def test_eval_class_count_mismatch(trained, tmp_path, capsys):
    data = tmp_path / "three.tsv"
    data.write_text("good food\t0\nbad food\t1\nodd food\t2\n")
    code = cli.main(["eval", "--checkpoint", str(trained / "out" / "checkpoint.qgt"), "--dataset", str(data)])
    err = capsys.readouterr().err
    assert code == 2
    assert "expects 2" in err and "has 3" in err


def test_eval_empty_dataset_format_error(trained, tmp_path, capsys):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    code = cli.main(["eval", "--checkpoint", str(trained / "out" / "checkpoint.qgt"), "--dataset", str(empty)])
    assert code == 2
    assert "empty" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.qgt")]) == 2


def _attn(trained, capsys, sentence, *extra):
    assert cli.main(["attn", "--checkpoint", str(trained / "out" / "checkpoint.qgt"),
                     "--sentence", sentence, *extra]) == 0
    text = capsys.readouterr().out
    table, pred = text.rsplit("prediction=", 1)
    return list(csv.reader(io.StringIO(table))), int(pred)


def test_attn_single_token(trained, capsys):
    rows, pred = _attn(trained, capsys, "Dinner!")
    assert rows == [["", "dinner"], ["dinner", "0.0"]]
    assert pred in (0, 1)


def test_attn_rows_and_header(trained, capsys):
    rows, _ = _attn(trained, capsys, "Skillful chef, prepares tasty sauce")
    tokens = ["skillful", "chef", "prepares", "tasty", "sauce"]
    assert rows[0] == [""] + tokens
    assert [r[0] for r in rows[1:]] == tokens
    alpha = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.all(np.diag(alpha) == 0)
    assert np.max(np.abs(alpha.sum(axis=1) - 1)) < 1e-6


def test_attn_writes_file(trained, tmp_path, capsys):
    assert cli.main(["attn", "--checkpoint", str(trained / "out" / "checkpoint.qgt"),
                     "--sentence", "man cooks meal", "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.startswith("prediction=")
    assert (tmp_path / "a" / "attention.csv").read_text().startswith(",man,cooks,meal\n")


def test_attn_empty_sentence(trained, capsys):
    code = cli.main(["attn", "--checkpoint", str(trained / "out" / "checkpoint.qgt"), "--sentence", "?!"])
    assert code == 2


def test_compare(tmp_path, fixtures_dir, capsys):
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir, max_epochs=1, patience=1)
    outputs = []
    for _ in range(2):
        assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]
    m = re.fullmatch(r"qgt_acc=(\S+) classical_acc=(\S+) delta=([+-]\S+)\n", outputs[0])
    assert m is not None
    assert float(m.group(3)) == pytest.approx(float(m.group(1)) - float(m.group(2)), abs=1e-15)
    report = json.loads((tmp_path / "c" / "compare.json").read_text())
    assert report["runs"][QUANTUM]["splits"] == report["runs"][CLASSICAL]["splits"]


def test_sweep(tmp_path, fixtures_dir, monkeypatch, capsys):
    monkeypatch.setenv("QGT_THREADS", "1")
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir, max_epochs=1, patience=1)
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                     "--fractions", "0.1,0.3,0.6,1.0"]) == 0
    rows = list(csv.reader((tmp_path / "s" / "sweep.csv").open()))
    assert rows[0] == ["fraction", "qgt_acc", "classical_acc"] and len(rows) == 5
    manifest = json.loads((tmp_path / "s" / "sweep_manifest.json").read_text())
    assert [r["n_train"] for r in manifest["rows"]] == [9, 27, 54, 91]
    assert len({r["test_split_sha256"] for r in manifest["rows"]}) == 1


def test_sweep_rejects_zero_fraction_before_training(tmp_path, fixtures_dir, monkeypatch):
    monkeypatch.setattr(train, "fit", lambda *a, **k: pytest.fail("trained"))
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir)
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                     "--fractions", "0,0.5"]) == 2
    assert not (tmp_path / "s").exists()


def test_bad_thread_count(tmp_path, fixtures_dir, monkeypatch):
    monkeypatch.setenv("QGT_THREADS", "zero")
    cfg = write_config(tmp_path / "a.cfg", fixtures_dir)
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
