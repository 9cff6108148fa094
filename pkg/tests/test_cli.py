import json

import numpy as np
import pytest

from sonostack import features as F
from sonostack.cli import build_parser, run
from sonostack.models import load_checkpoint


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("SONOSTACK_SEED", raising=False)
    return tmp_path


@pytest.fixture
def corpus(workdir):
    assert run(["synth", "--out-dir", "corpus", "--classes", "2", "--per-class", "4", "--folds", "2", "--duration", "1"]) == 0
    return workdir / "corpus"


TRAIN = ["train", "--dataset", "corpus", "--duration", "1", "--epochs", "2", "--batch-size", "4"]


class TestUsage:
    def test_bogus_feature(self, workdir, capsys):
        assert run(["train", "--features", "BOGUS"]) == 2
        assert "unknown feature token BOGUS" in capsys.readouterr().err

    def test_unknown_command_and_flag(self, workdir, capsys):
        assert run(["frobnicate"]) == 2
        assert run(["bench", "--no-such-flag"]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_help_lists_defaults(self, capsys):
        parser = build_parser()
        subs = parser._subparsers._group_actions[0].choices
        for name, sub in subs.items():
            assert run([name, "--help"]) == 0
            text = capsys.readouterr().out
            for action in sub._actions:
                if action.dest == "help":
                    continue
                assert action.option_strings[0] in text
                assert "%(default)" in sub.formatter_class("x")._get_help_string(action), (name, action.dest)
            assert text.count("(default:") >= len(sub._actions) - 1

    def test_bad_env_seed(self, workdir, monkeypatch, capsys):
        monkeypatch.setenv("SONOSTACK_SEED", "abc")
        assert run(["synth"]) == 2
        assert "SONOSTACK_SEED" in capsys.readouterr().err

    def test_bad_config_key(self, workdir):
        (workdir / "c.json").write_text(json.dumps({"epochz": 3}))
        assert run(["train", "--config", "c.json"]) == 2

    def test_bad_config_choice(self, workdir):
        (workdir / "c.json").write_text(json.dumps({"optimizer": "sgd"}))
        assert run(["train", "--config", "c.json"]) == 2

    def test_config_features_validated(self, workdir, capsys):
        (workdir / "c.json").write_text(json.dumps({"features": "LM+BOGUS"}))
        assert run(["train", "--config", "c.json"]) == 2
        assert "BOGUS" in capsys.readouterr().err


class TestCommands:
    def test_extract_four_channels(self, corpus, capsys):
        wav = sorted((corpus / "audio").iterdir())[0]
        assert run(["extract", "--features", "MFCC+GTCC+CH+LM", "--in", str(wav), "--out", "clip.fmap", "--out-dir", "ex"]) == 0
        assert "128x128x4" in capsys.readouterr().out
        maps = F.load_fmaps((corpus.parent / "ex" / "clip.fmap").read_bytes())
        assert [m.kind for m in maps] == ["MFCC", "GTCC", "CH", "LM"]
        assert F.stack(maps).shape == (128, 128, 4)

    def test_extract_missing_input(self, workdir, capsys):
        assert run(["extract", "--in", "absent.wav"]) == 1
        assert "read audio failed" in capsys.readouterr().err

    def test_train_eval_manifest(self, corpus, capsys):
        assert run(TRAIN + ["--out-dir", "tr"]) == 0
        manifest = json.loads((corpus.parent / "tr" / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["epochs"] == 2
        assert manifest["seed"] == 0
        assert {"started", "finished", "version", "outputs"} <= set(manifest)
        model = load_checkpoint(corpus.parent / "tr" / "model.ssck")
        assert model.features == "LM" and model.spec.n_classes == 2
        assert (corpus.parent / "tr" / "history.csv").read_text().startswith("epoch,train_loss")
        assert run(["eval", "--checkpoint", "tr/model.ssck", "--dataset", "corpus", "--out-dir", "ev"]) == 0
        assert "accuracy=" in capsys.readouterr().out

    def test_seed_reproducible(self, corpus):
        assert run(TRAIN + ["--out-dir", "a", "--seed", "3"]) == 0
        assert run(TRAIN + ["--out-dir", "b", "--seed", "3"]) == 0
        root = corpus.parent
        assert (root / "a" / "model.ssck").read_bytes() == (root / "b" / "model.ssck").read_bytes()
        assert (root / "a" / "history.csv").read_text() == (root / "b" / "history.csv").read_text()

    def test_manifest_replays(self, corpus):
        assert run(TRAIN + ["--out-dir", "a", "--seed", "4"]) == 0
        root = corpus.parent
        assert run(["train", "--config", "a/manifest.json", "--out-dir", "b"]) == 0
        assert (root / "a" / "model.ssck").read_bytes() == (root / "b" / "model.ssck").read_bytes()

    def test_flags_override_config(self, corpus):
        (corpus.parent / "c.json").write_text(json.dumps({"epochs": 5, "batch_size": 4, "dataset": "corpus", "duration": 1}))
        assert run(["train", "--config", "c.json", "--epochs", "1", "--out-dir", "o"]) == 0
        manifest = json.loads((corpus.parent / "o" / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 1
        assert manifest["config"]["batch_size"] == 4

    def test_env_seed(self, workdir, monkeypatch):
        monkeypatch.setenv("SONOSTACK_SEED", "17")
        assert run(["synth", "--classes", "2", "--per-class", "1", "--duration", "0.1", "--out-dir", "s"]) == 0
        assert json.loads((workdir / "s" / "manifest.json").read_text())["seed"] == 17

    def test_outputs_stay_in_out_dir(self, workdir):
        assert run(["synth", "--classes", "2", "--per-class", "1", "--duration", "0.1", "--out-dir", "only"]) == 0
        assert [p.name for p in workdir.iterdir()] == ["only"]

    def test_finetune_and_mismatch(self, corpus, capsys):
        assert run(TRAIN + ["--out-dir", "pre"]) == 0
        common = ["finetune", "--checkpoint", "pre/model.ssck", "--classes", "3", "--per-class", "2",
                  "--folds", "2", "--duration", "1", "--epochs", "2", "--batch-size", "4"]
        assert run(common + ["--out-dir", "ft"]) == 0
        ft = load_checkpoint(corpus.parent / "ft" / "finetuned.ssck")
        pre = load_checkpoint(corpus.parent / "pre" / "model.ssck")
        assert ft.spec.n_classes == 3
        np.testing.assert_array_equal(ft.layer("conv1").params["kernel"].data, pre.layer("conv1").params["kernel"].data)
        assert run(common + ["--features", "MFCC", "--out-dir", "bad"]) == 1
        assert "finetune failed" in capsys.readouterr().err

    def test_crossval_outputs(self, corpus, capsys):
        assert run(["crossval", "--dataset", "corpus", "--duration", "1", "--epochs", "1", "--batch-size", "4", "--out-dir", "cv"]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "fold,accuracy,precision,recall,f1,best_val_acc,best_epoch"
        assert "mean_accuracy=" in out
        table = (corpus.parent / "cv" / "crossval.csv").read_text().splitlines()
        assert table[0] == "model,features,fold_1,fold_2,average_accuracy"

    def test_bench(self, workdir, capsys):
        assert run(["bench", "--arch", "cnn1", "--in-channels", "1", "--height", "32", "--width", "32", "--out-dir", "b"]) == 0
        out = capsys.readouterr().out
        assert "iterations=50" in out and "warmup=5" in out
        assert len((workdir / "b" / "bench.csv").read_text().splitlines()) == 51
