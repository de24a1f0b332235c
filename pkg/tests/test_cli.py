import json
import os
from pathlib import Path

import numpy as np
import pytest

from decouple.cli import dispatch

pytestmark = pytest.mark.filterwarnings("ignore::DeprecationWarning")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = dispatch([
        "gen-data", "--out", str(out), "--seed", "5",
        "--config", _write_cfg(out.parent, {
            "vocab_size": 150, "n_dialogues": 40, "content_pool_size": 30,
        }),
    ])
    assert code == 0
    return out


def _write_cfg(dirpath: Path, payload: dict, name: str = "cfg.json") -> str:
    path = dirpath / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _tiny_train_cfg(dirpath: Path, **train_overrides) -> str:
    payload = {
        "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
        "train": {"epochs": 1, "batch_size": 16, "lr": 2e-3, "z_max_len": 4,
                  **train_overrides},
    }
    return _write_cfg(dirpath, payload, name="train_cfg.json")


class TestGenData:
    def test_writes_splits_vocab_knowledge_manifest(self, data_dir):
        for name in ("train.jsonl", "valid.jsonl", "test.jsonl",
                     "vocab.txt", "knowledge.txt", "manifest.json"):
            assert (data_dir / name).exists(), name
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 5
        assert manifest["dataset_hashes"]

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = _write_cfg(tmp_path, {"vocab_size": 150, "n_dialogues": 10})
        for sub in ("a", "b"):
            assert dispatch(["gen-data", "--out", str(tmp_path / sub),
                             "--seed", "3", "--config", cfg,
                             "--fixed-timestamp"]) == 0
        for name in ("train.jsonl", "vocab.txt", "knowledge.txt"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()


class TestDispatchErrors:
    def test_unknown_subcommand_exits_2(self, capsys):
        assert dispatch(["frobnicate"]) == 2
        capsys.readouterr()

    def test_unknown_flag_exits_2(self, capsys):
        assert dispatch(["verify", "--bogus"]) == 2
        capsys.readouterr()

    def test_config_error_exits_3(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, {"vocab_size": 150, "leak_rate": 3.0})
        assert dispatch(["gen-data", "--out", str(tmp_path / "x"),
                         "--config", cfg]) == 3
        capsys.readouterr()

    def test_train_full_on_knowledge_free_data_exits_3(self, tmp_path, capsys):
        # build a plain dataset (no knowledge), then ask for the full method
        data = tmp_path / "plain"
        data.mkdir()
        from decouple.corpus import (SynthConfig, Vocabulary,
                                     synthesize_corpus, write_dialogues_jsonl)

        corpus = synthesize_corpus(SynthConfig(vocab_size=150, n_dialogues=8))
        records = [{"utterances": r["utterances"]} for r in corpus.records]
        write_dialogues_jsonl(records, data / "train.jsonl")
        corpus.vocab.save(data / "vocab.txt")
        code = dispatch([
            "train", "--data", str(data), "--method", "full",
            "--schema", "plain", "--out", str(tmp_path / "run"),
            "--config", _tiny_train_cfg(tmp_path),
        ])
        captured = capsys.readouterr()
        assert code == 3
        assert "knowledge" in captured.err


class TestVerify:
    def test_fresh_checkout_passes(self, tmp_path, capsys):
        out = tmp_path / "verify.json"
        code = dispatch(["verify", "--seed", "0", "--out", str(out)])
        capsys.readouterr()
        assert code == 0
        report = json.loads(out.read_text())
        assert report["passed"]
        assert all(c["passed"] for c in report["checks"].values())


class TestOverlapStats:
    def test_prints_table_stats(self, data_dir, capsys):
        code = dispatch(["overlap-stats", "--data", str(data_dir)])
        captured = capsys.readouterr()
        assert code == 0
        stats = json.loads(captured.out)
        assert set(stats) == {"recall", "precision", "f1", "dialogues"}
        assert 0 <= stats["recall"] <= 100


class TestTrainEvalPipeline:
    def test_pretrain_train_eval(self, data_dir, tmp_path, capsys):
        cfg = _tiny_train_cfg(tmp_path)
        lm_dir = tmp_path / "lm"
        assert dispatch(["pretrain-lm", "--data", str(data_dir),
                         "--out", str(lm_dir), "--config", cfg,
                         "--seed", "1"]) == 0
        assert (lm_dir / "lm.ckpt").exists()

        run_dir = tmp_path / "run"
        assert dispatch(["train", "--data", str(data_dir),
                         "--method", "decoupling", "--lm", str(lm_dir / "lm.ckpt"),
                         "--out", str(run_dir), "--config", cfg,
                         "--seed", "1"]) == 0
        assert (run_dir / "best.ckpt").exists()
        assert (run_dir / "log.jsonl").exists()
        record = json.loads((run_dir / "log.jsonl").read_text().splitlines()[0])
        assert {"step", "loss", "mean_reward", "mean_kl",
                "grad_norm_phi", "grad_norm_sigma", "wall_time"} <= set(record)

        eval_dir = tmp_path / "eval"
        assert dispatch(["eval", "--data", str(data_dir),
                         "--ckpt", str(run_dir / "best.ckpt"),
                         "--out", str(eval_dir), "--lengths", "0,2,full",
                         "--metrics", "ppl", "--seed", "1",
                         "--fixed-timestamp"]) == 0
        assert (eval_dir / "curves.csv").exists()
        assert (eval_dir / "summary.json").exists()
        capsys.readouterr()

    def test_env_seed_fallback(self, data_dir, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DECOUPLE_SEED", "9")
        out = tmp_path / "gen"
        cfg = _write_cfg(tmp_path, {"vocab_size": 150, "n_dialogues": 6})
        assert dispatch(["gen-data", "--out", str(out), "--config", cfg]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 9
        capsys.readouterr()


@pytest.mark.slow
class TestSweepDeterminism:
    def test_sweep_twice_byte_identical_reports(self, tmp_path, capsys):
        data = tmp_path / "data"
        gen_cfg = _write_cfg(tmp_path, {
            "vocab_size": 150, "n_dialogues": 60, "content_pool_size": 30,
        }, name="gen.json")
        assert dispatch(["gen-data", "--out", str(data), "--seed", "2",
                         "--config", gen_cfg]) == 0
        cfg = _tiny_train_cfg(tmp_path, epochs=1, batch_size=32)
        outs = []
        for sub in ("s1", "s2"):
            out = tmp_path / sub
            code = dispatch([
                "sweep", "--data", str(data), "--out", str(out),
                "--config", cfg, "--seed", "7", "--fixed-timestamp",
                "--lengths", "0,2,full", "--metrics", "ppl,hits1",
                "--candidates", "5",
            ])
            assert code == 0
            outs.append(out)
        capsys.readouterr()
        for name in ("curves.csv", "summary.json", "ppl.svg", "hits1.svg"):
            a = (outs[0] / "report" / name).read_bytes()
            b = (outs[1] / "report" / name).read_bytes()
            assert a == b, name
