import csv
import json
import time

import pytest

from tern import checkpoint as ckpt_io
from tern.cli import main
from tern.config import RunConfig
from tern.metrics import RelevanceMatrix


def gen(out, *extra):
    return main(["gen", "--out", str(out), "--seed", "7", "--images", "12", "--captions-per-image", "2",
                 "--regions", "4", "--feat-dim", "8", "--vocab", "60", "--val-images", "2",
                 "--test-images", "5", *extra])


@pytest.fixture
def data(tmp_path):
    assert gen(tmp_path / "data") == 0
    return tmp_path / "data"


@pytest.fixture
def config(tmp_path, data):
    cfg = RunConfig.desk(data, tmp_path / "run")
    m = cfg.model
    m.d_r, m.d_visual, m.d_text, m.d_common, m.d_ff = 8, 16, 16, 16, 32
    cfg.train.batch_size = 4
    cfg.train.epochs = 1
    cfg.precision = "float64"
    path = tmp_path / "cfg.json"
    cfg.write(path)
    return path


def train(config, out, *extra):
    return main(["train", "--config", str(config), "--out", str(out), *extra])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestGen:
    def test_deterministic(self, tmp_path):
        gen(tmp_path / "a")
        gen(tmp_path / "b")
        for name in ("features.jsonl", "captions.jsonl", "splits.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_creates_nested_dir(self, tmp_path):
        assert gen(tmp_path / "x" / "y") == 0
        assert (tmp_path / "x" / "y" / "features.jsonl").exists()

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TERN_OUTPUT_DIR", str(tmp_path / "env"))
        assert main(["gen", "--images", "3", "--vocab", "20"]) == 0
        assert (tmp_path / "env" / "captions.jsonl").exists()

    def test_zero_images_is_usage_error(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--images", "0"]) == 1

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--bogus"])
        assert exc.value.code == 1


class TestTrain:
    def test_one_epoch_outputs(self, tmp_path, config):
        out = tmp_path / "r1"
        assert train(config, out) == 0
        for name in ("config.json", "run.log", "loss.csv", "checkpoints/last.ckpt",
                     "checkpoints/best.ckpt", "checkpoints/epoch_0001.ckpt"):
            assert (out / name).exists(), name
        rows = read_csv(out / "loss.csv")
        assert rows[0] == ["epoch", "loss", "val_recall1"] and len(rows) == 2
        assert ckpt_io.load(out / "checkpoints" / "last.ckpt").meta["epoch"] == 1

    def test_same_seed_same_run(self, tmp_path, config):
        train(config, tmp_path / "a", "--epochs", "2")
        train(config, tmp_path / "b", "--epochs", "2")
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
        assert (tmp_path / "a" / "checkpoints" / "last.ckpt").read_bytes() == \
            (tmp_path / "b" / "checkpoints" / "last.ckpt").read_bytes()

    def test_resume_continues_numbering(self, tmp_path, config):
        out = tmp_path / "r"
        train(config, out)
        assert train(config, out, "--epochs", "3", "--resume", str(out / "checkpoints" / "last.ckpt")) == 0
        rows = read_csv(out / "loss.csv")
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        ck = ckpt_io.load(out / "checkpoints" / "last.ckpt")
        assert ck.meta["epoch"] == 3 and ck.meta["adam"]["step"] > 0

    def test_resume_with_conflicting_model(self, tmp_path, config):
        out = tmp_path / "r"
        train(config, out)
        code = train(config, tmp_path / "r2", "--set", "model.d_ff=64", "--epochs", "2",
                     "--resume", str(out / "checkpoints" / "last.ckpt"))
        assert code == 2

    def test_unknown_override(self, tmp_path, config):
        assert train(config, tmp_path / "r", "--set", "train.nope=1") == 1

    def test_bad_config_value(self, tmp_path, config):
        assert train(config, tmp_path / "r", "--set", "model.heads=5") == 1

    def test_missing_data(self, tmp_path, config):
        assert train(config, tmp_path / "r", "--set", f"paths.features={tmp_path / 'none.jsonl'}") == 2


class TestEmbedEvaluate:
    @pytest.fixture
    def trained(self, tmp_path, config):
        out = tmp_path / "run"
        train(config, out)
        return out

    def test_embed_and_evaluate(self, tmp_path, config, trained):
        emb = tmp_path / "emb.jsonl"
        assert main(["embed", "--config", str(config), "--checkpoint", str(trained / "checkpoints/last.ckpt"),
                     "--split", "test", "--output", str(emb)]) == 0
        lines = emb.read_text().splitlines()
        assert len(lines) == 5 + 10
        ev = tmp_path / "ev"
        assert main(["evaluate", "--config", str(config), "--embeddings", str(emb), "--out", str(ev)]) == 0
        summary = json.loads((ev / "summary.json").read_text())
        assert set(summary["recall"]) == {"1", "5", "10"}
        assert 0.0 <= summary["ndcg"]["rouge_l"] <= 1.0
        assert len((ev / "report.jsonl").read_text().splitlines()) == 10
        assert len(read_csv(ev / "ndcg_vs_p.csv")) == 26

    def test_external_relevance_and_folds(self, tmp_path, config, trained):
        emb = tmp_path / "emb.jsonl"
        main(["embed", "--config", str(config), "--checkpoint", str(trained / "checkpoints/last.ckpt"),
              "--output", str(emb)])
        caps = [json.loads(l)["id"] for l in emb.read_text().splitlines() if '"caption"' in l]
        imgs = [json.loads(l)["id"] for l in emb.read_text().splitlines() if '"image"' in l]
        rel = tmp_path / "spice.relm"
        RelevanceMatrix(caps, imgs, [[1.0 if c.startswith(i) else 0.0 for i in imgs] for c in caps]).save(rel)
        ev = tmp_path / "ev"
        assert main(["evaluate", "--config", str(config), "--embeddings", str(emb), "--out", str(ev),
                     "--relevance", str(rel), "--relevance-name", "spice", "--folds", "5"]) == 0
        folds = json.loads((ev / "folds.json").read_text())
        assert len(folds["folds"]) == 5
        assert set(folds["mean"]["ndcg"]) == {"rouge_l", "spice"}

    def test_missing_relevance_file(self, tmp_path, config, trained):
        emb = tmp_path / "emb.jsonl"
        main(["embed", "--config", str(config), "--checkpoint", str(trained / "checkpoints/last.ckpt"),
              "--output", str(emb)])
        assert main(["evaluate", "--config", str(config), "--embeddings", str(emb),
                     "--relevance", str(tmp_path / "none.relm"), "--out", str(tmp_path / "ev")]) == 2

    def test_missing_embeddings(self, tmp_path, config):
        assert main(["evaluate", "--config", str(config), "--embeddings", str(tmp_path / "none.jsonl"),
                     "--out", str(tmp_path / "ev")]) == 2


def test_pipeline_under_five_minutes(tmp_path):
    start = time.perf_counter()
    data = tmp_path / "d"
    assert main(["gen", "--out", str(data), "--seed", "7", "--images", "32", "--test-images", "10"]) == 0
    cfg = RunConfig.desk(data, tmp_path / "run")
    cfg.train.epochs = 2
    cfg.write(tmp_path / "cfg.json")
    assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    emb = tmp_path / "emb.jsonl"
    assert main(["embed", "--config", str(tmp_path / "cfg.json"),
                 "--checkpoint", str(tmp_path / "run/checkpoints/last.ckpt"), "--output", str(emb)]) == 0
    assert main(["evaluate", "--config", str(tmp_path / "cfg.json"), "--embeddings", str(emb),
                 "--out", str(tmp_path / "ev")]) == 0
    assert time.perf_counter() - start < 300
