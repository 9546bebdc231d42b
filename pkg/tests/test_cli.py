import json

import numpy as np
import pytest

from mrtnet import cli
from mrtnet.config import Config, load_config, write_config
from mrtnet.data import SynthSpec, load_annotations, write_corpus, write_features
from mrtnet.diffcore import ConfigError
from mrtnet.train import Checkpoint, check_compatible, predict_samples

from .oracles import metric_oracle

SMALL = ["--d", "16", "--num-heads", "4", "--d-q", "12", "--n-model", "16", "--epochs", "3",
         "--batch-size", "4", "--lr", "3e-3", "--early-stop-patience", "0"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return write_corpus(root, SynthSpec(num_samples=8, n=16, d_v=8, d_q=12, vocab_size=8, seed=5))


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", *SMALL, "--annotations", str(corpus["annotations"]),
                     "--features-dir", str(corpus["features"]), "--out", str(out)])
    assert code == 0
    return out


def test_config_defaults():
    cfg = Config()
    assert (cfg.d, cfg.kernel_size, cfg.num_heads, cfg.lr, cfg.batch_size, cfg.epochs) == \
        (128, 7, 8, 1e-4, 16, 100)


def test_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.01\nbatch_size = 4  # trailing\nalphas = 1, 0.5, 0\n")
    cfg = load_config(path, {"lr": "0.02", "epochs": None})
    assert cfg.lr == 0.02
    assert cfg.batch_size == 4
    assert cfg.epochs == 100
    assert cfg.alphas == (1.0, 0.5, 0.0)


def test_config_file_round_trip(tmp_path):
    cfg = Config(d=32, num_heads=4, alphas=(0.5, 1.0, 2.0), ce_only=True, out_dir="x y")
    write_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt").to_dict() == cfg.to_dict()


@pytest.mark.parametrize("overrides", [
    {"kernel_size": "6"}, {"n_model": "30"}, {"d": "30"}, {"lr": "0"}, {"alphas": "1,1"},
    {"bogus": "1"}, {"epochs": "many"},
])
def test_config_validation(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_train_writes_artifacts(trained):
    assert {p.name for p in trained.iterdir()} >= {"config.txt", "train_log.jsonl", "checkpoint.npz"}
    rows = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert {"boundary_ce", "ce_map@1", "ssim@3", "iou@2"} <= set(rows[0]["components"])


def test_eval_report_schema_and_oracle(trained, corpus, capsys):
    out = trained / "eval"
    code = cli.main(["eval", "--checkpoint", str(trained / "checkpoint.npz"), "--out", str(out),
                     "--json"])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    report = json.loads((out / "report.json").read_text())
    assert printed == report
    assert set(report) == {"r1_iou_0.3", "r1_iou_0.5", "r1_iou_0.7", "miou", "num_samples"}
    assert "mIoU" in (out / "report.txt").read_text()

    ckpt = Checkpoint.load(trained / "checkpoint.npz")
    cfg = Config.from_dict(ckpt.config)
    samples = cli._load_samples(cfg, str(corpus["annotations"]))
    preds = [(s.start_sec, s.end_sec) for s, _ in predict_samples(ckpt.model(), samples)]
    gts = [(a.start_sec, a.end_sec) for a in load_annotations(corpus["annotations"])]
    assert report == metric_oracle(preds, gts)


def test_eval_twice_is_identical(trained):
    a, b = trained / "e1", trained / "e2"
    for out in (a, b):
        assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.npz"), "--out", str(out)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "report.txt").read_bytes() == (b / "report.txt").read_bytes()


def test_checkpoint_round_trip_is_bit_identical(trained, corpus, tmp_path):
    ckpt = Checkpoint.load(trained / "checkpoint.npz")
    ckpt.save(tmp_path / "copy.npz")
    again = Checkpoint.load(tmp_path / "copy.npz")
    assert list(again.params) == list(ckpt.params)
    for name in ckpt.params:
        assert again.params[name].tobytes() == ckpt.params[name].tobytes()
    cfg = Config.from_dict(ckpt.config)
    samples = cli._load_samples(cfg, str(corpus["annotations"]))
    first = predict_samples(ckpt.model(), samples)
    second = predict_samples(again.model(), samples)
    assert [(s.start_sec, s.end_sec, p) for s, p in first] == \
        [(s.start_sec, s.end_sec, p) for s, p in second]


def test_shape_mismatch_lists_tensors(trained):
    ckpt = Checkpoint.load(trained / "checkpoint.npz")
    cfg = Config.from_dict(ckpt.config)
    cfg.d = 32
    with pytest.raises(ConfigError, match="enc.proj_v.w"):
        check_compatible(ckpt, cfg)


def test_eval_mismatch_exit_code(trained, capsys):
    code = cli.main(["eval", "--checkpoint", str(trained / "checkpoint.npz"), "--d", "32",
                     "--out", str(trained / "bad")])
    assert code == 1
    assert "checkpoint does not match" in capsys.readouterr().err


def test_predict_json(trained, tmp_path, capsys):
    feats = np.random.default_rng(0).standard_normal((20, 8))
    write_features(tmp_path / "clip.mrtf", feats)
    code = cli.main(["predict", "--checkpoint", str(trained / "checkpoint.npz"),
                     "--features", str(tmp_path / "clip.mrtf"), "--duration", "40", "--json",
                     "w001", "c002"])
    assert code == 0
    line = capsys.readouterr().out
    assert line.count("\n") == 1
    out = json.loads(line)
    assert set(out) == {"start", "end", "prob"}
    assert 0 <= out["start"] <= out["end"] <= 40
    assert 0 <= out["prob"] <= 1


def test_predict_unknown_tokens_warns(trained, tmp_path, caplog):
    emb = tmp_path / "emb.txt"
    emb.write_text("known " + " ".join(["0.1"] * 12) + "\n")
    write_features(tmp_path / "clip.mrtf", np.ones((16, 8)))
    cfg = Config.from_dict(Checkpoint.load(trained / "checkpoint.npz").config)
    cfg.embeddings = str(emb)
    out = cli.cmd_predict(cfg, trained / "checkpoint.npz", tmp_path / "clip.mrtf", ["zzz", "qqq"])
    assert out["start"] <= out["end"]
    assert "no query token" in caplog.text


def test_exit_codes(tmp_path, corpus, capsys):
    assert cli.main(["train", "--kernel-size", "4"]) == 1
    assert cli.main(["train", *SMALL, "--annotations", str(tmp_path / "missing.jsonl"),
                     "--features-dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"video_id": "v"}\n')
    assert cli.main(["train", *SMALL, "--annotations", str(bad), "--features-dir", str(tmp_path)]) == 1
    assert "bad.jsonl:1" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_code(corpus, tmp_path, capsys):
    code = cli.main(["train", *SMALL, "--lr", "1e300", "--epochs", "3", "--annotations",
                     str(corpus["annotations"]), "--features-dir", str(corpus["features"]),
                     "--out", str(tmp_path / "nan")])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_synth_command(tmp_path, capsys):
    code = cli.main(["synth", "--out", str(tmp_path), "--num-samples", "5", "--n", "8",
                     "--d-v", "4", "--vocab-size", "4", "--split", "3"])
    assert code == 0
    assert len(load_annotations(tmp_path / "train.jsonl")) == 3
    assert len(list((tmp_path / "features").iterdir())) == 5


def test_training_is_deterministic(corpus, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", *SMALL, "--annotations", str(corpus["annotations"]),
                         "--features-dir", str(corpus["features"]), "--out", str(out)]) == 0
        runs.append(out)
    assert (runs[0] / "train_log.jsonl").read_bytes() == (runs[1] / "train_log.jsonl").read_bytes()

