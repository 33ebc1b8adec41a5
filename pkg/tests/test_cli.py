import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from sssae import data as D
from sssae.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USER, build_spec, main, read_config
from sssae.model import load_checkpoint
from sssae.sweep import run_sweep

FIXTURES = Path(__file__).parent / "fixtures"

SMALL_SWEEP = """\
# tiny synthetic sweep
synthetic = true
synth_frames = 600
synth_valid_frames = 200
synth_test_frames = 200
synth_classes = 4
hidden_dim = 12
baseline_hidden_dim = 12
num_classes = 48
epochs = 2
lr_decay_start_epoch = 1
batch_size = 64
baseline_epochs = 2
baseline_lr_decay_start_epoch = 1
baseline_batch_size = 16
fractions = 0.05, 0.5
alphas = 0.5, 2
"""


@pytest.fixture(scope="module")
def caches(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    args = ["--frames", "500", "--valid-frames", "150", "--test-frames", "150", "--classes", "4"]
    assert main(["synth", "--out", str(root), "--seed", "3"] + args) == EXIT_OK
    assert main(["prepare", "--out", str(root / "ds"), "--train", str(root / "train.csv"),
                 "--valid", str(root / "valid.csv"), "--test", str(root / "test.csv")]) == EXIT_OK
    return root / "ds"


def train_args(caches, out, *extra):
    return ["train", "--train", str(caches / "train.ds"), "--valid", str(caches / "valid.ds"),
            "--out", str(out), "--hidden", "8", "--set", "epochs=2", "--set", "lr_decay_start_epoch=1",
            "--set", "batch_size=50", *extra]


def log_rows(path):
    lines = Path(path).read_text().splitlines()
    header = [l for l in lines if l.startswith("#")]
    rows = list(csv.reader(l for l in lines if not l.startswith("#")))
    return header, rows


def test_read_config(tmp_path):
    (tmp_path / "c.cfg").write_text("a = 1  # note\n\n# skip\nb=x y\n")
    assert read_config(tmp_path / "c.cfg") == {"a": "1", "b": "x y"}
    (tmp_path / "bad.cfg").write_text("nonsense\n")
    assert main(["gradcheck", "--config", str(tmp_path / "bad.cfg")]) == EXIT_USER


def test_prepare_fixture(tmp_path, capsys):
    assert main(["prepare", "--train", str(FIXTURES / "two_utterances.csv"), "--out", str(tmp_path)]) == EXIT_OK
    assert "train: 10 frames, input_dim 429" in capsys.readouterr().out
    ds = D.load_dataset(tmp_path / "train.ds")
    assert len(ds) == 10 and ds.num_labeled == 9
    first = (tmp_path / "train.ds").read_bytes()
    assert main(["prepare", "--train", str(FIXTURES / "two_utterances.csv"), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "train.ds").read_bytes() == first


def test_prepare_missing_input_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["prepare", "--train", str(FIXTURES / "two_utterances.csv"),
                 "--valid", str(tmp_path / "nope.csv"), "--out", str(out)])
    assert code == EXIT_USER
    assert "nope.csv" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_prepare_bad_row_is_user_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    lines = (FIXTURES / "two_utterances.csv").read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 1)[0]
    bad.write_text("\n".join(lines) + "\n")
    assert main(["prepare", "--train", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USER
    assert "bad.csv:4: expected 39 features, got 38" in capsys.readouterr().err


def test_usage_error_is_exit_one():
    assert main(["train"]) == EXIT_USER
    assert main(["no-such-command"]) == EXIT_USER


def test_train_and_eval(caches, tmp_path, capsys):
    assert main(train_args(caches, tmp_path)) == EXIT_OK
    params = load_checkpoint(tmp_path / "model.ckpt")
    assert params.shape.input_dim == 429 and params.shape.hidden_dim == 8
    header, rows = log_rows(tmp_path / "train_log.csv")
    assert "# alpha = 1.0" in header and "# mode = sssae" in header
    assert rows[0] == ["epoch", "lr", "e_r", "e_c", "e_total", "valid_acc", "seconds"]
    assert len(rows) == 3

    report = tmp_path / "report.csv"
    assert main(["eval", "--checkpoint", str(tmp_path / "model.ckpt"), "--data", str(caches / "test.ds"),
                 "--out", str(report)]) == EXIT_OK
    metrics = dict(r for r in csv.reader(report.read_text().splitlines()) if len(r) == 2)
    assert 0.0 <= float(metrics["frame_accuracy_collapsed"]) <= 1.0
    assert metrics["num_frames"] == "150"


def test_train_is_seeded(caches, tmp_path):
    for name in ("a", "b"):
        assert main(train_args(caches, tmp_path / name, "--seed", "7", "--fraction", "0.2")) == EXIT_OK
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    strip = lambda rows: [r[:-1] for r in rows]
    assert strip(log_rows(tmp_path / "a" / "train_log.csv")[1]) == strip(log_rows(tmp_path / "b" / "train_log.csv")[1])


def test_train_baseline_and_divergence(caches, tmp_path, capsys):
    assert main(train_args(caches, tmp_path / "nn", "--baseline", "--fraction", "0.3")) == EXIT_OK
    assert "# mode = classifier" in log_rows(tmp_path / "nn" / "train_log.csv")[0]
    code = main(train_args(caches, tmp_path / "big", "--set", "lr_initial=1e308", "--set", "lr_floor=0"))
    assert code == EXIT_NUMERIC
    assert "epoch 0" in capsys.readouterr().err


def test_train_rejects_bad_config(caches, tmp_path):
    assert main(train_args(caches, tmp_path, "--alpha", "-1")) == EXIT_USER
    assert main(train_args(caches, tmp_path, "--set", "corruption_rate=2")) == EXIT_USER


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("ok") == 3 and "alpha=100" in out
    assert main(["gradcheck", "--alpha", "0"]) == EXIT_OK
    assert main(["gradcheck", "--alpha", "1", "--perturb", "1e-3"]) == EXIT_NUMERIC
    assert "W_E[0, 0]" in capsys.readouterr().out


def write_cfg(tmp_path, text=SMALL_SWEEP):
    path = tmp_path / "sweep.cfg"
    path.write_text(text)
    return path


def test_sweep_outputs(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    header, rows = log_rows(tmp_path / "o" / "sweep_table.csv")
    assert rows[0] == ["pct", "count", "nn_valid_acc", "nn_test_acc", "sssae_valid_acc", "sssae_test_acc", "alpha"]
    assert [r[:2] for r in rows[1:]] == [["5", "30"], ["50", "300"]]
    assert all(r[-1] in ("0.5", "2") for r in rows[1:])
    assert header == [
        "# seed = 0",
        "# fractions = 0.05,0.5",
        "# alphas = 0.05:0.5,2;0.5:0.5,2",
        "# hidden_dim = 12",
        "# baseline_hidden_dim = 12",
        "# baseline_epochs = 2",
        "# train_frames = 600",
        "# valid_frames = 200",
        "# test_frames = 200",
        "# train.batch_size = 64",
        "# train.epochs = 2",
        "# train.lr_initial = 0.05",
        "# train.lr_decay_start_epoch = 1",
        "# train.lr_floor = 0.0001",
        "# train.corruption_rate = 0.2",
        "# train.sparsity = 0.0",
        "# train.patience = None",
        "# baseline.batch_size = 16",
        "# baseline.lr_initial = 0.05",
        "# baseline.lr_decay_start_epoch = 1",
        "# baseline.lr_floor = 0.0001",
        "# baseline.corruption_rate = 0.0",
        "# baseline.sparsity = 0.0",
        "# baseline.patience = None",
    ]
    runs = list(csv.DictReader(open(tmp_path / "o" / "sweep_runs.csv")))
    assert len(runs) == 6 and all(r["status"] == "ok" for r in runs)
    curve = list(csv.DictReader(open(tmp_path / "o" / "sweep_curve.csv")))
    assert [float(r["fraction"]) for r in curve] == [0.05, 0.5]


def test_degenerate_sweep(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_SWEEP.replace("fractions = 0.05, 0.5", "fractions = 1.0")
                    .replace("alphas = 0.5, 2", "alphas = 0"))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    _, rows = log_rows(tmp_path / "o" / "sweep_table.csv")
    assert rows[1][:2] == ["100", "600"] and rows[1][-1] == "0"


def test_sweep_config_errors(tmp_path):
    bad = write_cfg(tmp_path, SMALL_SWEEP.replace("fractions = 0.05, 0.5", "fractions = 0"))
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USER
    (tmp_path / "empty.cfg").write_text("hidden_dim = 4\n")
    assert main(["sweep", "--config", str(tmp_path / "empty.cfg"), "--out", str(tmp_path / "o")]) == EXIT_USER


def test_alpha_selection_ignores_test_labels(tmp_path):
    spec = build_spec(read_config(write_cfg(tmp_path)), 0)
    clean = run_sweep(spec)
    rng = np.random.default_rng(0)
    scrambled = replace(spec.test, labels=rng.permutation(spec.test.labels))
    noisy = run_sweep(replace(spec, test=scrambled))
    for a, b in zip(clean.rows, noisy.rows):
        assert a.best_alpha == b.best_alpha
        assert a.alpha_valid == b.alpha_valid and a.nn_valid == b.nn_valid
