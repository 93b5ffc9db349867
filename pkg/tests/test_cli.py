import subprocess
import sys

import pytest

from casemil import tensor as T
from casemil.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, main
from casemil.config import ConfigError, parse_config

SMALL = """\
# tiny synthetic run
dataset.synthetic = true
dataset.synthetic.n_cases = 24
model.image_height = 32
model.image_width = 24
model.channels = 4,8
model.embed_dim = 8
model.hidden_dim = 8
model.patch_size = 8
model.t_fraction = 0.05
training.max_epochs = 2
training.lr = 0.001
seeds.data = 3
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(SMALL)
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "run")]) == EXIT_OK
    return root


def tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- config

def test_config_defaults_and_overrides():
    cfg = parse_config("model.pooling = IS-MEAN  # case-insensitive\ntraining.lr = 0.01\n")
    assert cfg.get("model.pooling") == "is-mean"
    assert cfg.get("training.lr") == 0.01
    assert cfg.get("training.max_epochs") == 30 and cfg.get("model.k") == 6
    assert cfg.get("dataset.manifest") is None


@pytest.mark.parametrize("text,key", [
    ("model.depth = 3\n", "model.depth"),
    ("network.k = 3\n", "network.k"),
    ("training.lr = fast\n", "training.lr"),
    ("model.pooling = es-median\n", "model.pooling"),
    ("training.scheme = sometimes\n", "training.scheme"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert key in str(exc.value) and exc.value.line == 1


def test_config_rejects_duplicates_and_bare_lines():
    with pytest.raises(ConfigError, match="twice"):
        parse_config("training.lr = 1\ntraining.lr = 2\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("training.lr = 1\njust words\n")


def test_invalid_spec_lists_valid_ones():
    with pytest.raises(ConfigError) as exc:
        parse_config("model.pooling = max\n")
    assert "es-att-side" in str(exc.value) and "is-mean" in str(exc.value)


def test_resolved_config_parses_back():
    cfg = parse_config(SMALL)
    again = parse_config(cfg.to_text())
    for key in cfg.values:
        assert again.get(key) == cfg.get(key)


# ---------------------------------------------------------------- generate

def test_generate_is_deterministic(tmp_path):
    (tmp_path / "syn.cfg").write_text(SMALL)
    for d in ("a", "b"):
        assert main(["generate", "--config", str(tmp_path / "syn.cfg"), "--out", str(tmp_path / d)]) == EXIT_OK
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    names = {str(p) for p in a}
    assert {"manifest.csv", "train.csv", "val.csv", "test.csv", "provenance.txt"} <= names
    assert any(n.endswith(".pgm") for n in names)
    assert "seeds.data = 3" in (tmp_path / "a" / "provenance.txt").read_text()


def test_generate_refuses_non_empty_dir(tmp_path, capsys):
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / "keep.txt").write_text("x")
    args = ["generate", "--set", "dataset.synthetic.n_cases=10", "--out", str(tmp_path / "out")]
    assert main(args) == EXIT_DATA
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == EXIT_OK


def test_malformed_config_exit_code(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("dataset.synthetic.n_cases = many\n")
    assert main(["generate", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "dataset.synthetic.n_cases" in capsys.readouterr().err
    assert main(["generate", "--set", "seeds.data", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


# ---------------------------------------------------------------- train

def test_train_outputs(run_dir):
    run = run_dir / "run"
    for name in ("model.prm", "model.prm.index", "model.prm.meta", "train.log", "config.resolved"):
        assert (run / name).is_file()
    log = (run / "train.log").read_text().splitlines()
    assert log[0].startswith("epoch=1 split=train loss=") and log[1].startswith("epoch=1 split=val ")
    meta = (run / "model.prm.meta").read_text()
    assert "model.pooling = es-att-side" in meta and "training.scheme = dynamic" in meta


def test_train_is_bit_reproducible(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "run.cfg"), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "model.prm").read_bytes() == (run_dir / "run" / "model.prm").read_bytes()
    assert (tmp_path / "again" / "train.log").read_bytes() == (run_dir / "run" / "train.log").read_bytes()


def test_fixed_image_without_four_view_cases(tmp_path, capsys):
    args = ["train", "--config", "/dev/null", "--set", "dataset.synthetic=true",
            "--set", "dataset.synthetic.n_cases=12", "--set", "dataset.synthetic.view_counts=1L/1R:0.5,nL/mR:0.5",
            "--set", "training.scheme=fixed-image", "--set", "model.image_height=32",
            "--set", "model.image_width=24", "--set", "model.channels=4,8", "--set", "model.patch_size=8",
            "--out", str(tmp_path / "r")]
    assert main(args) == EXIT_DATA
    assert "empty training split" in capsys.readouterr().err


def test_invalid_pooling_spec_on_train(tmp_path, capsys):
    assert main(["train", "--set", "model.pooling=es-sum", "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "is-att-side" in capsys.readouterr().err


# ---------------------------------------------------------------- eval

def test_eval_writes_metrics_figures_and_visualizations(run_dir, tmp_path):
    out = tmp_path / "ev"
    code = main(["eval", "--config", str(run_dir / "run.cfg"), "--ckpt", str(run_dir / "run" / "model.prm"),
                 "--out", str(out), "--visualize", "2"])
    assert code == EXIT_OK
    text = (out / "metrics.txt").read_text()
    for key in ("auc = ", "f1 = ", "roi.best-of-topk.iou = ", "roi.top-attention.iou = ",
                "entropy.4img.uniform = 1.386294", "confusion_with_roi.M-Case = ", "group.All.auc = "):
        assert key in text
    for fig in ("group_auc", "confusion_roi", "roc", "attention_entropy", "training_curves"):
        assert (out / "figures" / f"{fig}.png").read_bytes()[:4] == b"\x89PNG"
    cases = sorted(p for p in (out / "visualize").iterdir())
    assert len(cases) == 2
    files = {p.name for p in cases[0].iterdir()}
    assert "attention.txt" in files
    assert any(n.endswith("_saliency.pgm") for n in files) and any(n.endswith("_boxes.pgm") for n in files)
    # same inputs, same bytes, figures included
    again = tmp_path / "ev2"
    main(["eval", "--config", str(run_dir / "run.cfg"), "--ckpt", str(run_dir / "run" / "model.prm"),
          "--out", str(again), "--visualize", "2"])
    assert tree(out) == tree(again)


def test_eval_iou_mode_filter(run_dir, tmp_path):
    out = tmp_path / "ev"
    main(["eval", "--config", str(run_dir / "run.cfg"), "--ckpt", str(run_dir / "run" / "model.prm"),
          "--out", str(out), "--iou-mode", "top-attention", "--no-figures"])
    text = (out / "metrics.txt").read_text()
    assert "roi.top-attention.iou" in text and "roi.best-of-topk" not in text
    assert not (out / "figures").exists()


def test_eval_without_groundtruth_reports_na(run_dir, tmp_path):
    data = tmp_path / "data"
    main(["generate", "--config", str(run_dir / "run.cfg"), "--out", str(data)])
    rows = (data / "test.csv").read_text().splitlines()
    stripped = [rows[0]] + [",".join(r.split(",")[:5] + ["", ""]) for r in rows[1:]]
    (data / "nogt.csv").write_text("\n".join(stripped) + "\n")
    out = tmp_path / "ev"
    code = main(["eval", "--ckpt", str(run_dir / "run" / "model.prm"), "--data", str(data / "nogt.csv"),
                 "--out", str(out), "--iou-mode", "best-of-topk", "--no-figures"])
    assert code == EXIT_OK
    text = (out / "metrics.txt").read_text()
    assert "roi.best-of-topk.iou = n/a" in text
    assert "proxy.attention.f1 = n/a" in text


def test_eval_spec_mismatch(run_dir, tmp_path, capsys):
    code = main(["eval", "--config", str(run_dir / "run.cfg"), "--ckpt", str(run_dir / "run" / "model.prm"),
                 "--spec", "is-mean", "--out", str(tmp_path / "e")])
    assert code == EXIT_CONFIG
    assert "mismatch" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.prm")]) == EXIT_DATA


# ---------------------------------------------------------------- gradcheck and parser

def test_gradcheck_detects_injected_fault(capsys):
    assert main(["gradcheck", "--trials", "3", "--inject-fault", "tanh"]) == EXIT_VERIFY
    out = capsys.readouterr().out
    assert "op:tanh" in out and "FAIL" in out


def test_gradcheck_lists_every_path(capsys):
    assert main(["gradcheck", "--trials", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    for kind in T.OP_KINDS:
        assert f"op:{kind} " in out
    assert out.count("path:") == 10
    assert "failed = 0" in out


@pytest.mark.parametrize("cmd", ["generate", "train", "eval", "gradcheck"])
def test_help_and_unknown_flags(cmd):
    help_out = subprocess.run([sys.executable, "-m", "casemil", cmd, "--help"], capture_output=True, text=True)
    assert help_out.returncode == 0 and "usage" in help_out.stdout
    bad = subprocess.run([sys.executable, "-m", "casemil", cmd, "--bogus"], capture_output=True, text=True)
    assert bad.returncode != 0
