import numpy as np
import pytest

from pmtrans.cli import format_run_config, main, parse_run_config
from pmtrans.serialization import load_tensor, save_tensor

TINY = "height=16\nwidth=16\nbase_channels=4\nheads=2\nmax_epochs=2\ngate_freeze_epochs=1\nbatch_size=2\n"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_run_config_parsing():
    cfg = parse_run_config("# comment\nheads = 2  # trailing\naugment=false\n\n")
    assert cfg["heads"] == 2 and cfg["augment"] is False
    back = parse_run_config(format_run_config(cfg))
    assert back == cfg


@pytest.mark.parametrize("text,code", [
    ("hedas=2\n", "unknown-config-key"),
    ("heads\n", "bad-config-line"),
    ("heads=two\n", "bad-value"),
    ("augment=maybe\n", "bad-value"),
])
def test_run_config_errors(tmp_path, capsys, text, code):
    (tmp_path / "c.txt").write_text(text)
    rc, _, err = run(capsys, "train", "--config", str(tmp_path / "c.txt"), "--data", str(tmp_path), "--out", str(tmp_path / "o"))
    assert rc == 2
    assert err.startswith(f"error: {code}") and err.count("\n") == 1


def test_usage_errors_exit_2(capsys):
    rc, _, err = run(capsys, "bogus")
    assert rc == 2 and err.startswith("error: usage") and err.count("\n") == 1
    rc, _, err = run(capsys, "audit", "--height", "16")
    assert rc == 2 and err.count("\n") == 1


def test_audit_128(capsys, tmp_path):
    rc, out, _ = run(capsys, "audit", "--height", "128", "--width", "128", "--csv", str(tmp_path / "a.csv"))
    assert rc == 0
    assert "long / medtrans-global = 1/64" in out and "1/216" in out
    assert (tmp_path / "a.csv").read_text().startswith("scheme,H,W")


def test_audit_small_grid_is_enumerated(capsys):
    rc, out, _ = run(capsys, "audit", "--height", "16", "--width", "16")
    assert rc == 0 and "match pixel enumeration" in out
    rc, _, err = run(capsys, "audit", "--height", "10", "--width", "10")
    assert rc == 2 and err.startswith("error: config")


def test_eval_empty_dataset(capsys, tmp_path):
    rc, _, err = run(capsys, "eval", "--model", str(tmp_path / "m.pmtc"), "--data", str(tmp_path))
    assert rc == 2 and err.startswith("error: empty-dataset")


def test_gradcheck_units(capsys):
    rc, out, _ = run(capsys, "gradcheck", "--seed", "7", "--target", "block", "gate")
    assert rc == 0
    assert "block: max_rel_error=" in out and out.strip().endswith("PASS")


def test_gradcheck_failure_exits_1(capsys):
    # an impossible tolerance must fail rather than pass vacuously
    rc, out, err = run(capsys, "gradcheck", "--target", "gate", "--tolerance", "0")
    assert rc == 1 and "FAIL" in out and err.startswith("error: gradcheck-failed")


def test_pipeline_is_deterministic(capsys, tmp_path):
    data, cfg = tmp_path / "data", tmp_path / "c.txt"
    cfg.write_text(TINY)
    assert run(capsys, "synth", "--out", str(data), "--count", "5", "--height", "16", "--width", "16", "--seed", "2")[0] == 0
    for name in ("a", "b"):
        rc, out, _ = run(capsys, "train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / name))
        assert rc == 0 and "best val_dice" in out
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "best.pmtc").read_bytes() == (b / "best.pmtc").read_bytes()
    assert (a / "config.txt").read_text() == (b / "config.txt").read_text()
    assert "heads=2" in (a / "config.txt").read_text()

    rc, out, _ = run(capsys, "eval", "--model", str(a / "best.pmtc"), "--data", str(data))
    assert rc == 0 and out.startswith("dice ")
    value = out.split()[1]
    assert len(value.split(".")[1]) == 2

    image = sorted((data / "images").iterdir())[0]
    rc, _, _ = run(capsys, "predict", "--model", str(a / "best.pmtc"), "--image", str(image), "--out", str(tmp_path / "p.pmtn"))
    assert rc == 0
    mask = load_tensor(tmp_path / "p.pmtn")
    assert mask.dtype == np.uint8 and mask.shape == (1, 16, 16) and set(np.unique(mask)) <= {0, 1}
    pgm = (tmp_path / "p.pgm").read_bytes()
    assert pgm.startswith(b"P5\n16 16\n255\n")
    body = np.frombuffer(pgm[len(b"P5\n16 16\n255\n"):], np.uint8).reshape(16, 16)
    assert np.array_equal(body, mask[0] * 255)


def test_train_rejects_mismatched_data(capsys, tmp_path):
    data = tmp_path / "data"
    assert run(capsys, "synth", "--out", str(data), "--count", "2", "--height", "32", "--width", "32")[0] == 0
    (tmp_path / "c.txt").write_text(TINY)
    rc, _, err = run(capsys, "train", "--config", str(tmp_path / "c.txt"), "--data", str(data), "--out", str(tmp_path / "o"))
    assert rc == 2 and err.startswith("error: config-data-mismatch")


def test_predict_shape_mismatch(capsys, tmp_path):
    data, cfg = tmp_path / "data", tmp_path / "c.txt"
    cfg.write_text(TINY)
    run(capsys, "synth", "--out", str(data), "--count", "3", "--height", "16", "--width", "16")
    run(capsys, "train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "r"))
    save_tensor(tmp_path / "img.pmtn", np.zeros((1, 8, 8), np.float32))
    rc, _, err = run(capsys, "predict", "--model", str(tmp_path / "r" / "best.pmtc"), "--image", str(tmp_path / "img.pmtn"),
                     "--out", str(tmp_path / "o.pmtn"))
    assert rc == 2 and err.startswith("error: shape-mismatch")


def test_thread_env(capsys, monkeypatch):
    monkeypatch.setenv("PMTRANS_THREADS", "1")
    assert run(capsys, "audit", "--height", "8", "--width", "8")[0] == 0
    monkeypatch.setenv("PMTRANS_THREADS", "zero")
    rc, _, err = run(capsys, "audit", "--height", "8", "--width", "8")
    assert rc == 2 and err.startswith("error: bad-env")


def test_run_config_covers_every_field():
    from dataclasses import fields

    from pmtrans.model import PMTransConfig
    from pmtrans.training import TrainConfig

    keys = set(parse_run_config(""))
    for f in fields(TrainConfig):
        assert f.name in keys
    mapped = {"branches": "depth_short", "ds_weights": "ds_weight_full", "seed": "init_seed"}
    for f in fields(PMTransConfig):
        assert mapped.get(f.name, f.name) in keys
