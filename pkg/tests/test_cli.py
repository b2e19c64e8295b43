import json

import numpy as np
import pytest

from antforge.cli import main

SMALL = [
    "--set", "data.train_size=60", "--set", "data.test_size=24",
    "--set", "data.classes=4", "--set", "data.image_size=16",
    "--set", "model.arch=small", "--set", "optim.batch_size=20",
    "--set", "optim.epochs=2",
]


def _train(tmp_path, mode, extra=()):
    out = tmp_path / f"run-{mode}"
    rc = main(["train", mode, *SMALL, "--out", str(out), "--seed", "3", *extra])
    assert rc == 0
    return out


@pytest.mark.parametrize("argv", [
    ["--help"], ["train", "--help"], ["eval", "--help"],
    ["corrupt", "--help"], ["report", "--help"],
])
def test_help_exits_zero(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 0


def test_train_vanilla_writes_artifacts(tmp_path):
    out = _train(tmp_path, "vanilla")
    assert (out / "classifier.ckpt").exists()
    assert (out / "metrics.csv").read_text().startswith("step,epoch,split")
    assert "antforge" in (out / "VERSION").read_text()
    assert "[data]" in (out / "config.resolved.cfg").read_text()


def test_train_gnt_multi_sigma_and_determinism(tmp_path):
    a = _train(tmp_path, "gnt", ["--sigma", "multi"])
    out_b = tmp_path / "run-b"
    rc = main(["train", "gnt", *SMALL, "--out", str(out_b), "--seed", "3",
               "--sigma", "multi", "--threads", "4"])
    assert rc == 0
    assert (a / "classifier.ckpt").read_bytes() == \
        (out_b / "classifier.ckpt").read_bytes()
    resolved = (a / "config.resolved.cfg").read_text()
    assert "0.08" in resolved and "0.38" in resolved


def test_train_ant_writes_generator(tmp_path):
    out = _train(tmp_path, "ant", ["--epsilon", "2.0",
                                   "--set", "ant.snapshot_interval=2"])
    assert (out / "generator.ckpt").exists()
    assert (out / "classifier.ckpt").exists()


def test_eval_corruptions_and_mce(tmp_path):
    run = _train(tmp_path, "vanilla")
    out = tmp_path / "eval"
    rc = main(["eval", "corruptions", str(run / "classifier.ckpt"),
               *SMALL, "--out", str(out), "--limit", "12"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["mean_accuracy"] <= 1.0
    csv_text = (out / "corruptions.csv").read_text()
    assert csv_text.startswith("kind,severity,accuracy")
    assert len(csv_text.strip().splitlines()) == 1 + 11 * 5

    # mCE of a model against its own error table is exactly 100
    baseline = tmp_path / "baseline.csv"
    lines = ["kind,severity,error"]
    for row in csv_text.strip().splitlines()[1:]:
        kind, sev, acc = row.split(",")
        lines.append(f"{kind},{sev},{1.0 - float(acc)}")
    baseline.write_text("\n".join(lines) + "\n")
    out2 = tmp_path / "eval-mce"
    rc = main(["eval", "corruptions", str(run / "classifier.ckpt"),
               *SMALL, "--out", str(out2), "--limit", "12",
               "--mce", str(baseline)])
    assert rc == 0
    summary = json.loads((out2 / "summary.json").read_text())
    assert summary["mce"] == pytest.approx(100.0)


def test_eval_epsilon_star(tmp_path):
    run = _train(tmp_path, "vanilla")
    out = tmp_path / "eps"
    rc = main(["eval", "epsilon-star", str(run / "classifier.ckpt"),
               *SMALL, "--out", str(out), "--limit", "8", "--tol", "1e-2"])
    assert rc == 0
    payload = json.loads((out / "epsilon_star.json").read_text())
    assert payload["family"] == "gaussian"
    assert payload["samples"] == 8


def test_eval_pgd(tmp_path):
    run = _train(tmp_path, "vanilla")
    out = tmp_path / "pgd"
    rc = main(["eval", "pgd", str(run / "classifier.ckpt"), *SMALL,
               "--out", str(out), "--limit", "12",
               "--norm", "linf", "--eps", "0.1", "--step", "0.01",
               "--iters", "10"])
    assert rc == 0
    payload = json.loads((out / "pgd.json").read_text())
    assert payload["adversarial_accuracy"] <= payload["clean_accuracy"]


def test_corrupt_writes_idx_pairs_and_manifest(tmp_path):
    out = tmp_path / "corr"
    rc = main(["corrupt", *SMALL, "--out", str(out), "--seed", "5",
               "--kinds", "gaussian_noise,brightness,rotate",
               "--severities", "1,3,5", "--limit", "10"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["files"]) == 9
    for entry in manifest["files"]:
        assert (out / entry["images"]).exists()
        assert (out / entry["labels"]).exists()
    # severity-5 gaussian noise must differ from severity-1
    from antforge.data import load_idx
    d1 = load_idx(out / "gaussian_noise-s1-images-idx3-ubyte",
                  out / "gaussian_noise-s1-labels-idx1-ubyte")
    d5 = load_idx(out / "gaussian_noise-s5-images-idx3-ubyte",
                  out / "gaussian_noise-s5-labels-idx1-ubyte")
    clean = None
    assert np.abs(d5.images - d1.images).mean() > 0


def test_corrupt_severity5_sigma_matches_preset(tmp_path):
    # regenerate severity-5 gaussian noise from the same seeds and compare
    from antforge.data import load_idx, synth_blobs
    from antforge.perturb import CorruptionSpec, corrupt
    from antforge.rng import Rng
    out = tmp_path / "corr"
    rc = main(["corrupt", *SMALL, "--out", str(out), "--seed", "5",
               "--kinds", "gaussian_noise", "--severities", "5",
               "--limit", "6"])
    assert rc == 0
    got = load_idx(out / "gaussian_noise-s5-images-idx3-ubyte",
                   out / "gaussian_noise-s5-labels-idx1-ubyte")
    data = synth_blobs(24, classes=4, image_size=16, noise=0.1, seed=1,
                       noise_seed=2)
    base = Rng(5, 0)
    want = np.stack([
        corrupt(data.images[i],
                CorruptionSpec("gaussian_noise", 5, base.derive("sample", i).stream))
        for i in range(6)])
    # round-trip through bytes
    q = np.round(want * 255.0).astype(np.uint8).astype(np.float32) / 255.0
    np.testing.assert_allclose(got.images, q, atol=1e-6)


def test_report_merges_csvs(tmp_path, capsys):
    c = tmp_path / "a.csv"
    c.write_text("kind,severity,accuracy\nrotate,1,0.9\nrotate,2,0.7\n")
    out = tmp_path / "report.md"
    rc = main(["report", str(c), "--out", str(out)])
    assert rc == 0
    text = out.read_text()
    assert "| a |" in text and "80.0" in text


def test_exit_code_2_on_config_error(tmp_path):
    rc = main(["train", "vanilla", "--set", "data.dataset=nope",
               "--out", str(tmp_path / "x")])
    assert rc == 2
    rc = main(["train", "gnt", *SMALL, "--sigma", "abc",
               "--out", str(tmp_path / "y")])
    assert rc == 2
    rc = main(["train", "vanilla", "--set", "badformat",
               "--out", str(tmp_path / "z")])
    assert rc == 2


def test_exit_code_3_on_data_error(tmp_path, monkeypatch):
    monkeypatch.setenv("ANTFORGE_DATA_DIR", str(tmp_path))
    rc = main(["train", "vanilla", "--set", "data.dataset=mnist",
               "--out", str(tmp_path / "x")])
    assert rc == 3


def test_eval_checkpoint_fingerprint_mismatch(tmp_path):
    run = _train(tmp_path, "vanilla")
    # a later --set wins, so the eval run expects a different architecture
    rc = main(["eval", "pgd", str(run / "classifier.ckpt"), *SMALL,
               "--set", "model.arch=madry",
               "--out", str(tmp_path / "bad"), "--limit", "4",
               "--iters", "1"])
    assert rc == 4
