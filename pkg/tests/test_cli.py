import csv
import subprocess
import sys

import pytest

from deblurvae.cli import main, parse_grid, resolve_config, UsageError

TINY_CFG = """\
# tiny smoke config
image_size = 8
channels = 4,8
latent_dim = 3
hidden = 16
g_hidden = 16
kernel_size = 3
batch_size = 8
n_images = 40
epochs = 2
warmup_epochs = 1
lr = 0.003
ckpt_every = 1
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root / "run"


def test_train_outputs(trained_run):
    names = {p.name for p in trained_run.iterdir()}
    assert {"manifest.cfg", "metrics.csv", "ckpt_epoch1.dbve", "ckpt_epoch2.dbve", "samples"} <= names
    rows = list(csv.DictReader(open(trained_run / "metrics.csv")))
    assert [r["phase"] for r in rows] == ["warmup", "wiener"]


def test_manifest_materializes_every_default(trained_run):
    text = (trained_run / "manifest.cfg").read_text()
    for key in ("loss_kind", "C", "epsilon", "beta", "kernel_norm", "g_input", "logdet", "seed"):
        assert f"\n{key} = " in text or text.startswith(f"{key} = ")


def test_manifest_alone_reproduces_the_run(trained_run, tmp_path):
    assert main(["train", "--config", str(trained_run / "manifest.cfg"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (trained_run / "metrics.csv").read_bytes()


def test_usage_errors(tmp_path, cfg_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--colour=1"]) == 2
    assert "valid keys" in capsys.readouterr().err


def test_override_precedence(cfg_path):
    env = {"DEBLUR_SEED": "11"}
    assert resolve_config(None, {}, env).seed == 11
    assert resolve_config(cfg_path, {}, env).C == 0.025
    assert resolve_config(cfg_path, {"C": "0.1"}, env).C == 0.1
    cfg_path.write_text(TINY_CFG + "seed = 5\n")
    assert resolve_config(cfg_path, {}, env).seed == 5
    assert resolve_config(cfg_path, {"seed": "9"}, env).seed == 9


def test_cli_override_reaches_resolved_dump(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r"), "--loss=L2", "--beta", "0.5",
                 "--epochs=1", "--warmup_epochs=0"]) == 0
    text = (tmp_path / "r" / "manifest.cfg").read_text()
    assert "loss_kind = L2" in text and "beta = 0.5" in text


def test_grid_parsing():
    assert parse_grid("") == [{}]
    pts = parse_grid("C=0.005,0.025,0.1;beta=0.5,1")
    assert len(pts) == 6 and pts[0] == {"C": "0.005", "beta": "0.5"}
    with pytest.raises(UsageError):
        parse_grid("C")
    with pytest.raises(UsageError):
        parse_grid("C=")
    with pytest.raises(UsageError):
        parse_grid("a=1,2,3,4;b=1,2,3,4;c=1,2,3,4,5")


def test_ablate_summary(cfg_path, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out), "--grid", "C=0.005,0.1"]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert len(rows) == 2
    assert [r["rank"] for r in rows] == ["1", "2"]
    assert {r["C"] for r in rows} == {"0.005", "0.1"}
    assert all(r["status"] == "ok" for r in rows)
    gaps = [float(r["spectrum_gap"]) for r in rows]
    assert gaps == sorted(gaps)


def test_ablate_empty_grid_single_run(cfg_path, tmp_path):
    assert main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "a"), "--epochs=1",
                 "--warmup_epochs=0"]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "a" / "summary.csv")))) == 1


def test_malformed_grid_exit_code(cfg_path, tmp_path):
    assert main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path), "--grid", "C"]) == 2


def test_generate_is_reproducible(trained_run, tmp_path):
    ck = str(trained_run / "ckpt_epoch2.dbve")
    for d in ("g1", "g2"):
        assert main(["generate", "--ckpt", ck, "--out", str(tmp_path / d), "--n", "16", "--seed", "7"]) == 0
    a = (tmp_path / "g1" / "samples" / "generated_seed7.pgm").read_bytes()
    assert a == (tmp_path / "g2" / "samples" / "generated_seed7.pgm").read_bytes()


def test_reconstruct_and_estimate_kernel(trained_run, tmp_path):
    ck = str(trained_run / "ckpt_epoch2.dbve")
    assert main(["reconstruct", "--ckpt", ck, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "reconstruct.csv")))
    assert len(rows) == 8
    assert main(["estimate-kernel", "--ckpt", ck, "--out", str(tmp_path), "--n", "3"]) == 0
    krows = list(csv.DictReader(open(tmp_path / "kernels" / "kernels.csv")))
    assert len(krows) == 6 and len([k for k in krows[0] if k.startswith("w")]) == 9
    assert (tmp_path / "kernels" / "panel.pgm").exists()


def test_spectrum_of_data_against_itself(cfg_path, tmp_path):
    assert main(["spectrum", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "spectra" / "gap.csv")))
    assert rows[0]["set"] == "data" and float(rows[0]["spectrum_gap"]) == 0.0
    assert (tmp_path / "spectra" / "data_logspec.pgm").exists()


def test_checkpoint_errors(trained_run, tmp_path):
    bad = tmp_path / "bad.dbve"
    bad.write_bytes(b"nonsense")
    cfg = str(trained_run / "manifest.cfg")
    assert main(["reconstruct", "--ckpt", str(bad), "--config", cfg, "--out", str(tmp_path)]) == 4
    assert main(["reconstruct", "--ckpt", str(tmp_path / "none.dbve"), "--config", cfg,
                 "--out", str(tmp_path)]) == 4
    # architecture mismatch between config and checkpoint
    assert main(["reconstruct", "--ckpt", str(trained_run / "ckpt_epoch2.dbve"), "--config", cfg,
                 "--out", str(tmp_path), "--latent_dim=5"]) == 2


def test_reconstruct_rejects_mismatched_data(trained_run, tmp_path):
    assert main(["reconstruct", "--ckpt", str(trained_run / "ckpt_epoch2.dbve"), "--out", str(tmp_path),
                 "--image_size=16"]) == 2


def test_divergence_exit_code(cfg_path, tmp_path, monkeypatch):
    from deblurvae import trainer

    def boom(*a, **k):
        raise FloatingPointError("injected")

    monkeypatch.setattr(trainer, "kl_standard_normal", boom)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path)]) == 3


def test_module_entry_point(cfg_path):
    proc = subprocess.run([sys.executable, "-m", "deblurvae", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "deblurvae" in proc.stdout
