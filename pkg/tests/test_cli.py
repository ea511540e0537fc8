"""Command-line surface: exit codes, artifact layout, and end-to-end
plumbing on a miniature configuration."""
import subprocess
import sys

import numpy as np
import pytest

from vistok.cli import main
from vistok.data import synth_dataset
from vistok.errors import NumericFault
from vistok.serialize import load_checkpoint, load_tensor, load_tokens, save_tensor

TINY_CFG = """\
# miniature pipeline exercise
seed = 3
patch_size = 4
temporal_patch = 2
hidden = 32
heads = 2
spatial_layers = 1
temporal_layers = 1
window = 2
latent_dim = 4
codebook_size = 32
stage1_iters = 4
stage2_iters = 6
image_resolution = 8
joint_resolutions = 8
video_frames = 5
batch_size = 2
warmup_iters = 2
dataset_size = 6
kl_iters = 5
kl_warmup = 2
lm_dim = 16
lm_layers = 1
lm_heads = 2
lm_context = 16
lm_iters = 5
lm_warmup = 2
lm_batch = 2
ddpm_steps = 5
ddpm_dim = 16
ddpm_layers = 1
ddpm_heads = 2
ddpm_iters = 5
ddpm_warmup = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CFG, encoding="utf-8")
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "vq"
    rc = main(["train", "--config", str(workdir / "tiny.cfg"), "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def kl_dir(workdir, trained):
    out = workdir / "kl"
    rc = main(["finetune-kl", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(trained / "tokenizer_vq.otck"),
               "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def lm_path(workdir, trained):
    """A token-model checkpoint, trained through the generate command."""
    path = workdir / "token_lm.otck"
    rc = main(["generate", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(trained / "tokenizer_vq.otck"),
               "--lm", str(path), "--out", str(workdir / "gen-fixture")])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def clip_file(workdir):
    clip = synth_dataset("moving-shapes", 1, 8, 4, seed=7)[0]
    path = workdir / "clip.otsr"
    save_tensor(str(path), clip)
    return path


# -- exit codes -------------------------------------------------------------------

def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_missing_required_argument(capsys):
    assert main(["train"]) == 1
    assert "--out" in capsys.readouterr().err


def test_malformed_set_override(workdir, capsys):
    rc = main(["train", "--set", "garbage", "--out", str(workdir / "x")])
    assert rc == 1
    assert "KEY=VALUE" in capsys.readouterr().err


def test_config_problems_exit_2(workdir, capsys):
    rc = main(["train", "--set", "codebook_size=0", "--out", str(workdir / "x")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err
    rc = main(["train", "--set", "no_such_key=1", "--out", str(workdir / "x")])
    assert rc == 2
    rc = main(["train", "--config", str(workdir / "absent.cfg"),
               "--out", str(workdir / "x")])
    assert rc == 2


def test_numeric_fault_exits_3(workdir, monkeypatch, capsys):
    import vistok.train_loop as tl

    def boom(cfg, out_dir):
        raise NumericFault("loss went non-finite at iteration 7")

    monkeypatch.setattr(tl, "run_vq_training", boom)
    rc = main(["train", "--out", str(workdir / "x")])
    assert rc == 3
    assert "numeric fault" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_1(workdir, capsys):
    bad = workdir / "bad.otck"
    bad.write_bytes(b"not a checkpoint at all")
    rc = main(["eval", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(bad)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


# -- training runs ----------------------------------------------------------------

def test_train_writes_artifacts(workdir, trained):
    assert (trained / "tokenizer_vq.otck").exists()
    assert (trained / "config.txt").exists()
    lines = (trained / "metrics.tsv").read_text().splitlines()
    assert len(lines) == 10
    for line in lines:
        assert len(line.split("\t")) == 9
    stages = [int(line.split("\t")[1]) for line in lines]
    assert stages == [1] * 4 + [2] * 6
    meta, arrays = load_checkpoint(str(trained / "tokenizer_vq.otck"))
    assert meta["phase"] == "vq"
    assert any(k.startswith("tok.") for k in arrays)
    assert any(k.startswith("cb.") for k in arrays)


def test_same_seed_reruns_are_byte_identical(workdir, trained):
    out2 = workdir / "vq2"
    rc = main(["train", "--config", str(workdir / "tiny.cfg"), "--out", str(out2)])
    assert rc == 0
    assert (trained / "metrics.tsv").read_bytes() == (out2 / "metrics.tsv").read_bytes()
    assert ((trained / "tokenizer_vq.otck").read_bytes()
            == (out2 / "tokenizer_vq.otck").read_bytes())


def test_eval_reports_mean_psnr(workdir, trained, capsys):
    rc = main(["eval", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(trained / "tokenizer_vq.otck")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean mse" in out and "over 6 samples" in out


def test_finetune_then_eval(workdir, kl_dir, capsys):
    ckpt = kl_dir / "tokenizer_kl.otck"
    assert ckpt.exists()
    assert len((kl_dir / "metrics.tsv").read_text().splitlines()) == 5
    rc = main(["eval", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(ckpt)])
    assert rc == 0
    assert "mean mse" in capsys.readouterr().out


def test_finetune_rejects_wrong_phase_checkpoint(workdir, kl_dir, capsys):
    rc = main(["finetune-kl", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(kl_dir / "tokenizer_kl.otck"),
               "--out", str(workdir / "kl-bad")])
    assert rc == 2
    assert "expected a quantizer checkpoint" in capsys.readouterr().err


# -- codec plumbing ---------------------------------------------------------------

def test_encode_decode_roundtrip(workdir, trained, clip_file, capsys):
    tokens = workdir / "clip.ottk"
    rc = main(["encode", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(trained / "tokenizer_vq.otck"),
               "--input", str(clip_file), "--out", str(tokens), "--cond", "2"])
    assert rc == 0
    assert "bits/token" in capsys.readouterr().out
    grid, k, cond = load_tokens(str(tokens))
    assert k == 32 and cond == 2
    assert grid.shape == (3, 2, 2)

    decoded = workdir / "clip_back.otsr"
    rc = main(["decode", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(trained / "tokenizer_vq.otck"),
               "--tokens", str(tokens), "--out", str(decoded)])
    assert rc == 0
    pixels = load_tensor(str(decoded))
    assert pixels.shape == (5, 8, 8, 3)
    assert np.all(np.isfinite(pixels))


def test_decode_rejects_codebook_size_mismatch(workdir, trained, clip_file, capsys):
    tokens = workdir / "clip.ottk"
    if not tokens.exists():
        rc = main(["encode", "--config", str(workdir / "tiny.cfg"),
                   "--checkpoint", str(trained / "tokenizer_vq.otck"),
                   "--input", str(clip_file), "--out", str(tokens)])
        assert rc == 0
        capsys.readouterr()
    rc = main(["decode", "--config", str(workdir / "tiny.cfg"),
               "--set", "codebook_size=16",
               "--checkpoint", str(trained / "tokenizer_vq.otck"),
               "--tokens", str(tokens), "--out", str(workdir / "nope.otsr")])
    assert rc == 1


# -- generation -------------------------------------------------------------------

def test_generate_artifacts(workdir, lm_path):
    gen = workdir / "gen-fixture"
    assert lm_path.exists()
    assert (gen / "sample.ottk").exists()
    assert (gen / "config.txt").exists()
    assert load_tensor(str(gen / "sample.otsr")).shape == (5, 8, 8, 3)
    meta, _ = load_checkpoint(str(lm_path))
    assert meta["phase"] == "lm"
    assert tuple(meta["grid"]) == (3, 2, 2)


def test_generate_trains_only_when_missing(workdir, trained, capsys):
    fresh = workdir / "lm_b.otck"
    args = ["generate", "--config", str(workdir / "tiny.cfg"),
            "--checkpoint", str(trained / "tokenizer_vq.otck"),
            "--lm", str(fresh), "--out", str(workdir / "gen-b"), "--cond", "1"]
    assert main(args) == 0
    assert "trained token model" in capsys.readouterr().out
    assert main(args) == 0
    assert "trained token model" not in capsys.readouterr().out


def test_predict_frames_requires_slide_on_overflow(workdir, trained, lm_path,
                                                   clip_file, capsys):
    out = workdir / "pred.otsr"
    args = ["predict-frames", "--config", str(workdir / "tiny.cfg"),
            "--checkpoint", str(trained / "tokenizer_vq.otck"),
            "--lm", str(lm_path), "--input", str(clip_file),
            "--future-slots", "2", "--out", str(out)]
    rc = main(args)
    assert rc == 1
    assert "slide" in capsys.readouterr().err
    rc = main(args + ["--slide"])
    assert rc == 0
    assert load_tensor(str(out)).shape == (9, 8, 8, 3)


def test_predict_frames_within_context_needs_no_slide(workdir, trained, lm_path,
                                                      clip_file):
    out = workdir / "pred1.otsr"
    rc = main(["predict-frames", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(trained / "tokenizer_vq.otck"),
               "--lm", str(lm_path), "--input", str(clip_file),
               "--future-slots", "1", "--out", str(out)])
    assert rc == 0
    assert load_tensor(str(out)).shape == (7, 8, 8, 3)


def test_diffuse_train_then_sample(workdir, kl_dir, capsys):
    out = workdir / "ddpm"
    rc = main(["diffuse", "--config", str(workdir / "tiny.cfg"),
               "--action", "train",
               "--kl-checkpoint", str(kl_dir / "tokenizer_kl.otck"),
               "--out", str(out)])
    assert rc == 0
    denoiser = out / "denoiser.otck"
    assert denoiser.exists()

    rc = main(["diffuse", "--config", str(workdir / "tiny.cfg"),
               "--action", "sample",
               "--kl-checkpoint", str(kl_dir / "tokenizer_kl.otck"),
               "--denoiser", str(denoiser), "--out", str(out), "--cond", "0"])
    assert rc == 0
    sample = load_tensor(str(out / "diffusion_sample.otsr"))
    assert sample.shape == (5, 8, 8, 3)
    assert np.all(np.isfinite(sample))


def test_diffuse_sample_without_denoiser_is_usage_error(workdir, kl_dir, capsys):
    rc = main(["diffuse", "--config", str(workdir / "tiny.cfg"),
               "--action", "sample",
               "--kl-checkpoint", str(kl_dir / "tokenizer_kl.otck"),
               "--out", str(workdir / "ddpm2")])
    assert rc == 1
    assert "--denoiser" in capsys.readouterr().err


def test_eval_rejects_unevaluable_phase(workdir, lm_path, capsys):
    rc = main(["eval", "--config", str(workdir / "tiny.cfg"),
               "--checkpoint", str(lm_path)])
    assert rc == 1
    assert "not evaluable" in capsys.readouterr().err


# -- selftest ---------------------------------------------------------------------

def test_selftest_passes_in_process(capsys):
    assert main(["selftest"]) == 0
    assert "8/8 checks passed" in capsys.readouterr().out


def test_entry_point_runs_as_module():
    proc = subprocess.run([sys.executable, "-m", "vistok.cli", "selftest"],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0
    assert "8/8 checks passed" in proc.stdout
