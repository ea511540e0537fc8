"""Third probe round: two-point DDPM with wider latents (relative noise on
block means shrinks as 1/sqrt(dim)), and progressive vs video-only taken
closer to convergence with held-out evaluation."""
import argparse
import tempfile
import time

import numpy as np

from vistok.config import Config
from vistok.data import synth_dataset
from vistok.diffusion import DenoiserNet, DiffusionConfig, ddpm_train_loss
from vistok.rng import RngStream
from vistok.train import Adam, lr_at
from vistok.train_loop import evaluate_vq_mse, run_vq_training
from vistok import tensor as T

BASE = dict(seed=0, patch_size=4, temporal_patch=2, hidden=32, heads=2,
            spatial_layers=1, temporal_layers=1, window=2, latent_dim=4,
            codebook_size=64, image_resolution=16, joint_resolutions=(16,),
            video_frames=5, batch_size=8, base_lr=1e-3,
            warmup_iters=40, max_grid=8, max_slots=4)


def ddpm3(variants=((1, 1e-3), (4, 1e-3))):
    for draws, lr in variants:
        t0 = time.time()
        rng = RngStream(9)
        dc = DiffusionConfig(num_steps=20)
        net = DenoiserNet(4, 16, 1, 2, 20, 16, rng.child("net"))
        z2 = rng.child("z2").normal((2, 1, 4, 4, 4))
        opt = Adam(list(net.named_parameters()))
        losses = []
        for it in range(500):
            acc = None
            for d in range(draws):
                loss = ddpm_train_loss(z2, net, dc, rng.child(("it", it, d)))
                acc = loss if acc is None else T.add(acc, loss)
            acc = T.scale(acc, 1.0 / draws)
            acc.backward()
            opt.step(lr_at(it, 500, lr, 40))
            opt.zero_grad()
            losses.append(float(acc.data))
        blocks = np.asarray(losses).reshape(-1, 50).mean(axis=1)
        diffs = np.diff(blocks)
        print(f"DDPM3 draws={draws} lr={lr} blocks={np.array2string(blocks, precision=2)} "
              f"monotone={bool(np.all(diffs < 0))} worst={diffs.max():+.3f} "
              f"mins={(time.time() - t0) / 60:.1f}", flush=True)


def prog3(tmp, n_train=8, totals=(1000, 2000)):
    heldout = synth_dataset("moving-shapes", 32, 16, 4, seed=202)
    for total in totals:
        t0 = time.time()
        s1 = int(total * 0.4)
        s2 = total - s1
        prog = run_vq_training(
            Config(**BASE, dataset_size=n_train, stage1_iters=s1, stage2_iters=s2),
            f"{tmp}/prog_{total}")
        vid = run_vq_training(
            Config(**BASE, dataset_size=n_train, stage1_iters=0, stage2_iters=total,
                   modality_rule="video_only"), f"{tmp}/vid_{total}")
        m_prog = evaluate_vq_mse(prog.modules["tokenizer"], prog.modules["codebook"],
                                 heldout)
        m_vid = evaluate_vq_mse(vid.modules["tokenizer"], vid.modules["codebook"],
                                heldout)
        train_clips = synth_dataset("moving-shapes", n_train, 16, 4, seed=101)
        t_prog = evaluate_vq_mse(prog.modules["tokenizer"], prog.modules["codebook"],
                                 train_clips)
        t_vid = evaluate_vq_mse(vid.modules["tokenizer"], vid.modules["codebook"],
                                train_clips)
        print(f"PROG3 n={n_train} split={s1}+{s2} held prog={m_prog:.6f} "
              f"vid={m_vid:.6f} ok={m_prog <= m_vid} | train prog={t_prog:.6f} "
              f"vid={t_vid:.6f} ok={t_prog <= t_vid} "
              f"mins={(time.time() - t0) / 60:.1f}", flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("which", choices=["ddpm", "prog", "all"], nargs="?", default="all")
    a = ap.parse_args()
    if a.which in ("ddpm", "all"):
        ddpm3()
    if a.which in ("prog", "all"):
        prog3(tempfile.mkdtemp(prefix="mini3-"))
