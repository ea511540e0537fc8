"""Second probe round: held-out progressive eval, longer Markov training,
and smoothed two-point DDPM descent."""
import argparse
import tempfile
import time

import numpy as np

from vistok.config import Config
from vistok.data import synth_dataset
from vistok.diffusion import DenoiserNet, DiffusionConfig, ddpm_train_loss
from vistok.lm import TokenLM, batched_lm_loss, flatten_raster, position_losses
from vistok.rng import RngStream
from vistok.train import Adam, lr_at
from vistok.train_loop import evaluate_vq_mse, run_vq_training
from vistok import tensor as T


BASE = dict(seed=0, patch_size=4, temporal_patch=2, hidden=32, heads=2,
            spatial_layers=1, temporal_layers=1, window=2, latent_dim=4,
            codebook_size=64, image_resolution=16, joint_resolutions=(16,),
            video_frames=5, batch_size=8, base_lr=1e-3,
            warmup_iters=40, max_grid=8, max_slots=4)


def prog2(tmp, n_train=8, splits=((120, 180), (200, 300))):
    heldout = synth_dataset("moving-shapes", 32, 16, 4, seed=202)
    for s1, s2 in splits:
        t0 = time.time()
        total = s1 + s2
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
        print(f"PROG2 n={n_train} split={s1}+{s2} prog={m_prog:.6f} "
              f"video_only={m_vid:.6f} ok={m_prog <= m_vid} "
              f"mins={(time.time() - t0) / 60:.1f}", flush=True)


def markov2(steps=2000, dim=64, n_train=1024, batch=32, lr=3e-3):
    t0 = time.time()
    k, length = 8, 32
    p = np.zeros((k, k))
    for s in range(k):
        p[s, (s + 1) % k] = 0.9
        p[s, (s + 3) % k] = 0.1
    rate = -float(np.sum((1.0 / k) * np.sum(p * np.log(p, where=p > 0,
                                                       out=np.zeros_like(p)), axis=1)))

    def draw_chains(n, rng):
        out = np.zeros((n, length), np.int64)
        out[:, 0] = rng.integers(0, k, n)
        for i in range(1, length):
            u = rng.child(("u", i)).uniform((n,), 0.0, 1.0)
            out[:, i] = np.where(u < 0.9, (out[:, i - 1] + 1) % k,
                                 (out[:, i - 1] + 3) % k)
        return out

    root = RngStream(0)
    train = draw_chains(n_train, root.child("train"))
    test = draw_chains(128, root.child("test"))
    lm = TokenLM(k, dim, 1, 2, length, root.child("lm"))
    opt = Adam(list(lm.named_parameters()))
    inputs = np.concatenate([np.full((n_train, 1), lm.bos, np.int64),
                             train[:, :-1]], axis=1)
    for it in range(steps):
        pick = root.child(("b", it)).integers(0, n_train, batch)
        loss = batched_lm_loss(lm, inputs[pick], train[pick])
        loss.backward()
        opt.step(lr_at(it, steps, lr, 40))
        opt.zero_grad()
    per = np.stack([position_losses(flatten_raster(row.reshape(1, 4, 8), k), lm)
                    for row in test])
    est = float(per[:, 1:].mean())
    est_all = float(per.mean())
    print(f"MARKOV2 steps={steps} dim={dim} n={n_train} rate={rate:.4f} "
          f"est={est:.4f} rel={(est - rate) / rate:+.3%} est_all={est_all:.4f} "
          f"mins={(time.time() - t0) / 60:.1f}", flush=True)


def ddpm2(variants=((1, 1e-3), (4, 1e-3), (4, 5e-4))):
    for draws, lr in variants:
        t0 = time.time()
        rng = RngStream(9)
        dc = DiffusionConfig(num_steps=20)
        net = DenoiserNet(4, 16, 1, 2, 20, 4, rng.child("net"))
        z2 = rng.child("z2").normal((2, 1, 2, 2, 4))
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
        ma = np.convolve(np.asarray(losses), np.ones(50) / 50, mode="valid")
        diffs = np.diff(ma)
        bad = int((diffs >= 0).sum())
        first_bad = int(np.argmax(diffs >= 0)) if bad else -1
        print(f"DDPM2 draws={draws} lr={lr} ma_len={len(ma)} violations={bad} "
              f"first_bad={first_bad} worst={diffs.max():+.4f} "
              f"ends={ma[0]:.2f}->{ma[-1]:.2f} mins={(time.time() - t0) / 60:.1f}",
              flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("which", choices=["prog", "markov", "ddpm", "all"],
                    nargs="?", default="all")
    a = ap.parse_args()
    tmp = tempfile.mkdtemp(prefix="mini2-")
    if a.which in ("markov", "all"):
        markov2()
    if a.which in ("ddpm", "all"):
        ddpm2()
    if a.which in ("prog", "all"):
        prog2(tmp)
