"""Offline probes for the miniature direction experiments: progressive
curriculum vs video-only, Markov-chain LM, and two-point DDPM descent."""
import argparse
import time

import numpy as np

from vistok.config import Config
from vistok.diffusion import DenoiserNet, DiffusionConfig, ddpm_train_loss
from vistok.lm import TokenLM, batched_lm_loss, position_losses, flatten_raster
from vistok.rng import RngStream
from vistok.train import Adam, lr_at
from vistok.train_loop import evaluate_vq_mse, run_vq_training


def progressive(tmp):
    base = dict(seed=0, patch_size=4, temporal_patch=2, hidden=32, heads=2,
                spatial_layers=1, temporal_layers=1, window=2, latent_dim=4,
                codebook_size=64, image_resolution=16, joint_resolutions=(16,),
                video_frames=5, batch_size=8, dataset_size=32, base_lr=1e-3,
                warmup_iters=40, max_grid=8, max_slots=4)
    t0 = time.time()
    prog = run_vq_training(Config(**base, stage1_iters=200, stage2_iters=300),
                           f"{tmp}/prog")
    vid = run_vq_training(Config(**base, stage1_iters=0, stage2_iters=500,
                                 modality_rule="video_only"), f"{tmp}/vid")
    from vistok.data import synth_dataset
    clips = synth_dataset("moving-shapes", 32, 16, 4, seed=101)
    m_prog = evaluate_vq_mse(prog.modules["tokenizer"], prog.modules["codebook"], clips)
    m_vid = evaluate_vq_mse(vid.modules["tokenizer"], vid.modules["codebook"], clips)
    print(f"PROG prog={m_prog:.6f} video_only={m_vid:.6f} "
          f"ok={m_prog <= m_vid} mins={(time.time() - t0) / 60:.1f}", flush=True)


def markov(steps=500, lr=3e-3):
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
        state = rng.integers(0, k, n)
        out[:, 0] = state
        for i in range(1, length):
            u = rng.child(("u", i)).uniform((n,), 0.0, 1.0)
            nxt = np.where(u < 0.9, (out[:, i - 1] + 1) % k, (out[:, i - 1] + 3) % k)
            out[:, i] = nxt
        return out

    root = RngStream(0)
    train = draw_chains(256, root.child("train"))
    test = draw_chains(128, root.child("test"))
    lm = TokenLM(k, 32, 1, 2, length, root.child("lm"))
    opt = Adam(list(lm.named_parameters()))
    bos = lm.bos
    inp = np.concatenate([np.full((256, 1), bos, np.int64), train[:, :-1]], axis=1)
    for it in range(steps):
        pick = root.child(("b", it)).integers(0, 256, 32)
        loss = batched_lm_loss(lm, inp[pick], train[pick])
        loss.backward()
        opt.step(lr_at(it, steps, lr, 40))
        opt.zero_grad()
    per = np.stack([position_losses(flatten_raster(row.reshape(1, 4, 8), k), lm)
                    for row in test])
    est = float(per[:, 1:].mean())
    print(f"MARKOV rate={rate:.4f} est={est:.4f} rel={(est - rate) / rate:+.3%} "
          f"mins={(time.time() - t0) / 60:.1f}", flush=True)


def ddpm_two_point(steps=500, lr=1e-3):
    t0 = time.time()
    rng = RngStream(0)
    dc = DiffusionConfig(num_steps=20)
    net = DenoiserNet(4, 16, 1, 2, 20, 4, rng.child("net"))
    z = rng.child("z").normal((2, 1, 2, 2, 4))
    opt = Adam(list(net.named_parameters()))
    losses = []
    for it in range(steps):
        loss = ddpm_train_loss(z[it % 2], net, dc, rng.child(("it", it)))
        loss.backward()
        opt.step(lr_at(it, steps, lr, 40))
        opt.zero_grad()
        losses.append(float(loss.data))
    blocks = np.asarray(losses).reshape(-1, 50).mean(axis=1)
    diffs = np.diff(blocks)
    print(f"DDPM blocks={np.array2string(blocks, precision=3)} "
          f"monotone={bool(np.all(diffs < 0))} mins={(time.time() - t0) / 60:.1f}",
          flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("which", choices=["prog", "markov", "ddpm", "all"],
                    nargs="?", default="all")
    ap.add_argument("--tmp", default="/tmp/mini")
    a = ap.parse_args()
    if a.which in ("markov", "all"):
        markov()
    if a.which in ("ddpm", "all"):
        ddpm_two_point()
    if a.which in ("prog", "all"):
        progressive(a.tmp)
