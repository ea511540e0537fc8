"""Offline experiment: VQ usage dynamics, normalized vs raw codes."""
import argparse
import time

import numpy as np

from vistok.data import synth_dataset
from vistok.model import NetConfig, PatchConfig, Tokenizer
from vistok.quantize import Codebook, codebook_stats, quantize
from vistok.rng import RngStream
from vistok.train import Adam, lr_at, train_step_vq
from vistok import tensor as T


def run(normalize, steps, lr, warmup, batch, tag, log=200):
    clips = synth_dataset("moving-shapes", 64, 32, 8, seed=101)
    root = RngStream(0)
    tok = Tokenizer(PatchConfig(), NetConfig(), root.child("model"))
    cb = Codebook(512, 8, 128, root.child("cb"), normalize=normalize)
    opt = Adam(list(tok.named_parameters()) + list(cb.named_parameters()))
    batches = root.child("batches")
    first = None
    snapshots = [cb.usage.copy()]
    t0 = time.time()
    for it in range(steps):
        idx = batches.child(("batch", it)).integers(0, len(clips), batch)
        x = np.stack([clips[i] for i in idx])
        m = train_step_vq(x, tok, cb, opt, lr_at(it, steps, lr, warmup))
        snapshots.append(cb.usage.copy())
        if first is None:
            first = m.recon
        if it % log == 0:
            s = codebook_stats(cb)
            print(f"norm={normalize} it {it:4d} mse {m.recon:.5f} vq {m.head:.2f} "
                  f"usage {s['usage']:.3f} perp {s['perplexity']:.1f}", flush=True)
    np.save(f"/tmp/usage_hist_{tag}_{normalize}.npy", np.stack(snapshots).astype(np.uint32))
    final = codebook_stats(cb)
    cb.reset_usage()
    with T.no_grad():
        for i in range(0, 64, 8):
            quantize(tok.encode(np.stack(clips[i : i + 8])), cb)
    fresh = codebook_stats(cb)
    print(f"DONE norm={normalize} steps={steps} lr={lr} warmup={warmup} batch={batch} "
          f"mse_ratio={m.recon / first:.4f} "
          f"run_usage={final['usage']:.4f} run_perp={final['perplexity']:.1f} "
          f"eval_usage={fresh['usage']:.4f} eval_perp={fresh['perplexity']:.1f} "
          f"mins={(time.time() - t0) / 60:.1f}", flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("which", choices=["norm", "raw", "both"], nargs="?", default="both")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--warmup", type=int, default=40)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--tag", default="x")
    a = ap.parse_args()
    if a.which in ("norm", "both"):
        run(True, a.steps, a.lr, a.warmup, a.batch, a.tag)
    if a.which in ("raw", "both"):
        run(False, a.steps, a.lr, a.warmup, a.batch, a.tag)
