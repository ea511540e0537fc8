"""Command-line surface: training runs, codec plumbing, generation, eval.

Exit codes: 0 success, 1 usage or data-shape or file-format problem,
2 configuration problem, 3 numeric fault during a run.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from vistok import _kernels
from vistok import tensor as T
from vistok.config import Config, dump_config, load_config
from vistok.data import N_CLASSES, synth_dataset
from vistok.errors import ConfigError, FormatError, NumericFault, ShapeError, VistokError
from vistok.metrics import mse, psnr_from_mse
from vistok.rng import RngStream
from vistok.serialize import load_tensor, load_tokens, save_tensor, save_tokens
from vistok.tensor import Tensor


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting with 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    p = _Parser(prog="vistok", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp):
        sp.add_argument("--config", help="key=value config file (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key (repeatable)")

    sp = sub.add_parser("train", help="run the two-stage quantizer curriculum")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("finetune-kl", help="gaussian fine-tune from a quantizer checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="quantizer checkpoint")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("encode", help="pixels container -> token stream")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="quantizer checkpoint")
    sp.add_argument("--input", required=True, help="pixels container (.otsr)")
    sp.add_argument("--out", required=True, help="token stream to write (.ottk)")
    sp.add_argument("--cond", type=int, default=None, help="class id to store alongside")

    sp = sub.add_parser("decode", help="token stream -> pixels container")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="quantizer checkpoint")
    sp.add_argument("--tokens", required=True, help="token stream (.ottk)")
    sp.add_argument("--out", required=True, help="pixels container to write (.otsr)")

    sp = sub.add_parser("generate", help="class-conditional sampling from the token model")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="quantizer checkpoint")
    sp.add_argument("--lm", required=True,
                    help="token-model checkpoint; trained and written here if missing")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--cond", type=int, default=None, help="class id to condition on")

    sp = sub.add_parser("predict-frames", help="continue a clip by sampled future slots")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="quantizer checkpoint")
    sp.add_argument("--lm", required=True, help="token-model checkpoint")
    sp.add_argument("--input", required=True, help="prefix clip container (.otsr)")
    sp.add_argument("--future-slots", type=int, required=True)
    sp.add_argument("--out", required=True, help="pixels container to write (.otsr)")
    sp.add_argument("--slide", action="store_true",
                    help="roll the context window instead of erroring on overflow")

    sp = sub.add_parser("diffuse", help="train or sample the latent denoiser")
    common(sp)
    sp.add_argument("--action", choices=("train", "sample"), required=True)
    sp.add_argument("--kl-checkpoint", required=True, help="gaussian-head checkpoint")
    sp.add_argument("--denoiser", help="denoiser checkpoint (sample only)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--cond", type=int, default=None)

    sp = sub.add_parser("eval", help="reconstruction metrics over the configured dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="quantizer or gaussian checkpoint")

    sp = sub.add_parser("selftest", help="fast invariant battery; exits 0 when green")
    return p


def _load_cfg(args) -> Config:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return load_config(getattr(args, "config", None), overrides)


def _cmd_train(args) -> int:
    from vistok.train_loop import run_vq_training

    cfg = _load_cfg(args)
    result = run_vq_training(cfg, args.out)
    last = result.rows[-1]
    print(f"trained {len(result.rows)} iterations; "
          f"final recon {last['recon']:.6g}, usage {last['usage']:.3f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _cmd_finetune(args) -> int:
    from vistok.train_loop import run_kl_finetune

    cfg = _load_cfg(args)
    result = run_kl_finetune(cfg, args.checkpoint, args.out)
    last = result.rows[-1]
    print(f"fine-tuned {len(result.rows)} iterations; final recon {last['recon']:.6g}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _cmd_encode(args) -> int:
    from vistok.lm import encode_to_grid
    from vistok.train_loop import load_vq_tokenizer

    cfg = _load_cfg(args)
    tok, cb, _ = load_vq_tokenizer(cfg, args.checkpoint)
    pixels = load_tensor(args.input)
    grid = encode_to_grid(tok, cb, pixels)
    save_tokens(args.out, grid, cfg.codebook_size, args.cond)
    in_bytes = pixels.size * 4
    tokens = grid.size
    bits = max(1, math.ceil(math.log2(cfg.codebook_size)))
    print(f"input {in_bytes} bytes -> {tokens} tokens at {bits} bits/token "
          f"({tokens * bits} bits, {in_bytes * 8 / (tokens * bits):.1f}x)")
    return 0


def _cmd_decode(args) -> int:
    from vistok.quantize import lookup
    from vistok.train_loop import load_vq_tokenizer

    cfg = _load_cfg(args)
    tok, cb, _ = load_vq_tokenizer(cfg, args.checkpoint)
    grid, k, cond = load_tokens(args.tokens)
    if k != cfg.codebook_size:
        raise FormatError(f"{args.tokens}: stream codebook size {k} "
                          f"does not match configured {cfg.codebook_size}")
    with T.no_grad():
        pixels = tok.decode(lookup(cb, grid[None, ...]))
    save_tensor(args.out, pixels.data[0])
    print(f"decoded {grid.size} tokens -> {tuple(pixels.shape[1:])} pixels; "
          f"cond {'none' if cond is None else cond}")
    return 0


def _cmd_generate(args) -> int:
    from vistok.lm import ar_sample
    from vistok.quantize import lookup
    from vistok.train_loop import load_lm, load_vq_tokenizer, run_lm_training

    cfg = _load_cfg(args)
    tok, cb, _ = load_vq_tokenizer(cfg, args.checkpoint)
    if os.path.exists(args.lm):
        lm, meta = load_lm(cfg, args.lm)
        grid = tuple(int(v) for v in meta["grid"])
    else:
        # train in a subdirectory so the checkpoint move cannot clobber
        # unrelated files living next to the target path
        train_dir = os.path.join(os.path.dirname(os.path.abspath(args.lm)), "lm_train")
        result = run_lm_training(cfg, tok, cb, train_dir)
        if os.path.abspath(result.checkpoint_path) != os.path.abspath(args.lm):
            os.replace(result.checkpoint_path, args.lm)
        lm = result.modules["lm"]
        grid = result.modules["grid"]
        print(f"trained token model ({len(result.rows)} iterations) -> {args.lm}")
    os.makedirs(args.out, exist_ok=True)
    rng = RngStream(cfg.seed).child("generate")
    top_k = cfg.top_k if cfg.top_k else None
    sample = ar_sample(lm, grid, rng, cond=args.cond,
                       temperature=cfg.temperature, top_k=top_k)
    tokens_path = os.path.join(args.out, "sample.ottk")
    save_tokens(tokens_path, sample, cfg.codebook_size, args.cond)
    with T.no_grad():
        pixels = tok.decode(lookup(cb, sample[None, ...]))
    pixels_path = os.path.join(args.out, "sample.otsr")
    save_tensor(pixels_path, pixels.data[0])
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    print(f"sampled grid {grid} -> {tokens_path}, {pixels_path}")
    return 0


def _cmd_predict_frames(args) -> int:
    from vistok.lm import frame_predict
    from vistok.train_loop import load_lm, load_vq_tokenizer

    cfg = _load_cfg(args)
    tok, cb, _ = load_vq_tokenizer(cfg, args.checkpoint)
    lm, _ = load_lm(cfg, args.lm)
    prefix = load_tensor(args.input)
    rng = RngStream(cfg.seed).child("predict")
    top_k = cfg.top_k if cfg.top_k else None
    pixels = frame_predict(prefix, args.future_slots, tok, cb, lm, rng,
                           temperature=cfg.temperature, top_k=top_k,
                           slide=args.slide)
    save_tensor(args.out, pixels)
    print(f"predicted {args.future_slots} slots -> {pixels.shape} pixels at {args.out}")
    return 0


def _cmd_diffuse(args) -> int:
    from vistok.diffusion import ddpm_sample
    from vistok.train_loop import load_denoiser, load_kl_tokenizer, run_ddpm_training

    cfg = _load_cfg(args)
    tok, head, _ = load_kl_tokenizer(cfg, args.kl_checkpoint)
    if args.action == "train":
        result = run_ddpm_training(cfg, tok, head, args.out)
        last = result.rows[-1]
        print(f"trained denoiser ({len(result.rows)} iterations, final loss "
              f"{last['recon']:.6g}) -> {result.checkpoint_path}")
        return 0
    if not args.denoiser:
        raise _UsageError("diffuse --action sample requires --denoiser")
    model, dc, grid, _ = load_denoiser(cfg, args.denoiser)
    rng = RngStream(cfg.seed).child("diffuse")
    z = ddpm_sample(model, grid, dc, rng, cond=args.cond)
    with T.no_grad():
        pixels = tok.decode(Tensor(z[None, ...]))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "diffusion_sample.otsr")
    save_tensor(out_path, pixels.data[0])
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    print(f"sampled latents {z.shape} -> {out_path}")
    return 0


def _cmd_eval(args) -> int:
    from vistok.serialize import load_checkpoint
    from vistok.train_loop import load_kl_tokenizer, load_vq_tokenizer
    from vistok.quantize import lookup, quantize

    cfg = _load_cfg(args)
    meta, _ = load_checkpoint(args.checkpoint)
    phase = meta.get("phase")
    if phase == "vq":
        tok, cb, _ = load_vq_tokenizer(cfg, args.checkpoint)
    elif phase == "kl":
        tok, head, _ = load_kl_tokenizer(cfg, args.checkpoint)
    else:
        raise FormatError(f"{args.checkpoint}: phase {phase!r} is not evaluable")
    clips = synth_dataset(cfg.data_kind, cfg.dataset_size, min(cfg.joint_resolutions),
                          cfg.video_frames - 1, cfg.data_seed)
    errors = []
    with T.no_grad():
        for i, clip in enumerate(clips):
            batch = clip[None, ...]
            if phase == "vq":
                z, _, _ = quantize(tok.encode(batch), cb)
                x_hat = tok.decode(z)
            else:
                z, _, _, _ = head(tok.encode(batch), sample=False)
                x_hat = tok.decode(head.up(z))
            m = mse(batch, x_hat.data)
            errors.append(m)
            print(f"sample {i:3d} mse {m:.6g} psnr {psnr_from_mse(m):.2f}")
    mean = float(np.mean(errors))
    print(f"mean mse {mean:.6g} psnr {psnr_from_mse(mean):.2f} over {len(errors)} samples")
    return 0


def _selftest() -> int:
    """Quick invariant battery; a fraction of the full pytest suite."""
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"ok {name}")
        except Exception as exc:
            failures.append((name, exc))
            print(f"FAIL {name}: {exc}")

    def kernels_parity():
        rng = RngStream(11)
        q = rng.normal((200, 16)).astype(np.float64)
        c = rng.normal((128, 16)).astype(np.float64)
        a = _kernels.nearest_code(q, c)
        b = _kernels.reference.nearest_code(q, c)
        assert np.array_equal(a, b), "nearest_code backends disagree"

    def gradcheck_chain():
        rng = RngStream(12)
        x0 = rng.normal((4, 6))
        w = Tensor(rng.child("w").normal((6, 6)))
        r = Tensor(rng.child("r").normal((4, 6)))

        def f(x):
            h = T.softmax(T.matmul(x, w), axis=-1)
            return T.reduce_sum(T.mul(T.layer_norm(h), r))
        err = T.check_gradient(f, Tensor(x0.copy(), requires_grad=True))
        assert err <= 1e-3, f"gradient error {err}"

    def causality():
        from vistok.model import NetConfig, PatchConfig, Tokenizer
        rng = RngStream(13)
        tok = Tokenizer(PatchConfig(4, 2, 32), NetConfig(1, 1, 2, 2, 4, 2, 8, 4), rng)
        a = rng.normal((1, 5, 16, 16, 3))
        b = a.copy()
        b[:, 3:] += 1.0
        ea = tok.encode(a).emb.data
        eb = tok.encode(b).emb.data
        assert np.array_equal(ea[:, :2], eb[:, :2]), "future frames leaked backward"

    def quantizer_scale():
        from vistok.model import TokenField
        from vistok.quantize import Codebook, quantize
        rng = RngStream(14)
        cb = Codebook(32, 4, 16, rng.child("cb"), normalize=True)
        x = rng.normal((1, 1, 2, 2, 16))
        _, idx1, _ = quantize(TokenField(Tensor(x)), cb)
        _, idx2, _ = quantize(TokenField(Tensor(x * 3.0)), cb)
        assert np.array_equal(idx1, idx2), "positive rescaling flipped code choice"

    def formats_roundtrip():
        import tempfile
        from vistok.serialize import (load_checkpoint, save_checkpoint)
        rng = RngStream(15)
        with tempfile.TemporaryDirectory() as tmp:
            arr = rng.normal((3, 5, 2))
            p = os.path.join(tmp, "a.otsr")
            save_tensor(p, arr)
            assert np.array_equal(load_tensor(p), arr)
            grid = rng.integers(0, 512, (2, 3, 3)).astype(np.int64)
            p = os.path.join(tmp, "a.ottk")
            save_tokens(p, grid, 512, 2)
            g2, k, cond = load_tokens(p)
            assert np.array_equal(g2, grid) and k == 512 and cond == 2
            p = os.path.join(tmp, "a.otck")
            save_checkpoint(p, {"phase": "vq"}, {"w": arr})
            meta, arrays = load_checkpoint(p)
            assert meta["phase"] == "vq" and np.array_equal(arrays["w"], arr)

    def lm_uniform():
        from vistok.lm import TokenLM, flatten_raster, lm_loss
        lm = TokenLM(8, 16, 1, 2, 8, RngStream(16))
        seq = flatten_raster(np.zeros((1, 2, 2), np.int64), 8)
        loss = float(lm_loss(seq, lm).data)
        assert abs(loss - math.log(8)) < 1e-4, f"fresh model loss {loss}"

    def ddpm_invert():
        from vistok.diffusion import DiffusionConfig, ddpm_noise, ddpm_reverse_step
        dc = DiffusionConfig(1, 0.05, 0.05)
        rng = RngStream(17)
        z0 = rng.normal((2, 2, 4))
        eps = rng.normal(z0.shape)
        back = ddpm_reverse_step(ddpm_noise(z0, 1, eps, dc), 1, eps, dc)
        assert np.abs(back - z0).max() < 1e-5, "single-step inversion failed"

    def config_roundtrip():
        from vistok.config import parse_config_text
        cfg = Config().validate()
        parsed = parse_config_text(dump_config(cfg))
        assert Config(**parsed) == cfg, "config dump did not reparse to itself"

    check("kernel-backend-parity", kernels_parity)
    check("gradient-check", gradcheck_chain)
    check("temporal-causality", causality)
    check("quantizer-scale-invariance", quantizer_scale)
    check("format-roundtrips", formats_roundtrip)
    check("fresh-model-uniform-loss", lm_uniform)
    check("single-step-inversion", ddpm_invert)
    check("config-roundtrip", config_roundtrip)
    print(f"{8 - len(failures)}/8 checks passed (backend: {_kernels.BACKEND})")
    return 1 if failures else 0


_COMMANDS = {
    "train": _cmd_train,
    "finetune-kl": _cmd_finetune,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "generate": _cmd_generate,
    "predict-frames": _cmd_predict_frames,
    "diffuse": _cmd_diffuse,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.command == "selftest":
            return _selftest()
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, FormatError, VistokError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
