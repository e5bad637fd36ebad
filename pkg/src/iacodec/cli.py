"""Command-line interface.

Subcommands cover the whole workflow: global training, per-instance
finetuning, bitstream encode/decode/eval, the ablation grids, instance
selection, and update histograms.  Encode and eval print one identical
report line computed through the same accounting path, so their outputs
can be compared verbatim.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bitstream as bs
from . import dataio
from . import training as tr
from .model import CodecModel, load_checkpoint, save_checkpoint
from .prior import PmfTable, SpikeSlabPrior
from .synthetic import texture_library


def _report_line(latent_bits: float, update_bits: float, pixels: int,
                 psnr: float) -> str:
    return (f"R={latent_bits / pixels:.12g} bpp | "
            f"M={update_bits / pixels:.12g} bpp | "
            f"PSNR={psnr:.12g} dB")


def _coded_line(latent_coded: int, update_coded: int, container: int) -> str:
    return (f"coded: latents {latent_coded} bits, update {update_coded} bits, "
            f"container {container} bytes")


def _load_instance_args(args):
    return dataio.load_instance(args.instance, args.fps_in, args.fps_out)


def _apply_phi(model: CodecModel, phi: dict) -> CodecModel:
    out = model.clone()
    for name, arr in phi.items():
        info = out.param(name)
        if info.side != "phi":
            raise ValueError(f"{name} is not a transmitter parameter")
        info.tensor.data = np.asarray(arr, dtype=np.float64).copy()
    return out


def _add_fps_args(p):
    p.add_argument("--fps-in", type=float, default=None,
                   help="source frame rate of the instance folder")
    p.add_argument("--fps-out", type=float, default=None,
                   help="target frame rate after subsampling")


def _add_prior_args(p):
    p.add_argument("--t", type=float, default=0.005,
                   help="quantizer bin width")
    p.add_argument("--sigma", type=float, default=0.05,
                   help="slab standard deviation")
    p.add_argument("--alpha", type=float, default=1000.0,
                   help="spike weight relative to the slab")


def cmd_train(args) -> int:
    if args.data:
        images, _ = dataio.load_instance(args.data)
    else:
        images = texture_library(args.seed, args.synthetic)
    cfg = tr.GlobalTrainConfig(beta=args.beta, steps=args.steps, lr=args.lr,
                               crop=args.crop, seed=args.seed)
    model, curves = tr.train_global(images, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, ckpt, extra={"beta": args.beta,
                                        "steps": args.steps,
                                        "seed": args.seed})
    dataio.write_csv(os.path.join(args.out, "train_curve.csv"), curves)
    last = curves[-1]
    print(f"trained {args.steps} steps; final loss {last['loss']:.6g} "
          f"bits/px; model at {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    model, _ = load_checkpoint(args.model)
    frames, _ = _load_instance_args(args)
    cfg = tr.FinetuneConfig(
        regime=args.regime, beta=args.beta, steps=args.steps, lr=args.lr,
        eval_interval=args.eval_interval, seed=args.seed,
        quantization_aware=not args.no_quant_aware,
        model_rate_loss=not args.no_model_rate_loss,
        t=args.t, sigma=args.sigma, alpha=args.alpha)
    result = tr.finetune(model, frames, cfg)
    os.makedirs(args.out, exist_ok=True)
    upd = os.path.join(args.out, "update.ckpt")
    tr.save_update(upd, model, result)
    dataio.write_csv(os.path.join(args.out, "curves.csv"), result.curves)
    m = result.best_metrics
    print(f"best step {result.best_step}: objective {m.total_bpp:.6g} "
          f"bits/px (R {m.latent_bpp:.6g} bpp, M {m.update_bpp:.6g} bpp, "
          f"PSNR {m.psnr:.4f} dB); update at {upd}")
    return 0


def cmd_encode(args) -> int:
    model, _ = load_checkpoint(args.model)
    frames, _ = _load_instance_args(args)
    delta_bar = None
    if args.update:
        upd = tr.load_update(args.update)
        if upd.meta["model_hash"] != model.receiver_hash().hex():
            raise ValueError("update checkpoint was made for a different model")
        if upd.meta["regime"] == "direct_latent":
            raise ValueError("direct-latent runs have no encodable update")
        prior = SpikeSlabPrior(upd.meta["t"], upd.meta["sigma"],
                               upd.meta["alpha"])
        beta = upd.meta["beta"]
        model = _apply_phi(model, upd.phi)
        delta_bar = upd.delta_bar
    else:
        prior = SpikeSlabPrior(args.t, args.sigma, args.alpha)
        beta = args.beta
    result = bs.encode_instance(frames, model, prior, beta, delta_bar)
    bs.write_bitstream(args.out, result.payload)
    print(_report_line(result.latent_bits_computed,
                       result.update_bits_computed, result.pixels,
                       result.psnr))
    print(_coded_line(result.latent_bits_coded, result.update_bits_coded,
                      len(result.payload)))
    return 0


def cmd_decode(args) -> int:
    model, _ = load_checkpoint(args.model)
    with open(args.bitstream, "rb") as f:
        blob = f.read()
    result = bs.decode_instance(blob, model)
    paths = dataio.save_frames(args.out, result.frames)
    print(f"decoded {len(paths)} frames "
          f"({result.header.width}x{result.header.height}) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.model)
    with open(args.bitstream, "rb") as f:
        blob = f.read()
    result = bs.decode_instance(blob, model)
    args.instance = args.ref
    refs, _ = _load_instance_args(args)
    if len(refs) != len(result.frames):
        raise ValueError(f"reference has {len(refs)} frames, "
                         f"bitstream {len(result.frames)}")
    sq = 0.0
    count = 0
    for ref, dec in zip(refs, result.frames):
        if ref.shape != dec.shape:
            raise ValueError("reference frame shape differs from the stream")
        sq += float(((ref - dec) ** 2).sum())
        count += ref.size
    mse = sq / count
    psnr = tr.psnr_from_mse(mse)
    print(_report_line(result.latent_bits_computed,
                       result.update_bits_computed, result.pixels, psnr))
    print(_coded_line(result.latent_bits_coded, result.update_bits_coded,
                      len(blob)))
    return 0


def cmd_ablate(args) -> int:
    model, _ = load_checkpoint(args.model)
    frames, _ = _load_instance_args(args)
    cfg = tr.FinetuneConfig(beta=args.beta, steps=args.steps, lr=args.lr,
                            eval_interval=args.eval_interval, seed=args.seed,
                            t=args.t, sigma=args.sigma, alpha=args.alpha)
    cases = [c.strip().upper() for c in args.cases.split(",") if c.strip()]
    rows, _ = tr.ablate(model, frames, cfg, cases)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_csv(os.path.join(args.out, "ablation.csv"), rows)
    for row in rows:
        print(f"case {row['case']}: objective {row['total_bpp']:.6g} bits/px "
              f"(R {row['latent_bpp']:.6g} bpp, M {row['update_bpp']:.6g} bpp, "
              f"PSNR {row['psnr']:.4f} dB, "
              f"nnz {row['update_nnz_final']})")
    return 0


def cmd_temporal_ablate(args) -> int:
    model, _ = load_checkpoint(args.model)
    frames, _ = _load_instance_args(args)
    betas = [float(b) for b in args.betas.split(",") if b.strip()]
    counts = ([int(f) for f in args.frames.split(",") if f.strip()]
              if args.frames else None)
    cfg = tr.FinetuneConfig(steps=args.steps, lr=args.lr, seed=args.seed,
                            eval_interval=args.eval_interval,
                            t=args.t, sigma=args.sigma, alpha=args.alpha)
    rows = tr.temporal_ablate(model, frames, betas, cfg, counts)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_csv(os.path.join(args.out, "temporal.csv"), rows)
    for row in rows:
        print(f"beta {row['beta']:g} frames {row['frame_count']}: "
              f"M {row['update_bpp']:.6g} bpp ({row['update_kb']:.3g} kB), "
              f"objective {row['total_bpp']:.6g} bits/px")
    return 0


def cmd_select(args) -> int:
    models = []
    for path in args.models:
        model, extra = load_checkpoint(path)
        if "beta" not in extra:
            raise ValueError(f"{path} does not record its training beta")
        models.append((float(extra["beta"]), model))
    names = sorted(e for e in os.listdir(args.instances)
                   if os.path.isdir(os.path.join(args.instances, e)))
    if not names:
        raise ValueError(f"no instance folders in {args.instances}")
    loss_table: dict = {}
    for name in names:
        frames, _ = dataio.load_instance(os.path.join(args.instances, name))
        loss_table[name] = {}
        for beta, model in models:
            metrics = tr.evaluate_set(model, frames, beta)
            loss_table[name][beta] = metrics.total_bpp
    chosen = tr.select_representative(loss_table, args.n)
    for name in chosen:
        print(name)
    if args.out:
        rows = [{"instance": nm, **{f"beta_{b:g}": loss_table[nm][b]
                                    for b, _ in models},
                 "selected": nm in chosen} for nm in names]
        dataio.write_csv(args.out, rows)
    return 0


def cmd_report_histograms(args) -> int:
    upd = tr.load_update(args.update)
    prior = SpikeSlabPrior(upd.meta["t"], upd.meta["sigma"],
                           upd.meta["alpha"])
    table = PmfTable(prior)
    groups = upd.meta["groups"]
    by_group: dict = {}
    for name, bar in upd.delta_bar.items():
        g = groups.get(name, "other")
        by_group.setdefault(g, []).append(np.asarray(bar).ravel())
    if not by_group:
        raise ValueError("update checkpoint carries no receiver update")
    rows = []
    pixels = max(1, int(upd.meta.get("pixels", 0)))
    print(f"{'group':<16} {'params':>8} {'nnz':>8} {'bits':>12} "
          f"{'b/param':>10} {'b/px':>12}")
    for g in sorted(by_group):
        flat = np.concatenate(by_group[g])
        idx = table.grid.index_for_value(flat)
        counts = np.bincount(idx, minlength=table.n_bins)
        bits = float(table.bits[idx].sum())
        for b, center in enumerate(table.centers):
            if counts[b]:
                rows.append({"group": g, "center": f"{center:.10g}",
                             "count": int(counts[b]),
                             "bits": f"{counts[b] * table.bits[b]:.6g}"})
        print(f"{g:<16} {flat.size:>8} {int(np.count_nonzero(flat)):>8} "
              f"{bits:>12.2f} {bits / flat.size:>10.6f} "
              f"{bits / pixels:>12.8f}")
    if args.out:
        dataio.write_csv(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iacodec",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a global model")
    p.add_argument("--data", help="folder of training images")
    p.add_argument("--synthetic", type=int, default=200,
                   help="synthetic image count when --data is not given")
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="adapt to one instance set")
    p.add_argument("--instance", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--regime", choices=tr.REGIMES, default="full_model")
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-interval", type=int, default=250)
    p.add_argument("--no-quant-aware", action="store_true",
                   help="train the update without quantization")
    p.add_argument("--no-model-rate-loss", action="store_true",
                   help="drop the update-rate term from the loss")
    _add_prior_args(p)
    _add_fps_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("encode", help="write a bitstream")
    p.add_argument("--instance", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--update", help="update checkpoint from finetune")
    p.add_argument("--beta", type=float, default=1e-3,
                   help="recorded beta when encoding without an update")
    _add_prior_args(p)
    _add_fps_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct frames from a bitstream")
    p.add_argument("bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="decode and report against references")
    p.add_argument("bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--ref", required=True,
                   help="folder with the original frames")
    _add_fps_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation cases I-VI")
    p.add_argument("--instance", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--cases", default="I,II,III,IV,V,VI")
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-interval", type=int, default=250)
    _add_prior_args(p)
    _add_fps_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("temporal-ablate",
                       help="finetune on growing frame subsets")
    p.add_argument("--instance", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--betas", default="3e-3,1e-4")
    p.add_argument("--frames", default=None,
                   help="comma-separated subset sizes (default grid)")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-interval", type=int, default=250)
    _add_prior_args(p)
    _add_fps_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_temporal_ablate)

    p = sub.add_parser("select", help="pick representative instances")
    p.add_argument("--instances", required=True,
                   help="folder whose subfolders are instance sets")
    p.add_argument("--models", nargs="+", required=True,
                   help="global checkpoints, one per beta")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--out", help="optional csv with the full table")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("report-histograms",
                       help="update histograms and bit shares per group")
    p.add_argument("--update", required=True)
    p.add_argument("--out", help="optional csv destination")
    p.set_defaults(func=cmd_report_histograms)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
