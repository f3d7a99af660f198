"""Command-line frontend: train, encode, decode, rd-sweep, ablate.

Every command is deterministic given ``--seed``. Commands that write an
output directory hold a lock file in it while they run.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import codec
from .codec import CodecError, build_checkpoint, encode, fit_corpus, load_checkpoint, save_checkpoint
from .inr import SirenConfig, init_params
from .metalearn import InnerConfig, OuterConfig, fit_signal, mean_psnr, train
from .quantent import build_freq, calibrate, quantize
from .signalio import FormatError, Signal, coord_dim, load, save

log = logging.getLogger("modcodec")

MODALITY_FLAGS = {"image": "image", "audio": "audio", "sphere": "grid2d_sphere", "volume": "volume"}
SUFFIXES = {"image": ".pgm", "audio": ".wav", "grid2d_sphere": ".grd", "volume": ".grd"}
LOCK_NAME = ".modcodec.lock"
ABLATION_KINDS = ("shift", "scale", "scale_and_shift")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(t) for t in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    if not shape or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    return shape


def parse_bits(text: str) -> list[int]:
    """``5`` or ``3,4,8`` or ``3-8``."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = (int(p) for p in part.split("-"))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bit list {text!r}")
    if not out or any(not 1 <= b <= 16 for b in out):
        raise argparse.ArgumentTypeError("bit widths must lie in [1, 16]")
    return out


def load_dir(path, modality: str) -> list[Signal]:
    """All regular non-hidden files of a directory, sorted by name.

    Unreadable files are reported one per line on stderr and abort the command.
    """
    root = Path(path)
    if not root.is_dir():
        raise CliError(f"not a directory: {path}")
    signals, bad = [], []
    for f in sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith(".")):
        try:
            signals.append(load(f, modality))
        except (FormatError, OSError) as exc:
            bad.append((f, exc))
    for f, exc in bad:
        print(f"unreadable: {f}: {exc}", file=sys.stderr)
    if bad:
        raise CliError(f"{len(bad)} unreadable file(s) in {path}")
    if not signals:
        raise CliError(f"no data files in {path}")
    return signals


@contextmanager
def locked(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output directory {out} is in use (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def model_config(args, signals, kind=None) -> SirenConfig:
    s = signals[0]
    return SirenConfig(coord_dim(s.modality, len(s.feature_shape)), s.channels, args.depth, args.width,
                       args.latent_dim, args.omega0, kind or args.modulation)


def default_patch(signals) -> tuple[int, ...]:
    ranks = {len(s.feature_shape) for s in signals}
    if len(ranks) != 1:
        raise CliError("signals of mixed rank")
    return tuple(int(n) for n in np.min([s.feature_shape for s in signals], axis=0))


def inner_of(args, default_steps: int) -> InnerConfig:
    return InnerConfig(default_steps if args.inner_steps is None else args.inner_steps, args.inner_lr)


def outer_of(args) -> OuterConfig:
    return OuterConfig(lr=args.outer_lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       max_steps=args.max_steps)


def fmt(x) -> str:
    return "" if x is None else repr(float(x))


def report_line(*fields) -> str:
    return ",".join(f if isinstance(f, str) else fmt(f) for f in fields)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    modality = MODALITY_FLAGS[args.modality]
    data = load_dir(args.train_dir, modality)
    val = load_dir(args.val_dir, modality) if args.val_dir else []
    patch = tuple(args.patch_shape) if args.patch_shape else default_patch(data)
    inner = inner_of(args, 3)
    with locked(args.out) as out:
        cfg = model_config(args, data)
        res = train(data, cfg, inner, outer_of(args), patch, val, out / "metrics.csv")
        cp = build_checkpoint(res.theta, data, inner, args.bits, modality, patch)
        save_checkpoint(cp, out / "model.ckpt")
    print(f"{out / 'model.ckpt'},{cp.hash.hex()}")
    return 0


def _rate_fields(obj, modality):
    kbps = obj.stats.get("kbps") if modality == "audio" else None
    return [obj.stats["bpp"]] + ([kbps] if kbps is not None else [])


def cmd_encode(args) -> int:
    cp = load_checkpoint(args.checkpoint)
    signal = load(args.input, cp.modality)
    obj = encode(signal, cp, inner_of(args, 10))
    Path(args.out).write_bytes(obj.to_bytes())
    print(report_line(str(args.input), codec.psnr_for_csv(obj.stats["psnr"]), *_rate_fields(obj, cp.modality)))
    return 0


def cmd_decode(args) -> int:
    cp = load_checkpoint(args.checkpoint)
    obj = codec.CompressedObject.from_bytes(Path(args.input).read_bytes())
    rec = codec.decode(obj, cp)
    save(rec, args.out)
    quality = None
    if args.reference:
        ref = load(args.reference, cp.modality)
        if ref.feature_shape != rec.feature_shape or ref.channels != rec.channels:
            raise CliError("reference shape differs from the decoded signal")
        quality = codec.psnr_for_csv(codec.psnr(codec.mse(rec.features, ref.features)))
    obj.stats.update(codec.rate(obj))
    print(report_line(str(args.out), quality, *_rate_fields(obj, cp.modality)))
    return 0


SWEEP_COLUMNS = ["checkpoint", "bits", "psnr_full_db", "psnr_quant_db", "psnr_coded_db",
                 "bpp_full", "bpp_quant", "bpp_coded",
                 "bpp_full_all_channels", "bpp_quant_all_channels", "bpp_coded_all_channels", "kbps_coded"]


def rd_rows(cp: codec.ModelCheckpoint, signals, bits_list, inner: InnerConfig, train_latents=None,
            label: str = "") -> list[dict]:
    """Average rate and PSNR over ``signals`` per bit width.

    ``full`` sends 32-bit floats, ``quant`` packs b raw bits per latent,
    ``coded`` is the entropy-coded payload. Bit widths other than the
    checkpoint's need ``train_latents`` to recalibrate.
    """
    fits = [fit_signal(cp.theta, s, inner, codec.patch_shape_for(s, cp)) for s in signals]
    rows = []
    for b in bits_list:
        if b == cp.quantizer.bits:
            cpb = cp
        elif train_latents is None:
            raise CliError(f"bits={b} differs from the checkpoint's {cp.quantizer.bits}; pass --train-dir to recalibrate")
        else:
            qp = calibrate(train_latents, b)
            cpb = codec.ModelCheckpoint(cp.theta, qp, build_freq(quantize(train_latents, qp).ravel(), b),
                                        cp.modality, cp.patch_shape)
        acc = {k: [] for k in SWEEP_COLUMNS[2:]}
        for s, (patches, layout, latents) in zip(signals, fits):
            obj = codec.encode_latents(s, cpb, patches, layout, latents)
            n_lat = latents.size
            denom, denom_all = codec.pixel_count(s), s.num_points * s.channels
            acc["psnr_full_db"].append(codec.psnr_for_csv(obj.stats["psnr_full"]))
            acc["psnr_quant_db"].append(codec.psnr_for_csv(obj.stats["psnr"]))
            acc["psnr_coded_db"].append(codec.psnr_for_csv(obj.stats["psnr"]))
            for name, bits in (("full", 32 * n_lat), ("quant", b * n_lat), ("coded", obj.payload_bits)):
                acc[f"bpp_{name}"].append(bits / denom)
                acc[f"bpp_{name}_all_channels"].append(bits / denom_all)
            if s.modality == "audio":
                acc["kbps_coded"].append(obj.stats["kbps"])
        row = {"checkpoint": label, "bits": b}
        row.update({k: (float(np.mean(v)) if v else None) for k, v in acc.items()})
        rows.append(row)
    return rows


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else fmt(r[c]) for c in columns])


def cmd_rd_sweep(args) -> int:
    if not args.val_dir:
        raise CliError("rd-sweep needs --val-dir")
    inner = inner_of(args, 10)
    rows = []
    checkpoints = [(p, load_checkpoint(p)) for p in args.checkpoint]
    signals_by_modality = {}
    train_by_modality = {}
    for path, cp in checkpoints:
        if cp.modality not in signals_by_modality:
            signals_by_modality[cp.modality] = load_dir(args.val_dir, cp.modality)
            if args.train_dir:
                train_by_modality[cp.modality] = load_dir(args.train_dir, cp.modality)
        latents = None
        if cp.modality in train_by_modality:
            latents = fit_corpus(cp.theta, train_by_modality[cp.modality], inner_of(args, 3), cp.modality,
                                 cp.patch_shape)
        rows += rd_rows(cp, signals_by_modality[cp.modality], args.bits, inner, latents, label=Path(path).name)
    with locked(args.out) as out:
        write_rows(out / "rd_sweep.csv", SWEEP_COLUMNS, rows)
    print(out / "rd_sweep.csv")
    return 0


ABLATION_COLUMNS = ["modulation", "base_params", "latent_map_params", "val_psnr_db"]


def ablation_rows(thetas: dict, val, inner: InnerConfig, patch_shape) -> list[dict]:
    rows = []
    for kind, theta in thetas.items():
        latent_map = theta.latent_map.size
        rows.append({"modulation": kind, "base_params": theta.num_params() - latent_map,
                     "latent_map_params": latent_map,
                     "val_psnr_db": codec.psnr_for_csv(mean_psnr(theta, val, inner, patch_shape))})
    return rows


def cmd_ablate(args) -> int:
    modality = MODALITY_FLAGS[args.modality]
    data = load_dir(args.train_dir, modality)
    val = load_dir(args.val_dir, modality) if args.val_dir else data
    patch = tuple(args.patch_shape) if args.patch_shape else default_patch(data)
    inner = inner_of(args, 3)
    val_patch = None if modality == "grid2d_sphere" else patch
    with locked(args.out) as out:
        thetas = {}
        for kind in ABLATION_KINDS:
            res = train(data, model_config(args, data, kind), inner, outer_of(args), patch, (),
                        out / f"metrics_{kind}.csv")
            thetas[kind] = res.theta
        write_rows(out / "ablation.csv", ABLATION_COLUMNS, ablation_rows(thetas, val, InnerConfig(3, args.inner_lr),
                                                                          val_patch))
    print(out / "ablation.csv")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modcodec", description="Meta-learned neural-field compression.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--inner-lr", type=float, default=1e-2)
        sp.add_argument("--inner-steps", type=int, default=None,
                        help="inner gradient steps (default 3 for training, 10 for encoding)")
        sp.add_argument("--seed", type=int, default=0)

    def model(sp):
        sp.add_argument("--train-dir", required=True)
        sp.add_argument("--val-dir")
        sp.add_argument("--modality", choices=sorted(MODALITY_FLAGS), default="image")
        sp.add_argument("--depth", type=int, default=5)
        sp.add_argument("--width", type=int, default=64)
        sp.add_argument("--latent-dim", type=int, default=32)
        sp.add_argument("--omega0", type=float, default=50.0)
        sp.add_argument("--outer-lr", type=float, default=3e-6)
        sp.add_argument("--batch-size", type=int, default=8)
        sp.add_argument("--epochs", type=int, default=1)
        sp.add_argument("--max-steps", type=int, default=None, help="stop after this many outer updates")
        sp.add_argument("--patch-shape", type=parse_shape, default=None,
                        help="e.g. 16,16 (default: smallest signal shape in the training set)")
        sp.add_argument("--out", required=True, help="output directory")
        common(sp)

    t = sub.add_parser("train", help="meta-learn a base network and write a checkpoint")
    model(t)
    t.add_argument("--modulation", choices=("shift", "scale", "scale_and_shift"), default="shift")
    t.add_argument("--bits", type=int, default=5, choices=range(1, 17), metavar="{1..16}")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train shift / scale / scale_and_shift models and compare")
    model(a)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("encode", help="compress one file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True, help="compressed output file")
    common(e)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct one compressed file")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True, help="reconstructed file, in the source format")
    d.add_argument("--reference", help="original file, to report PSNR")
    d.set_defaults(func=cmd_decode)

    r = sub.add_parser("rd-sweep", help="rate/distortion table over bit widths")
    r.add_argument("--checkpoint", required=True, action="append", help="repeat for several checkpoints")
    r.add_argument("--val-dir", required=True)
    r.add_argument("--train-dir", help="training data used to recalibrate other bit widths")
    r.add_argument("--bits", type=parse_bits, default=parse_bits("3-8"))
    r.add_argument("--out", required=True, help="output directory")
    common(r)
    r.set_defaults(func=cmd_rd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "inner_steps", None) is not None and args.inner_steps < 0:
        print("error: --inner-steps must be >= 0", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, CodecError, FormatError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
