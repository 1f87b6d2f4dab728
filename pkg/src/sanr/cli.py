"""Command-line front end: encode, decode, and inspect streams.

Exit codes: 0 on success, 1 on input or stream errors, 2 on training
divergence.  All randomness funnels through --seed; with --strict an
explicit seed is mandatory.  The SANR_DEVICE environment variable selects
the compute device (absent means CPU).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from .bitstream import BitstreamError, deserialize_model, serialize_model, stream_info
from .lightfield import LightFieldError, load_lightfield, save_lightfield
from .model import ModelConfig, finalize_model
from .training import TrainConfig, TrainingDivergenceError, sga_finetune, train

PRESET_CHANNELS = {"r1": 48, "r2": 93, "r3": 123, "r4": 163}
PRESET_LAMBDA = {
    "epfl": {"r1": 0.01, "r2": 0.005, "r3": 0.001, "r4": 0.0005},
    "hci": {"r1": 0.005, "r2": 0.001, "r3": 0.0005, "r4": 0.0001},
}
DEFAULT_EPOCHS = 30
DEFAULT_SGA_EPOCHS = 6
FAST_EPOCHS = 6
FAST_SGA_EPOCHS = 1
DEFAULT_RANK = 6
DEFAULT_CL = 10


@dataclass(frozen=True)
class Preset:
    name: str
    c_s: int
    lam: float
    epochs: int
    sga_epochs: int


def resolve_preset(name: str | None, dataset: str) -> Preset:
    """Named configurations: r1..r4 set channels and lambda, fast the schedule."""
    if dataset not in PRESET_LAMBDA:
        raise ValueError(f"unknown dataset {dataset!r} (expected epfl or hci)")
    if name is None:
        return Preset("custom", PRESET_CHANNELS["r1"], PRESET_LAMBDA[dataset]["r1"],
                      DEFAULT_EPOCHS, DEFAULT_SGA_EPOCHS)
    if name == "fast":
        return Preset("fast", PRESET_CHANNELS["r1"], PRESET_LAMBDA[dataset]["r1"],
                      FAST_EPOCHS, FAST_SGA_EPOCHS)
    if name in PRESET_CHANNELS:
        return Preset(name, PRESET_CHANNELS[name], PRESET_LAMBDA[dataset][name],
                      DEFAULT_EPOCHS, DEFAULT_SGA_EPOCHS)
    raise ValueError(f"unknown preset {name!r} (expected r1..r4 or fast)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="overfit a light field and write a .sanr stream")
    enc.add_argument("--input", required=True, help="directory of per-view PNGs")
    enc.add_argument("--output", required=True, help="output .sanr path")
    enc.add_argument("--preset", default=None, choices=["r1", "r2", "r3", "r4", "fast"],
                     help="named configuration (default: r1 values)")
    enc.add_argument("--dataset", default="epfl", choices=["epfl", "hci"],
                     help="lambda table to use with presets (default: epfl)")
    enc.add_argument("--cs", type=int, default=None, help="spatial kernel channels (overrides preset)")
    enc.add_argument("--lambda", dest="lam", type=float, default=None,
                     help="rate-distortion tradeoff (overrides preset)")
    enc.add_argument("--rank", type=int, default=DEFAULT_RANK, help="shared kernel base rank (default: 6)")
    enc.add_argument("--cl", type=int, default=DEFAULT_CL, help="latent code channels (default: 10)")
    enc.add_argument("--epochs", type=int, default=None, help="max training epochs (overrides preset)")
    enc.add_argument("--sga-epochs", type=int, default=None, help="fine-tuning epochs (overrides preset)")
    enc.add_argument("--samples-per-sai", type=int, default=500,
                     help="view draws per SAI per epoch (default: 500)")
    enc.add_argument("--seed", type=int, default=None, help="RNG seed (default: 0)")
    enc.add_argument("--strict", action="store_true", help="fail unless a seed is given explicitly")

    dec = sub.add_parser("decode", help="reconstruct all views from a .sanr stream")
    dec.add_argument("--input", required=True, help=".sanr path")
    dec.add_argument("--output", required=True, help="output directory for PNGs")

    info = sub.add_parser("info", help="print header fields and per-section byte accounting")
    info.add_argument("--input", required=True, help=".sanr path")
    return parser


def cmd_encode(args) -> int:
    if args.strict and args.seed is None:
        print("error: --strict requires an explicit --seed", file=sys.stderr)
        return 1
    seed = args.seed if args.seed is not None else 0
    preset = resolve_preset(args.preset, args.dataset)
    c_s = args.cs if args.cs is not None else preset.c_s
    lam = args.lam if args.lam is not None else preset.lam
    epochs = args.epochs if args.epochs is not None else preset.epochs
    sga_epochs = args.sga_epochs if args.sga_epochs is not None else preset.sga_epochs

    lf = load_lightfield(args.input)
    mcfg = ModelConfig(c_s=c_s, rank=args.rank, c_l=args.cl, u_count=lf.u_count,
                       v_count=lf.v_count, height=lf.height, width=lf.width)
    tcfg = TrainConfig(lam=lam, max_epochs=epochs, sga_epochs=sga_epochs,
                       samples_per_sai=args.samples_per_sai, seed=seed,
                       fast_preset=(args.preset == "fast"))

    device = os.environ.get("SANR_DEVICE", "cpu")
    if device != "cpu":
        import torch

        torch.set_default_device(device)

    model, report = train(lf, mcfg, tcfg)
    if tcfg.sga_epochs > 0:
        model, sga_report = sga_finetune(model, lf, tcfg,
                                         start_lr=report.epochs[-1].lr if report.epochs else None)
        report.epochs.extend(sga_report.epochs)
        report.rate_steps.extend(s + report.total_steps for s in sga_report.rate_steps)
        report.total_steps += sga_report.total_steps
        report.wall_clock_s += sga_report.wall_clock_s
    fm = finalize_model(model)
    stream = serialize_model(fm)
    with open(args.output, "wb") as fh:
        fh.write(stream)

    from . import evaluation

    recon = fm.render_all()
    _, mean_psnr = evaluation.psnr(lf, recon)
    final_bpp = evaluation.bpp(len(stream), lf.u_count, lf.v_count, lf.height, lf.width)
    report.final_bpp = final_bpp
    report.final_psnr = mean_psnr

    out_dir = os.path.dirname(os.path.abspath(args.output))
    report.to_csv(os.path.join(out_dir, "report.csv"))
    report.to_json(os.path.join(out_dir, "report.json"))
    print(f"bpp={final_bpp:.6f} psnr={mean_psnr:.4f}")
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    fm = deserialize_model(data)
    lf = fm.render_all()
    save_lightfield(lf, args.output, dataset_name=os.path.basename(args.input))
    print(f"decoded {lf.u_count}x{lf.v_count} views of {lf.height}x{lf.width} to {args.output}")
    return 0


def cmd_info(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    info = stream_info(data)
    header = {
        "version": info.version, "U": info.u_count, "V": info.v_count,
        "H": info.height, "W": info.width, "C_S": info.c_s, "rank": info.rank,
        "C_l": info.c_l, "kernel": info.kernel_size, "sections": info.section_count,
    }
    print(json.dumps(header))
    print(f"{'kind':8s} {'name':24s} {'bytes':>10s} {'payload':>10s}")
    for s in info.sections:
        print(f"{s.kind:8s} {s.name:24s} {s.total_bytes:10d} {s.payload_bytes:10d}")
    accounted = info.header_bytes + sum(s.total_bytes for s in info.sections) + info.crc_bytes
    print(f"header {info.header_bytes} B, sections {sum(s.total_bytes for s in info.sections)} B, "
          f"crc {info.crc_bytes} B, total {accounted} B (file {info.file_bytes} B)")
    print(f"raw16 share: {info.raw16_share * 100.0:.3f}% bpp: {info.bpp:.6f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "encode":
            return cmd_encode(args)
        if args.command == "decode":
            return cmd_decode(args)
        if args.command == "info":
            return cmd_info(args)
        return 1
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BitstreamError, LightFieldError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
