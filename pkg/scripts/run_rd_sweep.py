#!/usr/bin/env python3
"""Sweep lambda on a synthetic fixture and emit an RD curve with reports.

Desk-scale by default; pass --full-size for a paper-resolution fixture
(expect a long CPU run).  Outputs rd.csv, the RD plot, the average error
map, and the per-view PSNR grid of the last rate point.
"""

import argparse
import time

from sanr import evaluation
from sanr.bitstream import serialize_model
from sanr.lightfield import make_synthetic_lightfield
from sanr.model import ModelConfig, finalize_model
from sanr.training import TrainConfig, sga_finetune, train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/rd_sweep", help="output directory")
    parser.add_argument("--lambdas", default="1e-2,1e-3,1e-4", help="comma-separated lambda values")
    parser.add_argument("--cs", type=int, default=8)
    parser.add_argument("--rank", type=int, default=3)
    parser.add_argument("--cl", type=int, default=4)
    parser.add_argument("--samples-per-sai", type=int, default=20)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--sga-epochs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--full-size", action="store_true", help="use a 432x624 fixture")
    args = parser.parse_args()

    h, w = (432, 624) if args.full_size else (64, 64)
    lf = make_synthetic_lightfield(h, w, 3, 3, 1.0, seed=42)
    mcfg = ModelConfig(c_s=args.cs, rank=args.rank, c_l=args.cl,
                       u_count=3, v_count=3, height=h, width=w)

    points = []
    last = None
    for lam in sorted(float(s) for s in args.lambdas.split(",")):
        tcfg = TrainConfig(lam=lam, samples_per_sai=args.samples_per_sai,
                           max_epochs=args.epochs, sga_epochs=args.sga_epochs, seed=args.seed)
        t0 = time.time()
        model, report = train(lf, mcfg, tcfg)
        if tcfg.sga_epochs > 0:
            model, _ = sga_finetune(model, lf, tcfg, start_lr=report.epochs[-1].lr)
        fm = finalize_model(model)
        stream = serialize_model(fm)
        recon = fm.render_all()
        _, mean_psnr = evaluation.psnr(lf, recon)
        rate = evaluation.bpp(len(stream), 3, 3, h, w)
        points.append((rate, mean_psnr))
        last = recon
        print(f"lambda {lam:g}: {rate:.4f} bpp, {mean_psnr:.2f} dB ({time.time() - t0:.0f}s)")

    points.sort()
    curve = evaluation.RDCurve("fixture", tuple(evaluation.RDPoint(r, p) for r, p in points))
    written = evaluation.emit_reports(
        [curve], args.out,
        error_maps={"last_point": evaluation.avg_error_map(lf, last)},
        psnr_maps={"last_point": evaluation.per_view_psnr_map(lf, last)},
    )
    print("wrote:")
    for path in written:
        print(" ", path)


if __name__ == "__main__":
    main()
