#!/usr/bin/env python3
"""Compare the end-to-end RD pipeline against the two-stage PTQ baseline.

Arm A trains quantization-aware with the rate term and SGA fine-tuning and
writes a real stream; arm B trains the same backbone in plain float and
then applies 8-bit post-training quantization with entropy coding.  Both
run on the same fixture; compare the printed (bpp, PSNR) pairs.
"""

import argparse
import time

from sanr.ablation import run_ptq8_baseline, run_rd_pipeline
from sanr.lightfield import make_synthetic_lightfield
from sanr.model import ModelConfig
from sanr.training import TrainConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--base-cs", type=int, default=8, help="channels of the PTQ baseline arm")
    parser.add_argument("--full-cs", type=int, default=16, help="channels of the RD pipeline arm")
    parser.add_argument("--lambda", dest="lam", type=float, default=3e-5)
    parser.add_argument("--samples-per-sai", type=int, default=20)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    lf = make_synthetic_lightfield(64, 64, 3, 3, 1.0, seed=42)

    t0 = time.time()
    base_cfg = ModelConfig(c_s=args.base_cs, rank=3, c_l=4, u_count=3, v_count=3, height=64, width=64)
    arm_b = run_ptq8_baseline(lf, base_cfg, TrainConfig(samples_per_sai=args.samples_per_sai,
                                                        max_epochs=args.epochs, seed=args.seed))
    print(f"PTQ8 baseline : {arm_b.bpp:.4f} bpp  {arm_b.psnr:.2f} dB  ({time.time() - t0:.0f}s)")

    t0 = time.time()
    full_cfg = ModelConfig(c_s=args.full_cs, rank=3, c_l=4, u_count=3, v_count=3, height=64, width=64)
    arm_a = run_rd_pipeline(lf, full_cfg, TrainConfig(lam=args.lam, samples_per_sai=args.samples_per_sai,
                                                      max_epochs=args.epochs, seed=args.seed, sga_epochs=2))
    print(f"RD pipeline   : {arm_a.bpp:.4f} bpp  {arm_a.psnr:.2f} dB  ({time.time() - t0:.0f}s)")

    gap = (arm_a.bpp - arm_b.bpp) / arm_b.bpp * 100.0
    print(f"bpp gap {gap:+.1f}%  PSNR delta {arm_a.psnr - arm_b.psnr:+.2f} dB")


if __name__ == "__main__":
    main()
