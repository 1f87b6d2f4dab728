"""End-to-end rate-distortion training of one scene representation.

The regular phase runs quantization-aware training: every iteration draws
a small batch of views, reconstructs them through straight-through-rounded
weights and noise-relaxed latents, and minimizes distortion; every
`rd_update_period`-th step additionally carries the lambda-weighted bit
cost of weights and latents.  A plateau schedule halves the learning rate
and terminates after the configured number of halvings.  The optional
fine-tuning phase swaps the latent noise proxy for annealed stochastic
rounding while weight quantization training continues unchanged.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import evaluation
from .entropy import fit_laplace, laplace_rate, latent_rate
from .lightfield import AngularCoord, LightField
from .model import ModelConfig, SanrModel, finalize_model
from .quantization import SgaState, add_uniform_noise, round_half_away, sga_sample, ste_round_int


class TrainingDivergenceError(Exception):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    """Optimization schedule for one rate point."""

    lam: float = 0.0
    lr_init: float = 0.01
    max_epochs: int = 30
    sga_epochs: int = 6
    samples_per_sai: int = 500
    batch_views: int = 5
    rd_update_period: int = 5
    plateau_patience: int = 2
    lr_halvings_max: int = 2
    seed: int = 0
    fast_preset: bool = False
    quantization_aware: bool = True
    max_iterations: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for name in ("lr_init", "max_epochs", "samples_per_sai", "batch_views",
                     "rd_update_period", "plateau_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sga_epochs < 0 or self.lr_halvings_max < 0:
            raise ValueError("sga_epochs and lr_halvings_max must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    phase: str
    mse: float
    psnr_db: float
    bits_latents: float | None
    bits_weights: float | None
    loss: float
    lr: float


@dataclass
class TrainReport:
    """Per-epoch trace plus end-of-run summary of one training run."""

    epochs: list[EpochStats] = field(default_factory=list)
    wall_clock_s: float = 0.0
    final_psnr: float = 0.0
    final_bpp: float | None = None
    final_bits_weights: float | None = None
    final_bits_latents: float | None = None
    rate_steps: list[int] = field(default_factory=list)
    total_steps: int = 0

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "phase", "mse", "psnr_db", "bits_latents",
                            "bits_weights", "loss", "lr"])
            for row in self.epochs:
                writer.writerow([
                    row.epoch, row.phase, f"{row.mse:.8f}", f"{row.psnr_db:.4f}",
                    "" if row.bits_latents is None else f"{row.bits_latents:.1f}",
                    "" if row.bits_weights is None else f"{row.bits_weights:.1f}",
                    f"{row.loss:.8f}", f"{row.lr:.6f}",
                ])

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Distortion over a batch of views: per-view mean error, summed over views."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    per_view = ((x - x_hat) ** 2).reshape(x.shape[0], -1).mean(dim=1)
    return per_view.sum()


def rd_loss(mse, r_latents, r_weights, lam: float):
    """Lagrangian objective: distortion plus lambda times total estimated bits."""
    return mse + lam * (r_latents + r_weights)


def _views_tensor(lf: LightField) -> torch.Tensor:
    arr = lf.views.reshape(-1, lf.height, lf.width, 3).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _index_to_coord(idx: int, v_count: int) -> AngularCoord:
    return AngularCoord(idx // v_count, idx % v_count)


def _iters_per_epoch(cfg: TrainConfig, n_views: int) -> int:
    return max(1, math.ceil(cfg.samples_per_sai * n_views / cfg.batch_views))


def _weight_rate_bits(model: SanrModel) -> torch.Tensor:
    total = torch.zeros(())
    for name, t in model.qat_tensors().items():
        w_int = ste_round_int(t, model.qat_scales[name])
        total = total + laplace_rate(w_int, fit_laplace(w_int)).bits
    return total


def _latent_rate_bits(model: SanrModel, relaxed: list[torch.Tensor]) -> torch.Tensor:
    total = torch.zeros(())
    for level, y in enumerate(relaxed):
        first = fit_laplace(y[:, 0], allow_single=True)
        total = total + latent_rate(y, model.context[level], first).bits
    return total


@torch.no_grad()
def _render_hard(model: SanrModel) -> LightField:
    """Full-field reconstruction with quantized weights and rounded latents."""
    was_training = model.training
    model.eval()
    cfg = model.config
    latents = model.hard_latents()
    views = np.empty((cfg.u_count, cfg.v_count, cfg.height, cfg.width, 3), dtype=np.uint8)
    for u in range(cfg.u_count):
        for v in range(cfg.v_count):
            img = model(AngularCoord(u, v), latents)
            views[u, v] = torch.floor(img * 255.0 + 0.5).clamp(0, 255).to(torch.uint8).permute(1, 2, 0).numpy()
    if was_training:
        model.train()
    return LightField(views)


def _epoch_eval(model: SanrModel, lf: LightField, lam: float, epoch: int, phase: str,
                lr: float) -> EpochStats:
    recon = _render_hard(model)
    _, mean_psnr = evaluation.psnr(lf, recon)
    diff = (lf.views.astype(np.float64) - recon.views.astype(np.float64)) / 255.0
    mse = float((diff**2).reshape(lf.u_count * lf.v_count, -1).mean(axis=1).sum())
    bits_w = bits_y = None
    loss = mse
    if lam > 0:
        with torch.no_grad():
            bits_w = float(_weight_rate_bits(model))
            bits_y = float(_latent_rate_bits(model, [y[None] if y.dim() == 3 else y
                                                     for y in model.hard_latents()]))
        loss = float(rd_loss(mse, bits_y, bits_w, lam))
    return EpochStats(epoch, phase, mse, mean_psnr, bits_y, bits_w, loss, lr)


def train(lf: LightField, mcfg: ModelConfig, tcfg: TrainConfig) -> tuple[SanrModel, TrainReport]:
    """Overfit a model to one light field with quantization-aware RD training.

    Deterministic for a fixed seed: model initialization, view sampling,
    and latent noise all come from generators seeded by `tcfg.seed`.
    """
    if (lf.u_count, lf.v_count, lf.height, lf.width) != (mcfg.u_count, mcfg.v_count, mcfg.height, mcfg.width):
        raise ValueError("model config does not match the light field dimensions")
    t_start = time.perf_counter()
    gen = torch.Generator().manual_seed(tcfg.seed)
    model = SanrModel(mcfg, seed=tcfg.seed)
    data = _views_tensor(lf)
    report = TrainReport()
    _optimize(model, data, lf, tcfg, report, phase="qat", lr_start=tcfg.lr_init, generator=gen)
    report.final_psnr = report.epochs[-1].psnr_db if report.epochs else 0.0
    if tcfg.lam > 0:
        per_tensor, per_level = finalize_model(model).estimated_rates()
        report.final_bits_weights = sum(per_tensor.values())
        report.final_bits_latents = sum(per_level)
    report.wall_clock_s = time.perf_counter() - t_start
    return model, report


def sga_finetune(model: SanrModel, lf: LightField, tcfg: TrainConfig,
                 start_lr: float | None = None) -> tuple[SanrModel, TrainReport]:
    """Refine latent rounding with annealed stochastic sampling.

    Uses `sga_epochs` epochs (zero means no-op), annealing the temperature
    exponentially so that it reaches its floor exactly at the last step.
    Weight quantization-aware updates and the alternating rate objective
    continue unchanged.
    """
    report = TrainReport()
    if tcfg.sga_epochs == 0:
        return model, report
    t_start = time.perf_counter()
    data = _views_tensor(lf)
    n_views = data.shape[0]
    total_steps = tcfg.sga_epochs * _iters_per_epoch(tcfg, n_views)
    sga = SgaState(total_steps=total_steps, rng_seed=tcfg.seed + 0x5A5A)
    gen = torch.Generator().manual_seed(tcfg.seed + 1)
    _optimize(model, data, lf, tcfg, report, phase="sga",
              lr_start=start_lr if start_lr is not None else tcfg.lr_init,
              generator=gen, sga=sga, epochs_override=tcfg.sga_epochs)
    report.final_psnr = report.epochs[-1].psnr_db if report.epochs else 0.0
    report.wall_clock_s = time.perf_counter() - t_start
    return model, report


def _optimize(model: SanrModel, data: torch.Tensor, lf: LightField, tcfg: TrainConfig,
              report: TrainReport, phase: str, lr_start: float, generator: torch.Generator,
              sga: SgaState | None = None, epochs_override: int | None = None) -> None:
    n_views = data.shape[0]
    iters_per_epoch = _iters_per_epoch(tcfg, n_views)
    max_epochs = epochs_override if epochs_override is not None else tcfg.max_epochs
    opt = torch.optim.Adam(model.parameters(), lr=lr_start)
    lr = lr_start
    best_psnr = -float("inf")
    stall = 0
    halvings = 0
    step = 0
    model.train()
    done = False
    for epoch in range(max_epochs):
        for _ in range(iters_per_epoch):
            if tcfg.max_iterations is not None and step >= tcfg.max_iterations:
                done = True
                break
            idx = torch.randint(0, n_views, (tcfg.batch_views,), generator=generator)
            if tcfg.quantization_aware:
                if sga is None:
                    relaxed = [add_uniform_noise(y, generator) for y in model.latents]
                else:
                    tau = sga.temperature(step + 1)
                    relaxed = [sga_sample(y, tau, sga.generator) for y in model.latents]
            else:
                relaxed = list(model.latents)
            recon = torch.stack([
                model(_index_to_coord(int(j), model.config.v_count), relaxed,
                      quantize_weights=tcfg.quantization_aware)
                for j in idx
            ])
            loss = mse_loss(data[idx], recon)
            use_rate = tcfg.quantization_aware and tcfg.lam > 0 and (step + 1) % tcfg.rd_update_period == 0
            if use_rate:
                loss = rd_loss(loss, _latent_rate_bits(model, relaxed), _weight_rate_bits(model), tcfg.lam)
                report.rate_steps.append(report.total_steps + step)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss in {phase} at epoch {epoch}, step {step}, lr {lr:g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        stats = _epoch_eval(model, lf, tcfg.lam if tcfg.quantization_aware else 0.0, epoch, phase, lr)
        report.epochs.append(stats)
        if done:
            break
        if phase == "qat":
            if stats.psnr_db > best_psnr + 1e-9:
                best_psnr = stats.psnr_db
                stall = 0
            else:
                stall += 1
            if stall >= tcfg.plateau_patience:
                if halvings >= tcfg.lr_halvings_max:
                    break
                halvings += 1
                stall = 0
                lr /= 2.0
                for group in opt.param_groups:
                    group["lr"] = lr
    report.total_steps += step


def hard_round_latents(model: SanrModel) -> None:
    """Snap latent parameters to integers in place (pre-serialization form)."""
    with torch.no_grad():
        for y in model.latents:
            y.copy_(round_half_away(y))
