"""Quantizers used across training and serialization.

Three regimes coexist in the codec:

* weights are trained quantization-aware with a straight-through rounding
  estimator on a fixed per-tensor grid,
* latent codes are relaxed with uniform noise during regular training and
  with annealed stochastic rounding during fine-tuning,
* small side tensors (kernel bases, context nets, head, folded norm
  affines) get plain 16-bit uniform quantization after training.

All rounding that reaches a bitstream uses round-half-away-from-zero so
streams are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def ste_round(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Quantize to an integer grid of step `scale` with identity gradient.

    Forward value is round_half_away(x / scale) * scale; the backward pass
    treats the whole map as the identity so gradients reach the float
    weights untouched.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    q = round_half_away(x / scale) * scale
    return x + (q - x).detach()


def ste_round_int(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Integer lattice values of `ste_round`, still with identity gradient."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    q = round_half_away(x / scale)
    return x / scale + (q - x / scale).detach()


def add_uniform_noise(y: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Additive noise in (-0.5, 0.5), the training-time proxy for rounding."""
    noise = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
    return y + noise


@dataclass
class SgaState:
    """Annealing schedule and RNG stream for stochastic rounding."""

    tau_start: float = 0.5
    tau_end: float = 0.02
    total_steps: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.tau_end <= 0 or self.tau_start <= 0:
            raise ValueError("temperatures must be positive")
        if self.tau_end > self.tau_start:
            raise ValueError("annealing must decrease the temperature")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self._generator = torch.Generator().manual_seed(self.rng_seed)

    def temperature(self, step: int) -> float:
        """Exponential decay from tau_start to exactly tau_end at the last step."""
        t = min(max(step, 0), self.total_steps)
        return float(self.tau_start * (self.tau_end / self.tau_start) ** (t / self.total_steps))

    @property
    def generator(self) -> torch.Generator:
        return self._generator


def sga_sample(y: torch.Tensor, tau: float, generator: torch.Generator, epsilon: float = 1e-4) -> torch.Tensor:
    """One stochastic rounding draw, relaxed for gradient flow.

    Each element picks between floor(y) and ceil(y).  The unnormalized
    logits are -atanh(d)/tau where d is the distance to the candidate
    (clamped to [epsilon, 1-epsilon]), and a Gumbel-softmax at the same
    temperature turns the draw into a soft mixture that hardens to the
    sampled integer as tau shrinks.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    y_floor = torch.floor(y)
    y_ceil = torch.ceil(y)
    d_floor = torch.clamp(y - y_floor, epsilon, 1.0 - epsilon)
    d_ceil = torch.clamp(y_ceil - y, epsilon, 1.0 - epsilon)
    logits = torch.stack([-torch.atanh(d_floor) / tau, -torch.atanh(d_ceil) / tau], dim=-1)
    u = torch.rand(logits.shape, generator=generator, dtype=y.dtype)
    gumbel = -torch.log((-torch.log(u.clamp_min(1e-12))).clamp_min(1e-12))
    weights = torch.softmax((logits + gumbel) / tau, dim=-1)
    return y_floor * weights[..., 0] + y_ceil * weights[..., 1]


def uniform_quantize(x: torch.Tensor, levels: int) -> tuple[np.ndarray, float, float]:
    """Uniform quantization onto {0..levels} over the tensor's [min, max].

    Returns integer codes plus the float32 range endpoints needed to
    dequantize.  A constant tensor maps to all-zero codes.
    """
    arr = x.detach().cpu().numpy().astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("uniform quantization requires finite values")
    dtype = np.uint16 if levels > 255 else np.uint8
    mn = np.float32(arr.min()) if arr.size else np.float32(0.0)
    mx = np.float32(arr.max()) if arr.size else np.float32(0.0)
    if mx == mn:
        return np.zeros(arr.shape, dtype=dtype), float(mn), float(mx)
    span = np.float64(mx) - np.float64(mn)
    q = np.floor((arr - np.float64(mn)) / span * levels + 0.5)
    return np.clip(q, 0, levels).astype(dtype), float(mn), float(mx)


def uniform_dequantize(q: np.ndarray, mn: float, mx: float, levels: int) -> torch.Tensor:
    """Inverse of `uniform_quantize`; identical arithmetic on both codec ends."""
    mn32 = np.float32(mn)
    mx32 = np.float32(mx)
    if mx32 == mn32:
        vals = np.full(q.shape, mn32, dtype=np.float32)
    else:
        vals = (mn32 + q.astype(np.float32) / np.float32(levels) * (mx32 - mn32)).astype(np.float32)
    return torch.from_numpy(vals)


def ptq_uniform16(x: torch.Tensor) -> tuple[np.ndarray, float, float]:
    """16-bit post-training quantization for minor model components."""
    return uniform_quantize(x, 65535)


def dequantize16(q: np.ndarray, mn: float, mx: float) -> torch.Tensor:
    return uniform_dequantize(q, mn, mx, 65535)
