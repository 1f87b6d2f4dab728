"""Rate estimation and probability models for weights and latent codes.

Quantized weights are modeled per tensor with a Laplace distribution whose
bit cost is the negative log of the probability mass on the unit interval
around each lattice point.  Latent codes use a channel-wise autoregressive
model: the first channel is coded with its own fitted statistics, and each
later channel gets per-element (mu, sigma) predicted by a small CNN from
the previously decoded channel.

Internally everything is parameterized by the Laplace scale b; the
conventional standard deviation is sigma = b * sqrt(2) and is what the
context network predicts and what reports show.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

PROB_FLOOR = 2.0 ** -24
SIGMA_MIN = 1e-3
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class LaplaceParams:
    """Location and scale of a Laplace distribution (b, not sigma)."""

    mu: float
    b: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"Laplace scale must be positive, got {self.b}")

    @property
    def sigma(self) -> float:
        return self.b * _SQRT2


@dataclass
class RateEstimate:
    """Bit cost of a tensor under some probability model.

    `bits` is a 0-dim torch tensor so it can participate in autograd;
    use float(est.bits) for plain numbers.
    """

    bits: torch.Tensor
    per_element: torch.Tensor | None = None
    per_channel: list[torch.Tensor] = field(default_factory=list)


def laplace_cdf(x: torch.Tensor, mu, b) -> torch.Tensor:
    z = (x - mu) / b
    half_tail = 0.5 * torch.exp(-z.abs())
    return torch.where(z < 0, half_tail, 1.0 - half_tail)


def _interval_mass(x: torch.Tensor, mu, b) -> torch.Tensor:
    upper = laplace_cdf(x + 0.5, mu, b)
    lower = laplace_cdf(x - 0.5, mu, b)
    return (upper - lower).clamp_min(PROB_FLOOR)


def laplace_rate(w_hat: torch.Tensor, params: LaplaceParams) -> RateEstimate:
    """Bit cost of integer-lattice values under a Laplace model.

    Per element the cost is -log2 of the CDF mass on [w-0.5, w+0.5],
    floored at 2^-24 so the estimate stays finite for outliers.
    """
    per_element = -torch.log2(_interval_mass(w_hat, params.mu, params.b))
    return RateEstimate(bits=per_element.sum(), per_element=per_element)


def laplace_rate_tensors(w_hat: torch.Tensor, mu: torch.Tensor, b: torch.Tensor) -> RateEstimate:
    """Same cost as `laplace_rate` with (mu, b) as tensors, for autograd."""
    per_element = -torch.log2(_interval_mass(w_hat, mu, b))
    return RateEstimate(bits=per_element.sum(), per_element=per_element)


def fit_laplace(x: torch.Tensor, allow_single: bool = False) -> LaplaceParams:
    """Maximum-likelihood Laplace fit: median location, mean-|dev| scale.

    The scale is floored at 1e-6 so constant tensors stay codable.  With
    `allow_single`, a one-element tensor yields a point mass at its value
    (needed for degenerate 1x1 latent levels) instead of an error.
    """
    if x.numel() < 2:
        if allow_single and x.numel() == 1:
            return LaplaceParams(mu=float(x.reshape(-1)[0]), b=1e-6)
        raise ValueError("fit_laplace needs at least 2 elements")
    flat = x.detach().reshape(-1)
    mu = flat.median()
    b = (flat - mu).abs().mean().clamp_min(1e-6)
    return LaplaceParams(mu=float(mu), b=float(b))


class ContextModel(nn.Module):
    """Per-channel conditional density predictor for latent codes.

    Three 3x3 convolutions with ReLU activations map the previously
    decoded channel slice to per-element (mu, sigma) of a Laplace model
    for the next channel.  One instance is shared across all channel
    transitions of one latent level.
    """

    def __init__(self, hidden: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden, 2, 3, padding=1)
        if generator is not None:
            for conv in (self.conv1, self.conv2, self.conv3):
                fan_in = conv.in_channels * 9
                bound = (1.0 / fan_in) ** 0.5
                with torch.no_grad():
                    conv.weight.copy_((torch.rand(conv.weight.shape, generator=generator) * 2 - 1) * bound)
                    conv.bias.zero_()
        # Start the sigma head at 1 so early rate estimates are tame.
        with torch.no_grad():
            self.conv3.bias[1] = 1.0

    def forward(self, prev_channel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = prev_channel
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[None]
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        out = self.conv3(h)
        mu = out[:, 0]
        sigma = out[:, 1].clamp_min(SIGMA_MIN)
        return mu.squeeze(0), sigma.squeeze(0)


def context_predict(prev_channel: torch.Tensor, ctx: ContextModel) -> tuple[torch.Tensor, torch.Tensor]:
    """Predict (mu, sigma) maps for the next channel from the previous one.

    The first channel of a latent level never goes through this path; it
    is coded with plain fitted statistics.
    """
    mu, sigma = ctx(prev_channel)
    if mu.shape[-2:] != prev_channel.shape[-2:]:
        raise ValueError("context output shape mismatch")
    return mu, sigma


def latent_rate(
    y_hat: torch.Tensor,
    ctx: ContextModel,
    first_channel_params: LaplaceParams,
) -> RateEstimate:
    """Total bit cost of one latent level under the autoregressive model.

    `y_hat` has shape (1, C, h, w) and holds integer values at coding time
    or their noise/SGA-relaxed versions during training; the conditioning
    channel is whatever representation the decoder path sees at that phase.
    """
    if y_hat.dim() != 4 or y_hat.shape[0] != 1:
        raise ValueError(f"expected latents of shape (1, C, h, w), got {tuple(y_hat.shape)}")
    channels = y_hat.shape[1]
    per_channel = []
    first = -torch.log2(_interval_mass(y_hat[:, 0], first_channel_params.mu, first_channel_params.b)).sum()
    per_channel.append(first)
    for c in range(1, channels):
        mu, sigma = context_predict(y_hat[0, c - 1], ctx)
        b = sigma / _SQRT2
        per_channel.append(-torch.log2(_interval_mass(y_hat[0, c], mu, b)).sum())
    total = torch.stack(per_channel).sum()
    return RateEstimate(bits=total, per_channel=per_channel)
