"""Scene-aware neural representation of one light field.

The backbone stacks four hierarchical scene modeling blocks.  Each block
concatenates the previous feature map with a quantized multi-scale latent
code, runs a modulated convolution whose kernel and bias are assembled per
angular coordinate from a shared low-rank base, then upsamples, normalizes
and applies GeLU.  A final dense convolution plus sigmoid renders one
sub-aperture image per forward pass.

Two model forms exist: `SanrModel` is the trainable network, and
`FinalizedModel` is the frozen post-training form whose weights live on
their integer grids, whose minor tensors are 16-bit dequantized, and whose
batch-norm is folded into a per-channel affine.  Encoder and decoder both
render through `FinalizedModel`, which is what makes reconstructions
bit-exact across the bitstream boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .entropy import ContextModel, LaplaceParams, RateEstimate, fit_laplace, laplace_rate, latent_rate
from .lightfield import AngularCoord, LightField
from .quantization import dequantize16, ptq_uniform16, round_half_away, ste_round

NUM_BLOCKS = 4
QAT_TENSOR_KINDS = ("w_spatial", "w_u", "w_v", "b_u", "b_v")


def latent_shape(level: int, h: int, w: int) -> tuple[int, int]:
    """Spatial size of the latent code at one pyramid level.

    Level i in {1,2,3,4} divides the target size by 2^(5-i) with
    round-half-to-even, so level 4 is half resolution and level 1 is
    one sixteenth.
    """
    if level not in (1, 2, 3, 4):
        raise ValueError(f"level must be in 1..4, got {level}")
    div = 2 ** (5 - level)
    if h < div or w < div:
        raise ValueError(f"spatial size {h}x{w} too small for level {level}")
    return int(round(h / div)), int(round(w / div))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one rate point."""

    c_s: int
    rank: int
    c_l: int
    u_count: int
    v_count: int
    height: int
    width: int
    kernel_size: int = 3
    # Width 2 keeps the four 16-bit context nets a sub-2% share of
    # paper-scale streams while remaining a genuine 3-layer predictor.
    context_hidden: int = 2

    def __post_init__(self):
        if min(self.c_s, self.rank, self.c_l) < 1:
            raise ValueError("c_s, rank and c_l must all be >= 1")
        if min(self.u_count, self.v_count) < 1:
            raise ValueError("angular counts must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        # Raises if the size cannot chain through the latent pyramid.
        latent_shape(1, self.height, self.width)

    @property
    def c_out(self) -> int:
        return self.c_s + 2

    def block_in_channels(self, block: int) -> int:
        return self.c_l if block == 0 else self.c_out + self.c_l

    def latent_shapes(self) -> list[tuple[int, int]]:
        return [latent_shape(i, self.height, self.width) for i in range(1, NUM_BLOCKS + 1)]

    def block_targets(self) -> list[tuple[int, int]]:
        """Output spatial size of each block: the next level's size, then H x W."""
        shapes = self.latent_shapes()
        return shapes[1:] + [(self.height, self.width)]


def compose_spatial_kernel(w_s: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
    """Contract coefficients (O, I, r) with the kernel base (r, k, k)."""
    if w_s.shape[-1] != base.shape[0]:
        raise ValueError(f"rank mismatch: coefficients {tuple(w_s.shape)} vs base {tuple(base.shape)}")
    return torch.einsum("oir,rxy->oixy", w_s, base)


def _uniform(shape, bound: float, generator: torch.Generator) -> torch.Tensor:
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


class ModulatedConv(nn.Module):
    """Convolution whose kernel and bias are assembled per angular coordinate.

    The spatial kernel, one horizontal kernel selected by u and one
    vertical kernel selected by v are all outer products of coefficient
    tensors with one shared base, concatenated along the output channels.
    The bias is the sum of per-u and per-v vectors.
    """

    def __init__(self, c_in: int, c_s: int, rank: int, k: int, u_count: int, v_count: int,
                 generator: torch.Generator):
        super().__init__()
        c_out = c_s + 2
        self.c_in, self.c_s, self.rank, self.k = c_in, c_s, rank, k
        self.u_count, self.v_count = u_count, v_count
        coeff_bound = (1.0 / (c_in * rank)) ** 0.5
        base_bound = (1.0 / (k * k)) ** 0.5
        bias_bound = (1.0 / (c_in * k * k)) ** 0.5
        self.base = nn.Parameter(_uniform((rank, k, k), base_bound, generator))
        self.w_spatial = nn.Parameter(_uniform((c_s, c_in, rank), coeff_bound, generator))
        self.w_u = nn.Parameter(_uniform((u_count, 1, c_in, rank), coeff_bound, generator))
        self.w_v = nn.Parameter(_uniform((v_count, 1, c_in, rank), coeff_bound, generator))
        self.b_u = nn.Parameter(_uniform((u_count, c_out), bias_bound, generator))
        self.b_v = nn.Parameter(_uniform((v_count, c_out), bias_bound, generator))

    def kernel_and_bias(self, coord: AngularCoord, transform=None) -> tuple[torch.Tensor, torch.Tensor]:
        u, v = coord
        if not (0 <= u < self.u_count and 0 <= v < self.v_count):
            raise ValueError(f"coord {(u, v)} out of range for {self.u_count}x{self.v_count} grid")
        w_s, w_u, w_v, b_u, b_v = self.w_spatial, self.w_u, self.w_v, self.b_u, self.b_v
        if transform is not None:
            w_s = transform("w_spatial", w_s)
            w_u = transform("w_u", w_u)
            w_v = transform("w_v", w_v)
            b_u = transform("b_u", b_u)
            b_v = transform("b_v", b_v)
        k_s = compose_spatial_kernel(w_s, self.base)
        k_u = compose_spatial_kernel(w_u[u], self.base)
        k_v = compose_spatial_kernel(w_v[v], self.base)
        kernel = torch.cat([k_s, k_u, k_v], dim=0)
        bias = b_u[u] + b_v[v]
        return kernel, bias

    def forward(self, x: torch.Tensor, coord: AngularCoord, transform=None) -> torch.Tensor:
        kernel, bias = self.kernel_and_bias(coord, transform)
        return F.conv2d(x, kernel, bias, padding=self.k // 2)


def build_modulated_kernel(params: ModulatedConv, coord: AngularCoord) -> tuple[torch.Tensor, torch.Tensor]:
    """Assemble the full (C_out, C_in, k, k) kernel and bias for one view."""
    return params.kernel_and_bias(coord)


class HsmBlock(nn.Module):
    """One hierarchical scene modeling stage.

    Modulated convolution at the input resolution, nearest-neighbor resize
    to the next level's exact size, batch normalization, GeLU.
    """

    def __init__(self, c_in: int, c_s: int, rank: int, k: int, u_count: int, v_count: int,
                 target_hw: tuple[int, int], generator: torch.Generator):
        super().__init__()
        self.conv = ModulatedConv(c_in, c_s, rank, k, u_count, v_count, generator)
        self.norm = nn.BatchNorm2d(c_s + 2)
        self.target_hw = target_hw

    def forward(self, x: torch.Tensor, coord: AngularCoord, transform=None) -> torch.Tensor:
        h = self.conv(x, coord, transform)
        h = F.interpolate(h, size=self.target_hw, mode="nearest")
        h = self.norm(h)
        return F.gelu(h)


def hsm_block_forward(block: HsmBlock, f_prev: torch.Tensor | None, y_quant: torch.Tensor,
                      coord: AngularCoord, transform=None) -> torch.Tensor:
    """Concatenate the previous feature with the quantized latent and run one block."""
    if f_prev is None:
        x = y_quant
    else:
        if f_prev.shape[-2:] != y_quant.shape[-2:]:
            raise ValueError(
                f"spatial mismatch: feature {tuple(f_prev.shape[-2:])} vs latent {tuple(y_quant.shape[-2:])}"
            )
        x = torch.cat([f_prev, y_quant], dim=1)
    return block(x, coord, transform)


class SanrModel(nn.Module):
    """Trainable scene representation: blocks, latent codes, context nets, head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        shapes = config.latent_shapes()
        targets = config.block_targets()
        self.latents = nn.ParameterList(
            nn.Parameter(torch.randn((1, config.c_l, h, w), generator=gen) * 0.01) for h, w in shapes
        )
        self.blocks = nn.ModuleList(
            HsmBlock(config.block_in_channels(i), config.c_s, config.rank, config.kernel_size,
                     config.u_count, config.v_count, targets[i], gen)
            for i in range(NUM_BLOCKS)
        )
        self.head = nn.Conv2d(config.c_out, 3, config.kernel_size, padding=config.kernel_size // 2)
        with torch.no_grad():
            bound = (1.0 / (config.c_out * config.kernel_size**2)) ** 0.5
            self.head.weight.copy_(_uniform(self.head.weight.shape, bound, gen))
            self.head.bias.zero_()
        self.context = nn.ModuleList(ContextModel(config.context_hidden, gen) for _ in range(NUM_BLOCKS))
        # Weight grids are frozen at initialization; one step per tensor.
        self.qat_scales = {
            name: max(float(t.detach().std(unbiased=False)) / 32.0, 1e-8)
            for name, t in self.qat_tensors().items()
        }

    def qat_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            conv = block.conv
            for kind in QAT_TENSOR_KINDS:
                out[f"b{i}.{kind}"] = getattr(conv, kind)
        return out

    def qat_transform(self):
        scales = self.qat_scales

        def make(prefix):
            def transform(kind, tensor):
                return ste_round(tensor, scales[f"{prefix}.{kind}"])

            return transform

        return make

    def hard_latents(self) -> list[torch.Tensor]:
        return [round_half_away(y.detach()) for y in self.latents]

    def forward(self, coord: AngularCoord, latents: list[torch.Tensor] | None = None,
                quantize_weights: bool = True) -> torch.Tensor:
        """Render one sub-aperture image, shape (3, H, W), values in [0, 1].

        `latents` supplies the quantization-relaxed or hard-rounded codes;
        by default the hard-rounded ones are used (evaluation/decode view).
        """
        if latents is None:
            latents = self.hard_latents()
        make = self.qat_transform() if quantize_weights else (lambda prefix: None)
        f = None
        for i, block in enumerate(self.blocks):
            f = hsm_block_forward(block, f, latents[i], coord, make(f"b{i}"))
        img = torch.sigmoid(self.head(f))
        return img.squeeze(0).clamp(0.0, 1.0)

    def parameter_group_counts(self) -> dict[str, int]:
        """Learnable parameter counts by serialization group."""
        qat = sum(t.numel() for t in self.qat_tensors().values())
        raw = sum(b.conv.base.numel() for b in self.blocks)
        raw += sum(p.numel() for b in self.blocks for p in b.norm.parameters())
        raw += sum(p.numel() for p in self.head.parameters())
        raw += sum(p.numel() for ctx in self.context for p in ctx.parameters())
        latent = sum(y.numel() for y in self.latents)
        return {"qat": qat, "raw16": raw, "latent": latent}


def sanr_forward(model: SanrModel, coord: AngularCoord, latents: list[torch.Tensor]) -> torch.Tensor:
    """Render one view from explicitly supplied quantized latents."""
    return model(coord, latents)


@dataclass
class Raw16Tensor:
    """16-bit uniformly quantized side tensor plus its dequantization range."""

    codes: np.ndarray
    mn: float
    mx: float

    def values(self) -> torch.Tensor:
        return dequantize16(self.codes, self.mn, self.mx)


def raw16_from_tensor(t: torch.Tensor) -> Raw16Tensor:
    codes, mn, mx = ptq_uniform16(t)
    return Raw16Tensor(codes=codes, mn=mn, mx=mx)


def weight_tensor_order(config: ModelConfig | None = None) -> list[str]:
    return [f"b{i}.{kind}" for i in range(NUM_BLOCKS) for kind in QAT_TENSOR_KINDS]


def raw_tensor_order(config: ModelConfig | None = None) -> list[str]:
    names = [f"b{i}.base" for i in range(NUM_BLOCKS)]
    names += [f"b{i}.norm_scale" for i in range(NUM_BLOCKS)]
    names += [f"b{i}.norm_shift" for i in range(NUM_BLOCKS)]
    names += ["head.weight", "head.bias"]
    for i in range(NUM_BLOCKS):
        for j in (1, 2, 3):
            names += [f"ctx{i}.conv{j}.weight", f"ctx{i}.conv{j}.bias"]
    return names


class FinalizedModel:
    """Frozen model whose state is exactly what the bitstream carries.

    Weights are integer lattices with per-tensor float32 scales, latents
    are integers, and every minor tensor is the 16-bit dequantized value.
    Rendering from this object is a pure deterministic function, identical
    on the encoder and decoder sides.
    """

    def __init__(self, config: ModelConfig, weight_ints: dict[str, torch.Tensor],
                 weight_scales: dict[str, float], raw16: dict[str, Raw16Tensor],
                 latent_ints: list[torch.Tensor]):
        self.config = config
        self.weight_ints = weight_ints
        self.weight_scales = weight_scales
        self.raw16 = raw16
        self.latent_ints = latent_ints
        self._values: dict[str, torch.Tensor] | None = None

    def weight_value(self, name: str) -> torch.Tensor:
        scale = np.float32(self.weight_scales[name])
        return self.weight_ints[name].to(torch.float32) * torch.tensor(scale)

    def raw_value(self, name: str) -> torch.Tensor:
        return self.raw16[name].values()

    def latent_value(self, level: int) -> torch.Tensor:
        return self.latent_ints[level].to(torch.float32)

    def _materialize(self) -> dict[str, torch.Tensor]:
        if self._values is None:
            vals = {name: self.weight_value(name) for name in self.weight_ints}
            for name in self.raw16:
                vals[name] = self.raw_value(name)
            self._values = vals
        return self._values

    def context_model(self, level: int) -> ContextModel:
        ctx = ContextModel(self.config.context_hidden)
        vals = self._materialize()
        with torch.no_grad():
            for j, conv in enumerate((ctx.conv1, ctx.conv2, ctx.conv3), start=1):
                conv.weight.copy_(vals[f"ctx{level}.conv{j}.weight"])
                conv.bias.copy_(vals[f"ctx{level}.conv{j}.bias"])
        ctx.eval()
        for p in ctx.parameters():
            p.requires_grad_(False)
        return ctx

    @torch.no_grad()
    def forward(self, coord: AngularCoord) -> torch.Tensor:
        cfg = self.config
        u, v = coord
        if not (0 <= u < cfg.u_count and 0 <= v < cfg.v_count):
            raise ValueError(f"coord {(u, v)} out of range")
        vals = self._materialize()
        pad = cfg.kernel_size // 2
        f = None
        for i in range(NUM_BLOCKS):
            y = self.latent_value(i)
            x = y if f is None else torch.cat([f, y], dim=1)
            base = vals[f"b{i}.base"]
            k_s = compose_spatial_kernel(vals[f"b{i}.w_spatial"], base)
            k_u = compose_spatial_kernel(vals[f"b{i}.w_u"][u], base)
            k_v = compose_spatial_kernel(vals[f"b{i}.w_v"][v], base)
            kernel = torch.cat([k_s, k_u, k_v], dim=0)
            bias = vals[f"b{i}.b_u"][u] + vals[f"b{i}.b_v"][v]
            h = F.conv2d(x, kernel, bias, padding=pad)
            target = cfg.block_targets()[i]
            h = F.interpolate(h, size=target, mode="nearest")
            h = h * vals[f"b{i}.norm_scale"][None, :, None, None] + vals[f"b{i}.norm_shift"][None, :, None, None]
            f = F.gelu(h)
        img = torch.sigmoid(F.conv2d(f, vals["head.weight"], vals["head.bias"], padding=pad))
        return img.squeeze(0).clamp(0.0, 1.0)

    def render_all(self) -> LightField:
        cfg = self.config
        views = np.empty((cfg.u_count, cfg.v_count, cfg.height, cfg.width, 3), dtype=np.uint8)
        for u in range(cfg.u_count):
            for v in range(cfg.v_count):
                img = self.forward(AngularCoord(u, v))
                arr = torch.floor(img * 255.0 + 0.5).clamp(0, 255).to(torch.uint8)
                views[u, v] = arr.permute(1, 2, 0).numpy()
        return LightField(views)

    def weight_stats(self, name: str) -> LaplaceParams:
        """Float32 Laplace statistics of one weight tensor's integer values."""
        params = fit_laplace(self.weight_ints[name].to(torch.float32))
        return LaplaceParams(mu=float(np.float32(params.mu)), b=float(np.float32(max(params.b, 1e-6))))

    def latent_first_stats(self, level: int) -> LaplaceParams:
        params = fit_laplace(self.latent_value(level)[0, 0], allow_single=True)
        return LaplaceParams(mu=float(np.float32(params.mu)), b=float(np.float32(max(params.b, 1e-6))))

    def estimated_rates(self) -> tuple[dict[str, float], list[float]]:
        """Model-based bit cost per weight tensor and per latent level.

        Uses exactly the statistics and dequantized context parameters the
        bitstream transmits, so the estimates are the coder's own model.
        """
        per_tensor = {}
        for name in self.weight_ints:
            est = laplace_rate(self.weight_ints[name].to(torch.float32), self.weight_stats(name))
            per_tensor[name] = float(est.bits)
        per_level = []
        for i in range(NUM_BLOCKS):
            est: RateEstimate = latent_rate(self.latent_value(i), self.context_model(i), self.latent_first_stats(i))
            per_level.append(float(est.bits))
        return per_tensor, per_level

    def tensors_equal(self, other: "FinalizedModel") -> bool:
        if self.config != other.config:
            return False
        for name, ints in self.weight_ints.items():
            if not torch.equal(ints, other.weight_ints[name]):
                return False
            if np.float32(self.weight_scales[name]) != np.float32(other.weight_scales[name]):
                return False
        for name, raw in self.raw16.items():
            o = other.raw16[name]
            if not np.array_equal(raw.codes, o.codes) or np.float32(raw.mn) != np.float32(o.mn) \
                    or np.float32(raw.mx) != np.float32(o.mx):
                return False
        return all(torch.equal(a, b) for a, b in zip(self.latent_ints, other.latent_ints))


def finalize_model(model: SanrModel) -> FinalizedModel:
    """Freeze a trained model into its transmitted form.

    Weights land on their fixed integer grids, latents are hard-rounded,
    batch-norm running statistics are folded into per-channel affines, and
    every minor tensor goes through 16-bit uniform quantization.  All of
    this happens before serialization so the encoder-side reconstruction
    already equals what any decoder will compute.
    """
    model.eval()
    cfg = model.config
    weight_ints: dict[str, torch.Tensor] = {}
    weight_scales: dict[str, float] = {}
    for name, t in model.qat_tensors().items():
        scale = np.float32(model.qat_scales[name])
        ints = round_half_away(t.detach() / torch.tensor(scale))
        weight_ints[name] = ints.to(torch.int32)
        weight_scales[name] = float(scale)

    raw16: dict[str, Raw16Tensor] = {}
    for i, block in enumerate(model.blocks):
        raw16[f"b{i}.base"] = raw16_from_tensor(block.conv.base.detach())
        norm = block.norm
        inv_std = torch.rsqrt(norm.running_var.detach() + norm.eps)
        scale = norm.weight.detach() * inv_std
        shift = norm.bias.detach() - norm.running_mean.detach() * scale
        raw16[f"b{i}.norm_scale"] = raw16_from_tensor(scale)
        raw16[f"b{i}.norm_shift"] = raw16_from_tensor(shift)
    raw16["head.weight"] = raw16_from_tensor(model.head.weight.detach())
    raw16["head.bias"] = raw16_from_tensor(model.head.bias.detach())
    for i, ctx in enumerate(model.context):
        for j, conv in enumerate((ctx.conv1, ctx.conv2, ctx.conv3), start=1):
            raw16[f"ctx{i}.conv{j}.weight"] = raw16_from_tensor(conv.weight.detach())
            raw16[f"ctx{i}.conv{j}.bias"] = raw16_from_tensor(conv.bias.detach())

    latent_ints = [round_half_away(y.detach()).to(torch.int32) for y in model.latents]
    return FinalizedModel(cfg, weight_ints, weight_scales, raw16, latent_ints)
