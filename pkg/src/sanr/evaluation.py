"""Quality and rate metrics, Bjontegaard deltas, complexity counts, reports.

PSNR is computed per view on 8-bit RGB (identical views report the 100 dB
cap so CSVs stay finite), bits per pixel divide the whole stream by every
pixel of every view, and BD metrics follow the classic cubic-polynomial
fit of quality against log10 rate.  All metrics here are pure functions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .model import NUM_BLOCKS, ModelConfig
from .lightfield import LightField

PSNR_CAP_DB = 100.0
METRIC_METADATA = {"color_space": "RGB", "psnr_cap_db": PSNR_CAP_DB}


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")


@dataclass(frozen=True)
class RDCurve:
    label: str
    points: tuple[RDPoint, ...]

    def __post_init__(self):
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("curve points must have strictly increasing bpp")

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points], dtype=np.float64)


def _check_same_dims(ref: LightField, recon: LightField) -> None:
    if ref.views.shape != recon.views.shape:
        raise ValueError(f"dimension mismatch: {ref.views.shape} vs {recon.views.shape}")


def psnr(ref: LightField, recon: LightField) -> tuple[np.ndarray, float]:
    """Per-view PSNR matrix (U x V, dB) and its mean over all views."""
    _check_same_dims(ref, recon)
    diff = ref.views.astype(np.float64) - recon.views.astype(np.float64)
    mse = (diff**2).reshape(ref.u_count, ref.v_count, -1).mean(axis=2)
    out = np.full((ref.u_count, ref.v_count), PSNR_CAP_DB)
    nonzero = mse > 0
    out[nonzero] = 10.0 * np.log10(255.0**2 / mse[nonzero])
    return out, float(out.mean())


def bpp(stream_bytes: int, u_count: int, v_count: int, height: int, width: int) -> float:
    """Bits per pixel of the whole field: one stream pays for every view."""
    if min(u_count, v_count, height, width) <= 0:
        raise ValueError("dimensions must be positive")
    return stream_bytes * 8.0 / (u_count * v_count * height * width)


def avg_error_map(ref: LightField, recon: LightField) -> np.ndarray:
    """H x W map of the absolute error averaged over all views and channels."""
    _check_same_dims(ref, recon)
    diff = np.abs(ref.views.astype(np.float64) - recon.views.astype(np.float64))
    return diff.mean(axis=(0, 1, 4))


def per_view_psnr_map(ref: LightField, recon: LightField) -> np.ndarray:
    """U x V matrix of per-view PSNR values."""
    return psnr(ref, recon)[0]


def _fit_and_integrate(x: np.ndarray, y: np.ndarray, lo: float, hi: float) -> float:
    poly = np.polyfit(x, y, 3)
    integral = np.polyint(poly)
    return float(np.polyval(integral, hi) - np.polyval(integral, lo))


def bd_metrics(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    """Bjontegaard deltas of `test` against `anchor`: (rate %, PSNR dB).

    Cubic polynomial fits of log10(rate) vs quality (and the inverse),
    integrated over the overlapping interval.  Negative BD-rate means the
    test curve needs fewer bits at equal quality.
    """
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise ValueError(f"curve {curve.label!r} needs >= 4 points for BD metrics")
    log_a, log_t = np.log10(anchor.rates), np.log10(test.rates)

    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if hi <= lo:
        raise ValueError("insufficient PSNR overlap between curves")
    int_a = _fit_and_integrate(anchor.psnrs, log_a, lo, hi)
    int_t = _fit_and_integrate(test.psnrs, log_t, lo, hi)
    avg_diff = (int_t - int_a) / (hi - lo)
    bd_rate = (10.0**avg_diff - 1.0) * 100.0

    lo_r = max(log_a.min(), log_t.min())
    hi_r = min(log_a.max(), log_t.max())
    if hi_r <= lo_r:
        raise ValueError("insufficient rate overlap between curves")
    int_a = _fit_and_integrate(log_a, anchor.psnrs, lo_r, hi_r)
    int_t = _fit_and_integrate(log_t, test.psnrs, lo_r, hi_r)
    bd_psnr = (int_t - int_a) / (hi_r - lo_r)
    return bd_rate, bd_psnr


def conv_macs(c_in: int, c_out: int, k: int, h: int, w: int) -> int:
    """Multiply-accumulates of one dense k x k convolution over an h x w map."""
    return c_in * c_out * k * k * h * w


def kmac_per_pixel(mcfg: ModelConfig) -> float:
    """Analytic decode complexity in kMAC per light-field pixel.

    Counts every convolution (per view: the four block convolutions at
    their input resolutions and the head at full resolution; once per
    field: the context model over all channel transitions of each level),
    plus one MAC per element for the folded normalization affine.
    Upsampling and activations are MAC-free.
    """
    k = mcfg.kernel_size
    shapes = mcfg.latent_shapes()
    targets = mcfg.block_targets()
    per_view = 0
    for i in range(NUM_BLOCKS):
        h_in, w_in = shapes[i]
        per_view += conv_macs(mcfg.block_in_channels(i), mcfg.c_out, k, h_in, w_in)
        h_out, w_out = targets[i]
        per_view += mcfg.c_out * h_out * w_out
    per_view += conv_macs(mcfg.c_out, 3, k, mcfg.height, mcfg.width)

    ch = mcfg.context_hidden
    context_total = 0
    for h_i, w_i in shapes:
        per_transition = (conv_macs(1, ch, 3, h_i, w_i) + conv_macs(ch, ch, 3, h_i, w_i)
                          + conv_macs(ch, 2, 3, h_i, w_i))
        context_total += (mcfg.c_l - 1) * per_transition

    n_views = mcfg.u_count * mcfg.v_count
    total = n_views * per_view + context_total
    return total / (n_views * mcfg.height * mcfg.width) / 1000.0


def _save_flat_binary(arr: np.ndarray, path_base: str) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path_base + ".bin", "wb") as fh:
        fh.write(data.tobytes())
    with open(path_base + ".json", "w") as fh:
        json.dump({"shape": list(arr.shape), "dtype": "float32", "order": "C",
                   "byte_order": "little"}, fh, indent=2)


def emit_reports(curves: list[RDCurve], out_dir: str,
                 error_maps: dict[str, np.ndarray] | None = None,
                 psnr_maps: dict[str, np.ndarray] | None = None) -> list[str]:
    """Write rd.csv, an RD plot, and any error/per-view maps into out_dir.

    Heat maps are emitted both as PNG renderings and as raw little-endian
    float32 binaries with a JSON shape sidecar.  Returns written paths.
    """
    if not curves:
        raise ValueError("emit_reports needs at least one curve")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []

    csv_path = os.path.join(out_dir, "rd.csv")
    lines = ["label,bpp,psnr_db"]
    for curve in curves:
        for p in curve.points:
            lines.append(f"{curve.label},{p.bpp:.6f},{p.psnr:.4f}")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(csv_path)

    meta_path = os.path.join(out_dir, "metadata.json")
    with open(meta_path, "w") as fh:
        json.dump(METRIC_METADATA, fh, indent=2)
    written.append(meta_path)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for curve in curves:
        ax.plot(curve.rates, curve.psnrs, marker="o", label=curve.label)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.4)
    ax.legend()
    plot_path = os.path.join(out_dir, "rd_curves.png")
    fig.savefig(plot_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(plot_path)

    for name, emap in (error_maps or {}).items():
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(emap, cmap="inferno")
        fig.colorbar(im, ax=ax, label="mean |error| (8-bit)")
        ax.set_title(name)
        png_path = os.path.join(out_dir, f"error_map_{name}.png")
        fig.savefig(png_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        _save_flat_binary(emap, os.path.join(out_dir, f"error_map_{name}"))
        written += [png_path, os.path.join(out_dir, f"error_map_{name}.bin"),
                    os.path.join(out_dir, f"error_map_{name}.json")]

    for name, pmap in (psnr_maps or {}).items():
        fig, ax = plt.subplots(figsize=(5, 4.5))
        im = ax.imshow(pmap, cmap="viridis")
        fig.colorbar(im, ax=ax, label="PSNR (dB)")
        for (u, v), val in np.ndenumerate(pmap):
            ax.text(v, u, f"{val:.1f}", ha="center", va="center", fontsize=7, color="white")
        ax.set_xlabel("v")
        ax.set_ylabel("u")
        ax.set_title(name)
        png_path = os.path.join(out_dir, f"per_view_psnr_{name}.png")
        fig.savefig(png_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        _save_flat_binary(pmap, os.path.join(out_dir, f"per_view_psnr_{name}"))
        written += [png_path, os.path.join(out_dir, f"per_view_psnr_{name}.bin"),
                    os.path.join(out_dir, f"per_view_psnr_{name}.json")]
    return written
