"""Light field ingestion, validation, cropping, and synthetic fixtures.

A light field is stored as a U x V grid of sub-aperture images (SAIs),
each an H x W x 3 array of 8-bit RGB samples.  `u` is the horizontal view
index and `v` the vertical one; views are kept in row-major angular order
(u outer, v inner).  All views are fitted and evaluated in RGB; no YUV
conversion happens anywhere in the codec.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image

VIEW_NAME_FORMAT = "view_{u:02d}_{v:02d}.png"
META_NAME = "meta.json"


class LightFieldError(Exception):
    """Raised on malformed light field directories or invalid view data."""


class AngularCoord(NamedTuple):
    """Discrete angular grid position of one sub-aperture image."""

    u: int
    v: int


@dataclass(frozen=True)
class LightField:
    """U x V grid of 8-bit RGB sub-aperture images.

    `views` has shape (U, V, H, W, 3) and dtype uint8.  Every view shares
    the same spatial size; this is validated on construction.
    """

    views: np.ndarray

    def __post_init__(self):
        v = self.views
        if v.ndim != 5 or v.shape[-1] != 3:
            raise LightFieldError(f"views must have shape (U, V, H, W, 3), got {v.shape}")
        if v.dtype != np.uint8:
            raise LightFieldError(f"views must be uint8, got {v.dtype}")

    @property
    def u_count(self) -> int:
        return self.views.shape[0]

    @property
    def v_count(self) -> int:
        return self.views.shape[1]

    @property
    def height(self) -> int:
        return self.views.shape[2]

    @property
    def width(self) -> int:
        return self.views.shape[3]

    def view(self, coord: AngularCoord) -> np.ndarray:
        u, v = coord
        if not (0 <= u < self.u_count and 0 <= v < self.v_count):
            raise LightFieldError(f"coord {(u, v)} out of range for {self.u_count}x{self.v_count} grid")
        return self.views[u, v]

    def coords(self):
        """All angular coordinates in row-major (u outer, v inner) order."""
        for u in range(self.u_count):
            for v in range(self.v_count):
                yield AngularCoord(u, v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LightField):
            return NotImplemented
        return self.views.shape == other.views.shape and bool(np.array_equal(self.views, other.views))


def load_lightfield(path: str, layout: str = VIEW_NAME_FORMAT) -> LightField:
    """Load a directory of per-view PNGs into a LightField.

    The grid size is taken from `meta.json` when present, otherwise
    inferred from the largest (u, v) indices found in filenames matching
    `layout`.  Every view of the grid must be present and share one
    spatial size.
    """
    if not os.path.isdir(path):
        raise LightFieldError(f"not a directory: {path}")

    meta_path = os.path.join(path, META_NAME)
    if os.path.isfile(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        u_count, v_count = int(meta["U"]), int(meta["V"])
    else:
        u_count, v_count = _infer_grid(path, layout)

    views = None
    for u in range(u_count):
        for v in range(v_count):
            name = layout.format(u=u, v=v)
            fpath = os.path.join(path, name)
            if not os.path.isfile(fpath):
                raise LightFieldError(f"missing view ({u},{v}): {name}")
            try:
                img = np.asarray(Image.open(fpath).convert("RGB"), dtype=np.uint8)
            except Exception as exc:  # noqa: BLE001 - surface any decoder failure
                raise LightFieldError(f"unreadable image {name}: {exc}") from exc
            if views is None:
                views = np.empty((u_count, v_count) + img.shape, dtype=np.uint8)
            if img.shape != views.shape[2:]:
                raise LightFieldError(
                    f"inconsistent dimensions: view ({u},{v}) is {img.shape[:2]}, expected {views.shape[2:4]}"
                )
            views[u, v] = img
    if views is None:
        raise LightFieldError(f"no views found in {path}")
    return LightField(views)


def save_lightfield(lf: LightField, path: str, dataset_name: str = "unnamed") -> None:
    """Write one PNG per view plus a `meta.json` sidecar."""
    os.makedirs(path, exist_ok=True)
    for u in range(lf.u_count):
        for v in range(lf.v_count):
            Image.fromarray(lf.views[u, v]).save(os.path.join(path, VIEW_NAME_FORMAT.format(u=u, v=v)))
    meta = {
        "U": lf.u_count,
        "V": lf.v_count,
        "H": lf.height,
        "W": lf.width,
        "dataset_name": dataset_name,
    }
    with open(os.path.join(path, META_NAME), "w") as fh:
        json.dump(meta, fh, indent=2)


def _infer_grid(path: str, layout: str) -> tuple[int, int]:
    # Probe increasing indices against the layout; tolerates dense grids only.
    names = set(os.listdir(path))
    max_u = max_v = -1
    for u in range(256):
        if layout.format(u=u, v=0) in names:
            max_u = u
    for v in range(256):
        if layout.format(u=0, v=v) in names:
            max_v = v
    if max_u < 0 or max_v < 0:
        raise LightFieldError(f"no files matching layout {layout!r} in {path}")
    return max_u + 1, max_v + 1


def crop_and_center(lf: LightField, target_u: int, target_v: int, crop_left: int, crop_top: int) -> LightField:
    """Select the central target_u x target_v angular window and trim borders.

    `crop_left` columns are removed from the left edge and `crop_top` rows
    from the top edge of every view (the standard dataset preparation that
    removes black borders).
    """
    if target_u > lf.u_count or target_v > lf.v_count:
        raise LightFieldError(
            f"target {target_u}x{target_v} exceeds available views {lf.u_count}x{lf.v_count}"
        )
    if crop_left >= lf.width or crop_top >= lf.height:
        raise LightFieldError("crop offsets exceed view size")
    u0 = (lf.u_count - target_u) // 2
    v0 = (lf.v_count - target_v) // 2
    views = lf.views[u0 : u0 + target_u, v0 : v0 + target_v, crop_top:, crop_left:, :]
    return LightField(np.ascontiguousarray(views))


def make_synthetic_lightfield(
    h: int,
    w: int,
    u_count: int,
    v_count: int,
    disparity: float,
    seed: int,
) -> LightField:
    """Deterministic textured fixture with linear per-view parallax.

    A single textured base image is generated from `seed`, and view (u, v)
    is the window into it shifted by disparity * (u - u_center) pixels
    horizontally and disparity * (v - v_center) vertically.  Integer total
    shifts make views exact translated copies of each other; fractional
    shifts are resampled bilinearly.
    """
    if h < 16 or w < 16:
        raise ValueError("fixture requires h, w >= 16")
    if disparity * max(u_count, v_count) >= min(h, w) / 4:
        raise ValueError("disparity too large for the requested spatial size")

    u_center = (u_count - 1) / 2.0
    v_center = (v_count - 1) / 2.0
    max_shift = disparity * max(u_center, v_center)
    margin = int(math.ceil(max_shift)) + 1

    base = _textured_base(h + 2 * margin, w + 2 * margin, seed)

    views = np.empty((u_count, v_count, h, w, 3), dtype=np.uint8)
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    for u in range(u_count):
        for v in range(v_count):
            dx = disparity * (u - u_center)
            dy = disparity * (v - v_center)
            views[u, v] = _bilinear_window(base, ys + margin + dy, xs + margin + dx)
    return LightField(views)


def _textured_base(height: int, width: int, seed: int) -> np.ndarray:
    """Multi-octave texture with a roughly 1/f spectrum, reproducible from seed.

    Wavelengths are drawn in absolute pixels (8 up to the image size) so
    large fixtures carry proportionally more fine detail, the way natural
    photographs do.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    scale = float(max(height, width))
    img = np.zeros((height, width, 3), dtype=np.float64)
    n_waves = 24
    log_lo, log_hi = np.log(8.0), np.log(scale)
    for _ in range(n_waves):
        wavelength = np.exp(rng.uniform(log_lo, log_hi))
        freq = 2.0 * np.pi / wavelength
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amplitude = (wavelength / scale) ** 0.5 * rng.uniform(0.3, 1.0)
        wave = amplitude * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        weights = rng.uniform(0.2, 1.0, size=3)
        img += wave[:, :, None] * weights[None, None, :]
    # Mild blurred noise so the texture is not band-limited to pure tones.
    noise = rng.standard_normal((height, width, 3))
    kernel = np.ones(5) / 5.0
    for axis in (0, 1):
        noise = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), axis, noise)
    img += 0.12 * noise
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo + 1e-12)
    return np.clip(np.round(img * 225.0 + 15.0), 0, 255).astype(np.uint8)


def _bilinear_window(base: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a rectangular window at (possibly fractional) coordinates."""
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    y1 = np.clip(y0 + 1, 0, base.shape[0] - 1)
    x1 = np.clip(x0 + 1, 0, base.shape[1] - 1)
    b = base.astype(np.float64)
    top = b[np.ix_(y0, x0)] * (1 - fx) + b[np.ix_(y0, x1)] * fx
    bot = b[np.ix_(y1, x0)] * (1 - fx) + b[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
