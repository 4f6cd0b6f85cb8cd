"""Whole-image rendering, dense-quadrature ground truth, PSNR and PPM files."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, ray_aabb_intersect_many
from .sampling import HCheckParams, SamplingConfig
from .scheduler import TAU_STOP, _composite_many, render_rays
from .subdivision import KdTree

PSNR_CAP = 99.0


@dataclass(eq=False)
class ImageBuffer:
    """Linear RGB, row-major ``(height, width, 3)``; values clamped to [0, 1] on write."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.size != self.width * self.height * 3:
            raise ValueError(f"expected {self.width * self.height * 3} channel values, got {px.size}")
        if not np.all(np.isfinite(px)):
            raise ValueError("non-finite pixel values")
        self.pixels = np.clip(px.reshape(self.height, self.width, 3), 0.0, 1.0)

    @classmethod
    def filled(cls, width, height, rgb=(0.0, 0.0, 0.0)):
        return cls(width, height, np.broadcast_to(np.asarray(rgb, float), (height, width, 3)))

    def to_bytes(self) -> bytes:
        return np.round(self.pixels * 255.0).astype(np.uint8).tobytes()


def render_image(tree: KdTree, camera: Camera, hp: HCheckParams | None, cfg: SamplingConfig,
                 path: str = "batched", workers: int = 1, background=(0.0, 0.0, 0.0),
                 tau_stop: float = TAU_STOP, node_field=None):
    """Render every pixel of ``camera`` through the tree; returns ``(ImageBuffer, RenderStats)``."""
    o, d = camera.ray_arrays()
    colors, stats = render_rays(tree, o, d, hp, cfg, path=path, background=background,
                                tau_stop=tau_stop, workers=workers, node_field=node_field)
    return ImageBuffer(camera.width, camera.height, colors), stats


def render_reference(teacher, camera: Camera, steps_per_ray: int = 512, box=None,
                     background=(0.0, 0.0, 0.0), tau_stop: float = TAU_STOP,
                     chunk_rays: int = 2048) -> ImageBuffer:
    """Fixed-step quadrature of ``teacher`` over the root box.

    Each ray's span inside ``box`` (default: the teacher's domain) gets
    ``steps_per_ray`` evenly spaced samples at the left ends of equal cells, so
    every delta equals the cell length.  Compositing is the same kernel the tree
    renderer uses.
    """
    if steps_per_ray < 16:
        raise ValueError("steps_per_ray must be >= 16")
    box = teacher.domain if box is None else box
    o, d = camera.ray_arrays()
    t0, t1, hit = ray_aabb_intersect_many(o, d, box)
    bg = np.asarray(background, dtype=np.float64)
    out = np.empty((len(o), 3))
    out[:] = bg
    idx = np.flatnonzero(hit)
    u = np.arange(steps_per_ray) / steps_per_ray
    for a in range(0, len(idx), chunk_rays):
        sel = idx[a:a + chunk_rays]
        lo, hi = t0[sel], t1[sel]
        t = lo[:, None] + (hi - lo)[:, None] * u[None, :]
        x = o[sel, None, :] + t[..., None] * d[sel, None, :]
        dd = np.broadcast_to(d[sel, None, :], x.shape)
        sigma, rgb = teacher.query(x.reshape(-1, 3), dd.reshape(-1, 3))
        offsets = np.arange(len(sel) + 1, dtype=np.int64) * steps_per_ray
        res = np.empty((len(sel), 3))
        _composite_many(t.reshape(-1), np.ascontiguousarray(sigma, dtype=np.float64),
                        np.ascontiguousarray(rgb, dtype=np.float64).reshape(-1, 3), offsets,
                        np.ascontiguousarray(hi), bg, tau_stop, res)
        out[sel] = res
    return ImageBuffer(camera.width, camera.height, out)


def image_psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


# ---------------------------------------------------------------------------
# binary PPM


def ppm_bytes(img: ImageBuffer) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.to_bytes()


def write_ppm(img: ImageBuffer, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(ppm_bytes(img))
    os.replace(tmp, path)


def read_ppm(path) -> ImageBuffer:
    """Read back a file in the exact layout :func:`write_ppm` produces."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a P6 file with maxval 255")
    try:
        w, h = (int(v) for v in parts[1].split(b" "))
    except ValueError:
        raise ValueError("bad PPM size line") from None
    body = parts[3]
    if len(body) != w * h * 3:
        raise ValueError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return ImageBuffer(w, h, np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0)
