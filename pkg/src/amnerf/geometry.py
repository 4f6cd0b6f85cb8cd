"""Axis-aligned boxes, rays and pinhole cameras."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _frozen(v) -> np.ndarray:
    a = np.array(v, dtype=np.float64).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.min), _frozen(self.max)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box corners must be finite")
        if not np.all(lo < hi):
            raise ValueError(f"degenerate box: min={lo}, max={hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max))

    def __hash__(self):
        return hash((tuple(self.min), tuple(self.max)))

    def __repr__(self):
        return f"Aabb(min={self.min.tolist()}, max={self.max.tolist()})"

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, x, right_open: bool = False) -> np.ndarray:
        """Point-in-box test for one point or an (n, 3) array.

        With ``right_open`` the upper faces are excluded, which is the convention
        used to assign every point of a tiling to exactly one cell.
        """
        x = np.asarray(x, dtype=np.float64)
        upper = x < self.max if right_open else x <= self.max
        return np.all((x >= self.min) & upper, axis=-1)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    ray_id: int = 0

    def __post_init__(self):
        d = _frozen(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if self.ray_id < 0:
            raise ValueError("ray_id must be non-negative")
        object.__setattr__(self, "origin", _frozen(self.origin))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """Slab test; returns ``(t_enter, t_exit)`` clipped to t >= 0, or None."""
    return _slab(ray.origin, ray.direction, box.min, box.max)


def _slab(origin, direction, lo, hi):
    t0, t1 = 0.0, math.inf
    for k in range(3):
        o, d = float(origin[k]), float(direction[k])
        inv = 1.0 / d if d != 0.0 else math.inf
        if math.isinf(inv):
            # parallel (or denormal) along this axis: inside the slab or a miss
            if o < lo[k] or o > hi[k]:
                return None
            continue
        ta, tb = (float(lo[k]) - o) * inv, (float(hi[k]) - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t0 > t1:
        return None
    return t0, t1


def ray_aabb_intersect_many(origins, directions, box: Aabb):
    """Vectorised slab test over (n, 3) ray arrays.

    Returns ``(t_enter, t_exit, hit)``; entries where ``hit`` is False are
    meaningless.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (box.min - o) * inv
        tb = (box.max - o) * inv
    # 0 * inf -> nan when the origin sits on a slab face of a parallel ray
    par = ~np.isfinite(inv)
    inside = (o >= box.min) & (o <= box.max)
    ta = np.where(par, -np.inf, ta)
    tb = np.where(par, np.inf, tb)
    tmin = np.maximum(np.minimum(ta, tb).max(axis=1), 0.0)
    tmax = np.maximum(ta, tb).min(axis=1)
    miss = np.any(par & ~inside, axis=1)
    return tmin, tmax, (tmin <= tmax) & ~miss


def aabb_split(box: Aabb, axis: int, position: float):
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    position = float(position)
    if not box.min[axis] < position < box.max[axis]:
        raise ValueError(
            f"split position {position} outside ({box.min[axis]}, {box.max[axis]}) on axis {axis}"
        )
    left_max = box.max.copy()
    left_max[axis] = position
    right_min = box.min.copy()
    right_min[axis] = position
    return Aabb(box.min, left_max), Aabb(right_min, box.max)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with an explicit orthonormal basis.

    ``right`` points along +x in the image and ``up`` along -y (row 0 is the top
    row).
    """

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    fov_y: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("position", "forward", "up", "right"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        basis = np.stack([self.right, self.up, self.forward])
        if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-6):
            raise ValueError("camera basis must be orthonormal")
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")

    @classmethod
    def look_at(cls, position, target, up=(0.0, 1.0, 0.0), fov_y=math.radians(40.0),
                width=128, height=128):
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= n
        true_up = np.cross(right, fwd)
        return cls(position, fwd, true_up, right, float(fov_y), int(width), int(height))

    @property
    def pixel_footprint_slope(self) -> float:
        """World-space footprint of one pixel per unit distance along a ray."""
        return math.tan(self.fov_y / self.height)

    def ray_arrays(self):
        """Origins and unit directions as (H*W, 3) arrays, row-major."""
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        half_h = math.tan(0.5 * self.fov_y)
        half_w = half_h * self.width / self.height
        xs = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * half_w
        ys = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * half_h
        px, py = np.meshgrid(xs, ys)
        d = (px.reshape(-1, 1) * self.right + py.reshape(-1, 1) * self.up + self.forward)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d


def generate_camera_rays(cam: Camera) -> list[Ray]:
    o, d = cam.ray_arrays()
    return [Ray(o[i], d[i], i) for i in range(len(d))]
