"""Ray / KD-tree traversal into per-node intervals and equal-count sample filling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Ray
from .subdivision import FlatTree, KdNode, KdTree

T_MIN = 1e-3
STRATIFIED, HALTON = 0, 1
_MODES = {"stratified": STRATIFIED, "halton": HALTON}


@dataclass(frozen=True)
class Interval:
    ray_id: int
    node_code: int
    t0: float
    t1: float

    def __post_init__(self):
        if not 0.0 <= self.t0 < self.t1:
            raise ValueError(f"invalid interval [{self.t0}, {self.t1})")


@dataclass(frozen=True, eq=False)
class PointSample:
    ray_id: int
    node_code: int
    t: float
    position: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class HCheckParams:
    """Footprint rule: descend while the node diagonal exceeds
    ``kappa * slope * max(t, T_MIN)``."""

    slope: float
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.slope > 0 and self.kappa > 0):
            raise ValueError("HCheck slope and kappa must be positive")

    @classmethod
    def for_camera(cls, cam, kappa: float = 1.0) -> HCheckParams:
        return cls(cam.pixel_footprint_slope, kappa)


@dataclass(frozen=True)
class SamplingConfig:
    budget: int = 8
    ray_cap: int = 192
    mode: str = "stratified"
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0 or self.ray_cap < 0:
            raise ValueError("budget and ray_cap must be non-negative")
        if self.mode not in _MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")


def hcheck(node: KdNode, t_enter: float, hp: HCheckParams | None) -> bool:
    """True to descend into ``node``'s children; ``hp=None`` always descends."""
    if node.is_leaf:
        return False
    if hp is None:
        return True
    return node.box.diagonal() > hp.kappa * hp.slope * max(t_enter, T_MIN)


# ---------------------------------------------------------------------------
# traversal kernel


@numba.njit(cache=True, nogil=True, inline="always")
def _slab_nb(o, d, lo, hi):
    t0 = 0.0
    t1 = math.inf
    for k in range(3):
        inv = 1.0 / d[k] if d[k] != 0.0 else math.inf
        if math.isinf(inv):
            if o[k] < lo[k] or o[k] > hi[k]:
                return 1.0, 0.0
            continue
        ta = (lo[k] - o[k]) * inv
        tb = (hi[k] - o[k]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0, t1


@numba.njit(cache=True, nogil=True)
def _traverse_one(o, d, lo, hi, diag, axis, left, right, codes, use_h, thresh, out_code, out_t0, out_t1):
    """Near-child-first DFS; returns the number of intervals written."""
    te, tx = _slab_nb(o, d, lo[0], hi[0])
    if te > tx:
        return 0
    cur = te
    stack = np.empty(64, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    n = 0
    while sp > 0:
        sp -= 1
        i = stack[sp]
        te, tx = _slab_nb(o, d, lo[i], hi[i])
        if te > tx or tx <= cur:
            continue
        tent = te if te > cur else cur
        descend = axis[i] >= 0
        if descend and use_h:
            descend = diag[i] > thresh * (tent if tent > 1e-3 else 1e-3)
        if descend:
            li, ri = left[i], right[i]
            tl, _ = _slab_nb(o, d, lo[li], hi[li])
            tr, _ = _slab_nb(o, d, lo[ri], hi[ri])
            if tl <= tr:
                stack[sp] = ri
                stack[sp + 1] = li
            else:
                stack[sp] = li
                stack[sp + 1] = ri
            sp += 2
            continue
        out_code[n] = codes[i]
        out_t0[n] = cur
        out_t1[n] = tx
        n += 1
        cur = tx
    return n


@numba.njit(cache=True, nogil=True)
def _traverse_many(origins, dirs, lo, hi, diag, axis, left, right, codes, use_h, thresh, max_iv):
    """Flat interval arrays for all rays; ray r owns ``[iv_off[r], iv_off[r+1])``."""
    n_rays = origins.shape[0]
    sc = np.empty(max_iv, dtype=np.int64)
    s0 = np.empty(max_iv)
    s1 = np.empty(max_iv)
    iv_off = np.zeros(n_rays + 1, dtype=np.int64)
    for r in range(n_rays):
        k = _traverse_one(origins[r], dirs[r], lo, hi, diag, axis, left, right, codes,
                          use_h, thresh, sc, s0, s1)
        iv_off[r + 1] = iv_off[r] + k
    out_c = np.empty(iv_off[-1], dtype=np.int64)
    out_0 = np.empty(iv_off[-1])
    out_1 = np.empty(iv_off[-1])
    for r in range(n_rays):
        a = iv_off[r]
        _traverse_one(origins[r], dirs[r], lo, hi, diag, axis, left, right, codes,
                      use_h, thresh, out_c[a:], out_0[a:], out_1[a:])
    return iv_off, out_c, out_0, out_1


def _hflags(hp: HCheckParams | None):
    return (False, 0.0) if hp is None else (True, hp.kappa * hp.slope)


def _max_intervals(ft: FlatTree) -> int:
    return int(np.sum(ft.axis < 0))


def traverse_ray(tree: KdTree, ray: Ray, hp: HCheckParams | None) -> list[Interval]:
    ft = tree.packed()
    use_h, thresh = _hflags(hp)
    m = _max_intervals(ft)
    oc, o0, o1 = np.empty(m, dtype=np.int64), np.empty(m), np.empty(m)
    n = _traverse_one(ray.origin, ray.direction, ft.lo, ft.hi, ft.diag, ft.axis, ft.left, ft.right,
                      ft.codes, use_h, thresh, oc, o0, o1)
    return [Interval(ray.ray_id, int(oc[k]), float(o0[k]), float(o1[k])) for k in range(n)]


# ---------------------------------------------------------------------------
# sample filling


@numba.njit(cache=True, nogil=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> numba.uint64(30))) * numba.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> numba.uint64(27))) * numba.uint64(0x94D049BB133111EB)
    return z ^ (z >> numba.uint64(31))


@numba.njit(cache=True, nogil=True)
def _hash_uniform(seed, ray_id, code, idx):
    """Counter-based uniform in [0, 1) keyed by (seed, ray, node, index)."""
    h = _mix64(numba.uint64(seed) + numba.uint64(0x9E3779B97F4A7C15))
    h = _mix64(h ^ numba.uint64(ray_id))
    h = _mix64(h ^ numba.uint64(code))
    h = _mix64(h ^ numba.uint64(idx))
    return (h >> numba.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, nogil=True)
def _radical_inverse2(i):
    r = 0.0
    f = 0.5
    while i > 0:
        if i & 1:
            r += f
        i >>= 1
        f *= 0.5
    return r


@numba.njit(cache=True, nogil=True)
def _fill_unit(n, mode, seed, ray_id, code, shift_on, out):
    """Sorted unit-interval positions for one interval."""
    if mode == 0:
        for i in range(n):
            out[i] = (i + _hash_uniform(seed, ray_id, code, i)) / n
        return
    shift = _hash_uniform(seed, ray_id, code, 0xFFFFFFFF) if shift_on else 0.0
    for i in range(n):
        u = _radical_inverse2(i + 1) + shift
        out[i] = u - 1.0 if u >= 1.0 else u
    # insertion sort; n is small
    for i in range(1, n):
        v = out[i]
        j = i - 1
        while j >= 0 and out[j] > v:
            out[j + 1] = out[j]
            j -= 1
        out[j + 1] = v


@numba.njit(cache=True, nogil=True)
def _allocate(n_iv, budget, cap, counts):
    """Equal budget per interval; past the per-ray cap, the far intervals shrink first."""
    if n_iv * budget <= cap:
        for k in range(n_iv):
            counts[k] = budget
        return n_iv * budget
    base = cap // n_iv
    extra = cap - base * n_iv
    for k in range(n_iv):
        counts[k] = base + (1 if k < extra else 0)
    return cap


@numba.njit(cache=True, nogil=True)
def _fill_ray(ray_id, n_iv, iv_code, iv_t0, iv_t1, budget, cap, mode, seed, out_t, out_code):
    counts = np.empty(n_iv, dtype=np.int64)
    total = _allocate(n_iv, budget, cap, counts)
    unit = np.empty(max(budget, 1))
    s = 0
    for k in range(n_iv):
        m = counts[k]
        _fill_unit(m, mode, seed, ray_id, iv_code[k], True, unit)
        length = iv_t1[k] - iv_t0[k]
        for i in range(m):
            out_t[s] = iv_t0[k] + unit[i] * length
            out_code[s] = iv_code[k]
            s += 1
    return total


def fill_interval_samples(iv: Interval, n: int, mode: str = "stratified", seed: int = 0,
                          ray: Ray | None = None, shift: bool = True) -> list[PointSample]:
    """``n`` samples in ``iv`` regardless of its length, ascending in t.

    ``ray`` supplies positions and directions; without it positions are None.
    ``shift=False`` disables the per-interval Halton rotation.
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if mode not in _MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if n == 0:
        return []
    unit = np.empty(n)
    _fill_unit(n, _MODES[mode], seed, iv.ray_id, iv.node_code, shift, unit)
    ts = iv.t0 + unit * (iv.t1 - iv.t0)
    out = []
    for t in ts:
        pos = dirn = None
        if ray is not None:
            pos, dirn = ray.origin + t * ray.direction, ray.direction
        out.append(PointSample(iv.ray_id, iv.node_code, float(t), pos, dirn))
    return out


def unit_positions(n: int, mode: str, seed: int, ray_id: int, code: int, shift: bool = True) -> np.ndarray:
    out = np.empty(n)
    _fill_unit(n, _MODES[mode], seed, ray_id, code, shift, out)
    return out


# ---------------------------------------------------------------------------
# whole-ray-set sample generation (used by the renderer)


@dataclass
class SampleSet:
    """Samples of many rays, grouped by ray and ascending in t within each ray.

    Ray ``r`` owns ``t[offsets[r]:offsets[r+1]]``; ``t_far[r]`` is where its
    last interval ends (0 for a miss).
    """

    t: np.ndarray
    code: np.ndarray
    ray: np.ndarray
    offsets: np.ndarray
    t_far: np.ndarray
    n_intervals: np.ndarray

    def __len__(self):
        return len(self.t)


@numba.njit(cache=True, nogil=True)
def _fill_many(ray_ids, iv_off, iv_c, iv_0, iv_1, budget, cap, mode, seed):
    n_rays = ray_ids.shape[0]
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    for r in range(n_rays):
        n_iv = iv_off[r + 1] - iv_off[r]
        offsets[r + 1] = offsets[r] + min(n_iv * budget, cap)
    t = np.empty(offsets[-1])
    code = np.empty(offsets[-1], dtype=np.int64)
    ray = np.empty(offsets[-1], dtype=np.int64)
    t_far = np.zeros(n_rays)
    for r in range(n_rays):
        a, b = offsets[r], offsets[r + 1]
        i0, i1 = iv_off[r], iv_off[r + 1]
        _fill_ray(ray_ids[r], i1 - i0, iv_c[i0:i1], iv_0[i0:i1], iv_1[i0:i1], budget, cap, mode,
                  seed, t[a:b], code[a:b])
        for s in range(a, b):
            ray[s] = ray_ids[r]
        if i1 > i0:
            t_far[r] = iv_1[i1 - 1]
    return t, code, ray, offsets, t_far


def generate_samples(tree: KdTree, origins, dirs, ray_ids, hp: HCheckParams | None,
                     cfg: SamplingConfig) -> SampleSet:
    ft = tree.packed()
    use_h, thresh = _hflags(hp)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    ray_ids = np.ascontiguousarray(ray_ids, dtype=np.int64).reshape(-1)
    iv_off, iv_c, iv_0, iv_1 = _traverse_many(origins, dirs, ft.lo, ft.hi, ft.diag, ft.axis, ft.left,
                                              ft.right, ft.codes, use_h, thresh, _max_intervals(ft))
    t, code, ray, offsets, t_far = _fill_many(ray_ids, iv_off, iv_c, iv_0, iv_1, cfg.budget,
                                              cfg.ray_cap, _MODES[cfg.mode], cfg.seed)
    return SampleSet(t, code, ray, offsets, t_far, np.diff(iv_off))


def ray_samples(tree: KdTree, ray: Ray, hp: HCheckParams | None, cfg: SamplingConfig):
    """Traverse and fill one ray; returns ``(t, codes, t_far)``."""
    ivs = traverse_ray(tree, ray, hp)
    if not ivs:
        return np.empty(0), np.empty(0, dtype=np.int64), 0.0
    iv_c = np.array([iv.node_code for iv in ivs], dtype=np.int64)
    iv_0 = np.array([iv.t0 for iv in ivs])
    iv_1 = np.array([iv.t1 for iv in ivs])
    total = min(len(ivs) * cfg.budget, cfg.ray_cap)
    t = np.empty(total)
    codes = np.empty(total, dtype=np.int64)
    _fill_ray(ray.ray_id, len(ivs), iv_c, iv_0, iv_1, cfg.budget, cfg.ray_cap, _MODES[cfg.mode],
              cfg.seed, t, codes)
    return t, codes, ivs[-1].t1

