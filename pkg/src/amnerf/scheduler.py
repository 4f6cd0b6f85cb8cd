"""Sort-based batching of samples by node, batched inference and compositing.

Two rendering paths share the same sample generation and compositing code:

* ``batched`` sorts every sample of every ray by node code, runs one inference
  call per node, scatters results back and composites per ray;
* ``naive`` marches each ray on its own, evaluating samples one at a time in t
  order and stopping at early termination.  It is the reference oracle.

Per-sample inference accumulates in a fixed order, so both paths agree exactly.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .field import _forward_row, forward_rows
from .sampling import HCheckParams, SamplingConfig, generate_samples, ray_samples
from .subdivision import KdTree

TAU_STOP = 1e-4


@dataclass(frozen=True)
class SampleBatch:
    node_code: int
    start: int
    stop: int

    @property
    def indices(self) -> range:
        return range(self.start, self.stop)

    def __len__(self):
        return self.stop - self.start


@dataclass
class RenderStats:
    ray_count: int = 0
    total_samples: int = 0
    evaluated_samples: int = 0
    batch_count: int = 0
    max_batch: int = 0
    wall_ms: float = 0.0

    @property
    def avg_samples_per_ray(self) -> float:
        return self.total_samples / self.ray_count if self.ray_count else 0.0

    @property
    def mean_batch(self) -> float:
        return self.total_samples / self.batch_count if self.batch_count else 0.0


def sort_samples_by_node(codes):
    """Stable sort by node code.

    Returns ``(perm, batches)``: ``codes[perm]`` is grouped by code with the
    original relative order kept inside each group, and each batch is a
    contiguous ``[start, stop)`` range of the permuted order.
    """
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        return np.empty(0, dtype=np.int64), []
    perm = np.argsort(codes, kind="stable")
    sc = codes[perm]
    cut = np.flatnonzero(np.diff(sc)) + 1
    starts = np.concatenate([[0], cut])
    stops = np.concatenate([cut, [len(sc)]])
    return perm, [SampleBatch(int(sc[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def _normalized(lo, hi, x):
    return (x - lo) / (hi - lo)


def infer_batches(tree: KdTree, positions, dirs, codes, perm, batches, order=None, node_field=None,
                  executor=None):
    """Evaluate every sample with its node's MLP; results are in original order.

    ``order`` optionally permutes the batch execution order (the output does not
    depend on it).  ``node_field(node, x, d)`` replaces the MLP, e.g. to push the
    analytic teacher through the same pipeline.
    """
    ft = tree.packed()
    positions = np.asarray(positions, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(codes)
    sigma = np.empty(n)
    rgb = np.empty((n, 3))
    a = tree.arch

    def run(batch: SampleBatch):
        row = int(ft.rows([batch.node_code])[0])
        idx = perm[batch.start:batch.stop]
        x, d = positions[idx], dirs[idx]
        if node_field is not None:
            s, c = node_field(tree.node(batch.node_code), x, d)
        else:
            xn = np.ascontiguousarray(_normalized(ft.lo[row], ft.hi[row], x))
            s, c = np.empty(len(idx)), np.empty((len(idx), 3))
            forward_rows(ft.params2d, np.full(len(idx), row, dtype=np.int64), a.width, a.depth,
                         a.l_pos, a.l_dir, xn, np.ascontiguousarray(d), s, c)
        sigma[idx] = s
        rgb[idx] = c

    seq = [batches[i] for i in order] if order is not None else batches
    for b in seq:
        ft.rows([b.node_code])  # unknown codes fail before any work is done
    if executor is None:
        for b in seq:
            run(b)
    else:
        list(executor.map(run, seq))
    return sigma, rgb


# ---------------------------------------------------------------------------
# compositing


@numba.njit(cache=True, nogil=True, inline="always")
def _step(T, acc, sigma, r, g, b, delta):
    alpha = 1.0 - math.exp(-sigma * delta)
    w = T * alpha
    acc[0] += w * r
    acc[1] += w * g
    acc[2] += w * b
    return T * (1.0 - alpha)


@numba.njit(cache=True, nogil=True)
def _composite(t, sigma, rgb, t_far, bg, tau, out):
    acc = np.zeros(3)
    T = 1.0
    n = t.shape[0]
    for i in range(n):
        delta = (t[i + 1] if i + 1 < n else t_far) - t[i]
        T = _step(T, acc, sigma[i], rgb[i, 0], rgb[i, 1], rgb[i, 2], delta)
        if T < tau:
            break
    for c in range(3):
        out[c] = acc[c] + T * bg[c]
    return T


@numba.njit(cache=True, nogil=True)
def _composite_many(t, sigma, rgb, offsets, t_far, bg, tau, out):
    for r in range(offsets.shape[0] - 1):
        a, b = offsets[r], offsets[r + 1]
        _composite(t[a:b], sigma[a:b], rgb[a:b], t_far[r], bg, tau, out[r])


@numba.njit(cache=True, nogil=True)
def _march_naive(t, xn, d, rows, params2d, width, depth, l_pos, l_dir, t_far, bg, tau, out):
    """Evaluate-and-composite one sample at a time; returns samples evaluated."""
    n_in = 6 * l_pos + 6 * l_dir + 6
    feat = np.empty(n_in)
    h0 = np.empty(max(width, 4))
    h1 = np.empty(max(width, 4))
    fo = np.empty(4)
    acc = np.zeros(3)
    T = 1.0
    n = t.shape[0]
    used = 0
    for i in range(n):
        _forward_row(params2d[rows[i]], width, depth, l_pos, l_dir, xn[i], d, feat, h0, h1, fo)
        used += 1
        delta = (t[i + 1] if i + 1 < n else t_far) - t[i]
        T = _step(T, acc, fo[0], fo[1], fo[2], fo[3], delta)
        if T < tau:
            break
    for c in range(3):
        out[c] = acc[c] + T * bg[c]
    return used


def composite_ray(t, sigma, rgb, t_far: float, background=(0.0, 0.0, 0.0), tau_stop: float = TAU_STOP):
    """Emission-absorption quadrature along one ray with early termination.

    ``delta_i = t[i+1] - t[i]`` in world units, the last one reaching ``t_far``.
    """
    t = np.ascontiguousarray(t, dtype=np.float64).reshape(-1)
    sigma = np.ascontiguousarray(sigma, dtype=np.float64).reshape(-1)
    rgb = np.ascontiguousarray(rgb, dtype=np.float64).reshape(-1, 3)
    if len(sigma) != len(t) or len(rgb) != len(t):
        raise ValueError("t, sigma and rgb lengths differ")
    if np.any(np.diff(t) < 0):
        raise ValueError("samples must be sorted by t")
    if len(t) and t_far < t[-1]:
        raise ValueError("t_far lies before the last sample")
    out = np.empty(3)
    _composite(t, sigma, rgb, float(t_far), np.asarray(background, dtype=np.float64), tau_stop, out)
    return out


def composite_weights(t, sigma, t_far: float):
    """Per-sample weights and final transmittance without early termination."""
    t = np.asarray(t, dtype=np.float64)
    delta = np.diff(np.append(t, t_far))
    alpha = 1.0 - np.exp(-np.asarray(sigma) * delta)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
    return trans[:-1] * alpha, float(trans[-1])


# ---------------------------------------------------------------------------
# full ray sets


def _chunks(n: int, k: int):
    k = max(1, min(k, n)) if n else 1
    edges = np.linspace(0, n, k + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def render_rays(tree: KdTree, origins, dirs, hp: HCheckParams | None, cfg: SamplingConfig,
                path: str = "batched", background=(0.0, 0.0, 0.0), tau_stop: float = TAU_STOP,
                workers: int = 1, node_field=None, ray_ids=None):
    """Colours ``(n, 3)`` and :class:`RenderStats` for rays given as arrays.

    ``ray_ids`` default to ``0..n-1`` and key the sample jitter, so a ray renders
    the same no matter how the set is split between workers.
    """
    t_start = time.perf_counter()
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    ray_ids = np.arange(n, dtype=np.int64) if ray_ids is None else np.asarray(ray_ids, dtype=np.int64)
    bg = np.asarray(background, dtype=np.float64)
    colors = np.zeros((n, 3))
    stats = RenderStats(ray_count=n)
    if n == 0:
        return colors, stats
    if path == "naive":
        _render_naive(tree, origins, dirs, ray_ids, hp, cfg, bg, tau_stop, colors, stats, node_field)
    elif path == "batched":
        _render_batched(tree, origins, dirs, ray_ids, hp, cfg, bg, tau_stop, colors, stats, workers,
                        node_field)
    else:
        raise ValueError(f"unknown render path {path!r}")
    stats.wall_ms = 1e3 * (time.perf_counter() - t_start)
    return colors, stats


def _render_batched(tree, origins, dirs, ray_ids, hp, cfg, bg, tau, colors, stats, workers, node_field):
    n = len(origins)
    chunks = _chunks(n, workers)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        def gen(ab):
            a, b = ab
            return generate_samples(tree, origins[a:b], dirs[a:b], ray_ids[a:b], hp, cfg)

        parts = list(pool.map(gen, chunks)) if pool else [gen(c) for c in chunks]
        t = np.concatenate([p.t for p in parts])
        codes = np.concatenate([p.code for p in parts])
        offsets = np.concatenate([[0]] + [p.offsets[1:] + q for p, q in
                                          zip(parts, np.cumsum([0] + [len(p) for p in parts[:-1]]))])
        t_far = np.concatenate([p.t_far for p in parts])
        per_ray = np.diff(offsets)
        local = np.repeat(np.arange(n), per_ray)
        pos = origins[local] + t[:, None] * dirs[local]
        sd = dirs[local]

        perm, batches = sort_samples_by_node(codes)
        sigma, rgb = infer_batches(tree, pos, sd, codes, perm, batches, node_field=node_field,
                                   executor=pool)

        def comp(ab):
            a, b = ab
            o0, o1 = offsets[a], offsets[b]
            _composite_many(t[o0:o1], sigma[o0:o1], rgb[o0:o1], offsets[a:b + 1] - o0, t_far[a:b], bg,
                            tau, colors[a:b])

        list(pool.map(comp, chunks)) if pool else [comp(c) for c in chunks]
    finally:
        if pool:
            pool.shutdown()
    stats.total_samples = int(len(t))
    stats.evaluated_samples = int(len(t))
    stats.batch_count = len(batches)
    stats.max_batch = max((len(b) for b in batches), default=0)


def _render_naive(tree, origins, dirs, ray_ids, hp, cfg, bg, tau, colors, stats, node_field):
    from .geometry import Ray

    ft = tree.packed()
    a = tree.arch
    total = used = 0
    for r in range(len(origins)):
        ray = Ray(origins[r], dirs[r], int(ray_ids[r]))
        t, codes, t_far = ray_samples(tree, ray, hp, cfg)
        total += len(t)
        if len(t) == 0:
            colors[r] = bg
            continue
        pos = origins[r] + t[:, None] * dirs[r]
        rows = ft.rows(codes)
        if node_field is not None:
            used += _march_field(tree, node_field, t, pos, dirs[r], codes, t_far, bg, tau, colors[r])
            continue
        xn = _normalized(ft.lo[rows], ft.hi[rows], pos)
        used += _march_naive(t, xn, dirs[r], rows, ft.params2d, a.width, a.depth, a.l_pos, a.l_dir,
                             t_far, bg, tau, colors[r])
    stats.total_samples = total
    stats.evaluated_samples = used


def _march_field(tree, node_field, t, pos, d, codes, t_far, bg, tau, out):
    sigma = np.empty(len(t))
    rgb = np.empty((len(t), 3))
    for i in range(len(t)):
        s, c = node_field(tree.node(int(codes[i])), pos[i:i + 1], d[None, :])
        sigma[i], rgb[i] = s[0], c[0]
    _composite(t, sigma, rgb, t_far, bg, tau, out)
    return len(t)
