"""Density point clouds and density-aware KD-tree construction.

Node codes are binary paths: the root is 1, the left child of ``c`` is ``2c`` and
the right child ``2c + 1``, so a node's depth is ``c.bit_length() - 1``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .field import MlpArch, MlpParams, sphere_directions
from .geometry import Aabb, aabb_split
from .training import DistillConfig, distill_node, node_rng, node_score

log = logging.getLogger(__name__)

MAGIC = b"AMNF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BuildConfig:
    cloud_points: int = 65536
    cloud_dirs: int = 8
    max_depth: int = 10
    min_points: int = 64
    density_eps: float = 1e-6
    threshold: float = 0.01
    # reference PSNR for the stopping test; None compares against the parent
    target_score: float | None = None
    score_points: int = 2048
    score_dirs: int = 2
    arch: MlpArch = field(default_factory=MlpArch)
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0

    def __post_init__(self):
        if self.cloud_points < 1 or self.cloud_dirs < 1:
            raise ValueError("cloud sizes must be positive")
        if not 0 <= self.max_depth <= 20:
            raise ValueError("max_depth must lie in [0, 20]")
        if self.min_points < 1 or self.score_points < 1 or self.score_dirs < 1:
            raise ValueError("point counts must be positive")
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError("threshold must lie in [0, 1)")
        if self.target_score is not None and not self.target_score > 0:
            raise ValueError("target_score must be positive")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.as_tuple()
        return d


# ---------------------------------------------------------------------------
# density cloud


@dataclass
class DensityCloud:
    positions: np.ndarray
    density: np.ndarray
    mean_rgb: np.ndarray

    def __len__(self):
        return len(self.density)

    def subset(self, mask) -> DensityCloud:
        return DensityCloud(self.positions[mask], self.density[mask], self.mean_rgb[mask])

    @property
    def mass(self) -> float:
        return float(self.density.sum())


def sample_density_cloud(teacher, box: Aabb, n: int, n_dirs: int = 8, seed: int = 0) -> DensityCloud:
    """Uniform points in ``box`` with teacher density and direction-averaged colour.

    Densities are rescaled to a maximum of 1 unless they are all zero.
    """
    if n < 1 or n_dirs < 1:
        raise ValueError("n and n_dirs must be >= 1")
    rng = node_rng(seed, 0, 1)
    pos = box.min + rng.random((n, 3)) * box.extent
    # keep sampled points strictly inside the half-open box used for tiling
    pos = np.minimum(pos, np.nextafter(box.max, box.min))
    sigma = np.zeros(n)
    rgb = np.zeros((n, 3))
    for _ in range(n_dirs):
        s, c = teacher.query(pos, sphere_directions(rng, n))
        sigma += s
        rgb += c
    sigma /= n_dirs
    rgb /= n_dirs
    peak = sigma.max()
    if peak > 0:
        sigma = sigma / peak
    return DensityCloud(pos, sigma, rgb)


def _f32_inside(value: float, lo: float, hi: float):
    v = float(np.float32(value))
    return v if lo < v < hi else None


BALANCE_TOL = 0.05


def choose_split(cloud: DensityCloud, box: Aabb, balance_tol: float = BALANCE_TOL):
    """Split plane at the density median on the axis that balances mass best.

    A median split balances mass on every axis up to cloud granularity, so axes
    whose relative imbalance ``|L - R| / (L + R)`` is within ``balance_tol`` count
    as tied and the one with the larger extent wins.  Without that the choice
    is decided by sampling noise and the tree grows thin slabs.

    Returns ``(axis, position, fallback)``; ``fallback`` is True when no valid
    density median exists and the longest-axis midpoint was used instead.
    Positions are rounded to float32 so boxes serialise exactly.
    """
    total = cloud.mass
    best = None
    if len(cloud) >= 2 and total > 0:
        ext = box.extent
        for axis in range(3):
            coord = cloud.positions[:, axis]
            order = np.argsort(coord, kind="stable")
            cs, cum = coord[order], np.cumsum(cloud.density[order])
            idx = int(np.searchsorted(cum, 0.5 * total, side="left"))
            if idx >= len(cs) - 1:
                continue
            pos = _f32_inside(0.5 * (cs[idx] + cs[idx + 1]), box.min[axis], box.max[axis])
            if pos is None:
                continue
            left = float(cloud.density[coord < pos].sum())
            imb = abs(left - (total - left)) / total
            key = (0.0 if imb <= balance_tol else imb, -ext[axis], axis)
            if best is None or key < best[0]:
                best = (key, axis, pos)
    if best is not None:
        return best[1], best[2], False
    axis = int(np.argmax(box.extent))
    pos = _f32_inside(box.center[axis], box.min[axis], box.max[axis])
    if pos is None:
        raise ValueError(f"box too thin to split: {box}")
    return axis, pos, True


def partition(cloud: DensityCloud, axis: int, position: float):
    right = cloud.positions[:, axis] >= position
    return cloud.subset(~right), cloud.subset(right)


# ---------------------------------------------------------------------------
# tree


@dataclass(eq=False)
class KdNode:
    box: Aabb
    code: int
    mlp: MlpParams | None = None
    score: float = math.nan
    split: tuple | None = None
    left: KdNode | None = None
    right: KdNode | None = None
    n_points: int = 0
    mass: float = 0.0
    fallback_split: bool = False

    @property
    def depth(self) -> int:
        return self.code.bit_length() - 1

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    @property
    def children(self):
        return None if self.is_leaf else (self.left, self.right)

    def set_split(self, axis: int, position: float, fallback: bool = False):
        lb, rb = aabb_split(self.box, axis, position)
        self.split = (int(axis), float(position))
        self.fallback_split = fallback
        self.left = KdNode(lb, 2 * self.code)
        self.right = KdNode(rb, 2 * self.code + 1)
        return self.left, self.right


def code_to_path(code: int) -> list[int]:
    """Left/right turns (0/1) from the root to ``code``."""
    if code < 1:
        raise ValueError("node codes start at 1")
    return [int(b) for b in bin(code)[3:]]


def path_to_code(path) -> int:
    code = 1
    for bit in path:
        code = 2 * code + int(bit)
    return code


class KdTree:
    def __init__(self, root: KdNode, arch: MlpArch, config: dict | None = None):
        self.root = root
        self.arch = arch
        self.config = dict(config or {})
        self._packed = None

    def nodes(self) -> Iterator[KdNode]:
        """Pre-order (node, left subtree, right subtree)."""
        stack = [self.root]
        while stack:
            n = stack.pop()
            yield n
            if not n.is_leaf:
                stack.append(n.right)
                stack.append(n.left)

    def leaves(self) -> list[KdNode]:
        return [n for n in self.nodes() if n.is_leaf]

    @property
    def node_count(self) -> int:
        return sum(1 for _ in self.nodes())

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def node(self, code: int) -> KdNode:
        n = self.root
        for bit in code_to_path(code):
            if n.is_leaf:
                raise KeyError(f"no node with code {code}")
            n = n.right if bit else n.left
        return n

    def depth_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for n in self.nodes():
            hist[n.depth] = hist.get(n.depth, 0) + 1
        return dict(sorted(hist.items()))

    def leaf_codes(self, x) -> np.ndarray:
        """Code of the leaf owning each point (upper faces belong to the right child)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        codes = np.ones(len(x), dtype=np.int64)
        active = np.ones(len(x), dtype=bool)
        nodes = {1: self.root}
        for n in self.nodes():
            nodes[n.code] = n
        while active.any():
            for code in np.unique(codes[active]):
                n = nodes[int(code)]
                sel = active & (codes == code)
                if n.is_leaf:
                    active &= ~sel
                    continue
                axis, pos = n.split
                codes[sel] = 2 * code + (x[sel, axis] >= pos)
        return codes

    def packed(self):
        """Flat arrays for the traversal and inference kernels; cached.

        Nodes are stored in pre-order; ``row_of_code`` maps a code to its row.
        """
        if self._packed is None:
            self._packed = FlatTree.from_tree(self)
        return self._packed

    def invalidate(self):
        self._packed = None


@dataclass(frozen=True, eq=False)
class FlatTree:
    codes: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    diag: np.ndarray
    axis: np.ndarray
    pos: np.ndarray
    left: np.ndarray
    right: np.ndarray
    params2d: np.ndarray
    row_of_code: np.ndarray

    @classmethod
    def from_tree(cls, tree: KdTree) -> FlatTree:
        nodes = list(tree.nodes())
        row = {n.code: i for i, n in enumerate(nodes)}
        row_of_code = np.full(max(row) + 1, -1, dtype=np.int64)
        for c, i in row.items():
            row_of_code[c] = i
        params2d = np.zeros((len(nodes), tree.arch.n_params))
        for i, n in enumerate(nodes):
            if n.mlp is not None:
                params2d[i] = n.mlp.flat()
        return cls(
            codes=np.array([n.code for n in nodes], dtype=np.int64),
            lo=np.array([n.box.min for n in nodes]),
            hi=np.array([n.box.max for n in nodes]),
            diag=np.array([n.box.diagonal() for n in nodes]),
            axis=np.array([-1 if n.is_leaf else n.split[0] for n in nodes], dtype=np.int64),
            pos=np.array([0.0 if n.is_leaf else n.split[1] for n in nodes]),
            left=np.array([-1 if n.is_leaf else row[n.left.code] for n in nodes], dtype=np.int64),
            right=np.array([-1 if n.is_leaf else row[n.right.code] for n in nodes], dtype=np.int64),
            params2d=params2d,
            row_of_code=row_of_code,
        )

    def rows(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        bad = (codes < 1) | (codes >= len(self.row_of_code))
        r = np.where(bad, -1, self.row_of_code[np.where(bad, 0, codes)])
        if np.any(r < 0):
            raise KeyError(f"unknown node code(s): {np.unique(codes[r < 0])[:5].tolist()}")
        return r


def normalize_to_node(box: Aabb, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(box.contains(x)):
        raise ValueError("point outside node box")
    return (x - box.min) / box.extent


# ---------------------------------------------------------------------------
# construction


def test_leaf(node: KdNode, parent_score: float, cfg: BuildConfig) -> bool:
    """True when ``node`` should stay a leaf.

    Stops at ``max_depth``, on a thin cloud slice, or when the node's score is
    within ``cfg.threshold`` (relative) of the reference: ``cfg.target_score``
    when set, otherwise ``parent_score``.
    """
    if node.depth >= cfg.max_depth:
        return True
    if node.n_points < cfg.min_points or node.mass < cfg.density_eps:
        return True
    ref = parent_score if cfg.target_score is None else cfg.target_score
    return node.score >= ref * (1.0 - cfg.threshold)


test_leaf.__test__ = False  # not a pytest test


def _train(teacher, node: KdNode, cfg: BuildConfig, empty: bool = False):
    # nodes with no density in the cloud get the closed-form empty field instead of a fit
    if empty:
        params = MlpParams.empty(cfg.arch)
    else:
        params = distill_node(teacher, node.box, cfg.arch, cfg.distill, code=node.code).params
    score = node_score(teacher, params, node.box, cfg.score_points, cfg.score_dirs,
                       seed=cfg.seed * 7919 + node.code)
    return params, float(np.float32(score))


def _train_all(teacher, nodes, cfg: BuildConfig, executor=None, use_mass=False):
    flags = [use_mass and n.mass < cfg.density_eps for n in nodes]
    if executor is None:
        results = [_train(teacher, n, cfg, e) for n, e in zip(nodes, flags)]
    else:
        futs = [executor.submit(_train, teacher, n, cfg, e) for n, e in zip(nodes, flags)]
        results = [f.result() for f in futs]
    for n, (p, s) in zip(nodes, results):
        n.mlp, n.score = p, s


def _f32_box(box: Aabb) -> Aabb:
    lo = box.min.astype(np.float32).astype(np.float64)
    hi = box.max.astype(np.float32).astype(np.float64)
    return Aabb(lo, hi)


def build_kdtree(teacher, root_box: Aabb, cfg: BuildConfig = BuildConfig(), executor=None) -> KdTree:
    """Density-aware KD-tree; every node (inner ones included) keeps its MLP.

    Nodes are expanded level by level so one level's distillations can run on
    ``executor`` (any ``concurrent.futures`` executor); seeds depend only on node
    codes, so the result does not depend on scheduling.
    """
    root = KdNode(_f32_box(root_box), 1)
    cloud = sample_density_cloud(teacher, root.box, cfg.cloud_points, cfg.cloud_dirs, cfg.seed)
    root.n_points, root.mass = len(cloud), cloud.mass
    _train_all(teacher, [root], cfg, executor, use_mass=True)
    log.info("root score %.2f dB, cloud mass %.3f", root.score, root.mass)

    # root always attempts one split when it has content
    frontier = []
    if root.depth < cfg.max_depth and root.n_points >= cfg.min_points and root.mass >= cfg.density_eps:
        frontier.append((root, cloud))
    while frontier:
        children = []
        for node, sub in frontier:
            axis, pos, fb = choose_split(sub, node.box)
            lnode, rnode = node.set_split(axis, pos, fb)
            lc, rc = partition(sub, axis, pos)
            for child, cc in ((lnode, lc), (rnode, rc)):
                child.n_points, child.mass = len(cc), cc.mass
                children.append((node, child, cc))
        _train_all(teacher, [c for _, c, _ in children], cfg, executor, use_mass=True)
        frontier = [(c, cc) for p, c, cc in children if not test_leaf(c, p.score, cfg)]
        log.info("level done: %d new nodes, %d to expand", len(children), len(frontier))
    return KdTree(root, cfg.arch, cfg.snapshot())


def build_regular_grid(teacher, root_box: Aabb, resolution: int, cfg: BuildConfig = BuildConfig(),
                       executor=None) -> KdTree:
    """Uniform ``r^3`` grid as a KD-tree of midpoint splits cycling x, y, z."""
    r = int(resolution)
    if r < 1 or r & (r - 1):
        raise ValueError(f"grid resolution must be a power of two, got {resolution}")
    levels = 3 * (r.bit_length() - 1)
    root = KdNode(_f32_box(root_box), 1)
    frontier, everything = [root], [root]
    for level in range(levels):
        nxt = []
        for n in frontier:
            axis = level % 3
            nxt.extend(n.set_split(axis, float(np.float32(n.box.center[axis]))))
        everything += nxt
        frontier = nxt
    _train_all(teacher, everything, cfg, executor)
    snap = cfg.snapshot()
    snap["grid"] = r
    return KdTree(root, cfg.arch, snap)


# ---------------------------------------------------------------------------
# serialisation: little-endian, pre-order node records

_HEADER = struct.Struct("<4sHIIIII")
_NODE = struct.Struct("<I6fBBff")


class TreeFormatError(ValueError):
    pass


def tree_to_bytes(tree: KdTree) -> bytes:
    a = tree.arch
    nodes = list(tree.nodes())
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, a.width, a.depth, a.l_pos, a.l_dir, len(nodes))]
    for n in nodes:
        if n.mlp is None:
            raise ValueError(f"node {n.code} has no MLP")
        flag, axis, pos = (0, 0, 0.0) if n.is_leaf else (1, n.split[0], n.split[1])
        out.append(_NODE.pack(n.code, *n.box.min, *n.box.max, flag, axis, pos, n.score))
        out.append(n.mlp.flat().astype("<f4").tobytes())
    return b"".join(out)


def tree_from_bytes(buf: bytes) -> KdTree:
    if len(buf) < _HEADER.size:
        raise TreeFormatError("truncated header")
    magic, version, width, depth, l_pos, l_dir, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TreeFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TreeFormatError(f"unsupported format version {version}")
    try:
        arch = MlpArch(width, depth, l_pos, l_dir)
    except ValueError as e:
        raise TreeFormatError(str(e)) from e
    blob = 4 * arch.n_params
    off = _HEADER.size
    records = []
    for _ in range(count):
        if off + _NODE.size + blob > len(buf):
            raise TreeFormatError("truncated node record")
        code, x0, y0, z0, x1, y1, z1, flag, axis, pos, score = _NODE.unpack_from(buf, off)
        off += _NODE.size
        params = np.frombuffer(buf, dtype="<f4", count=arch.n_params, offset=off)
        off += blob
        records.append((code, (x0, y0, z0), (x1, y1, z1), flag, axis, pos, score, params))
    if off != len(buf):
        raise TreeFormatError("trailing bytes after last node")

    it = iter(records)

    def read(expected_code):
        try:
            code, lo, hi, flag, axis, pos, score, params = next(it)
        except StopIteration:
            raise TreeFormatError("node records end early") from None
        if code != expected_code:
            raise TreeFormatError(f"expected node {expected_code}, found {code}")
        try:
            node = KdNode(Aabb(lo, hi), code, MlpParams.from_flat(arch, params), float(score))
        except ValueError as e:
            raise TreeFormatError(str(e)) from e
        if flag:
            try:
                lb, rb = aabb_split(node.box, axis, pos)
            except ValueError as e:
                raise TreeFormatError(str(e)) from e
            node.split = (int(axis), float(pos))
            node.left = read(2 * code)
            node.right = read(2 * code + 1)
            if node.left.box != lb or node.right.box != rb:
                raise TreeFormatError(f"children of node {code} do not match its split")
        return node

    root = read(1)
    return KdTree(root, arch)


def save_tree(tree: KdTree, path) -> None:
    with open(path, "wb") as f:
        f.write(tree_to_bytes(tree))


def load_tree(path) -> KdTree:
    with open(path, "rb") as f:
        return tree_from_bytes(f.read())
