"""Radiance fields: analytic blob scenes (the teacher) and small MLP fields.

Every field answers ``query(x, d) -> (sigma, rgb)`` for ``(n, 3)`` positions and
unit directions, returning ``(n,)`` densities and ``(n, 3)`` colours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numba
import numpy as np

from .geometry import Aabb

# softplus(-40) = 4.2e-18: an empty node's density is zero for every practical purpose
EMPTY_SIGMA_BIAS = -40.0


class RadianceField(Protocol):
    def query(self, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class FieldSample:
    sigma: float
    rgb: tuple[float, float, float]

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise ValueError("sigma must be non-negative")
        if not all(0.0 <= c <= 1.0 for c in self.rgb):
            raise ValueError("rgb channels must lie in [0, 1]")


def frequency_encode(p, L: int) -> np.ndarray:
    """``(sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p))``.

    ``p`` may be a scalar or an array; frequencies go on a new trailing axis.
    """
    if L < 0:
        raise ValueError("L must be non-negative")
    p = np.asarray(p, dtype=np.float64)
    arg = np.multiply.outer(p, np.pi * 2.0 ** np.arange(L))
    out = np.empty(arg.shape[:-1] + (2 * L,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def encode_inputs(xn: np.ndarray, d: np.ndarray, l_pos: int, l_dir: int, dtype=np.float64) -> np.ndarray:
    """Network input rows for node-normalised positions ``xn`` in [0, 1]^3.

    Layout per row: ``[p(3), enc(p)(6*l_pos), d(3), enc(d)(6*l_dir)]`` where
    ``p = 2*xn - 1`` and each coordinate's encoding is contiguous.  Higher
    octaves come from double-angle recurrences, which is cheaper than calling
    sin/cos per octave and accurate to a few ulp for the small L used here.
    """
    p = (2.0 * np.asarray(xn, dtype=np.float64) - 1.0).astype(dtype)
    d = np.asarray(d, dtype=dtype)
    n = p.shape[0]
    out = np.empty((n, input_dim(l_pos, l_dir)), dtype=dtype)
    out[:, 0:3] = p
    _octaves(p, l_pos, out[:, 3:3 + 6 * l_pos])
    j = 3 + 6 * l_pos
    out[:, j:j + 3] = d
    _octaves(d, l_dir, out[:, j + 3:])
    return out


def _octaves(p, L, dst):
    if L == 0:
        return
    view = dst.reshape(p.shape[0], 3, L, 2)
    s, c = np.sin(np.pi * p), np.cos(np.pi * p)
    for level in range(L):
        view[:, :, level, 0] = s
        view[:, :, level, 1] = c
        s, c = 2.0 * s * c, (c - s) * (c + s)


def input_dim(l_pos: int, l_dir: int) -> int:
    return 6 * l_pos + 6 * l_dir + 6


# ---------------------------------------------------------------------------
# MLP parameters


@dataclass(frozen=True, eq=False)
class MlpArch:
    width: int = 32
    depth: int = 4
    l_pos: int = 4
    l_dir: int = 2

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.l_pos < 0 or self.l_dir < 0:
            raise ValueError(f"invalid architecture {self}")

    def __eq__(self, other):
        return isinstance(other, MlpArch) and self.as_tuple() == other.as_tuple()

    def __hash__(self):
        return hash(self.as_tuple())

    def as_tuple(self):
        return (self.width, self.depth, self.l_pos, self.l_dir)

    @property
    def in_dim(self) -> int:
        return input_dim(self.l_pos, self.l_dir)

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.width] * self.depth + [4]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes())


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights ``(fan_in, fan_out)`` and biases of a ReLU MLP with a 4-channel head.

    Stored as float32 so the on-disk tree format round-trips exactly.
    """

    arch: MlpArch
    weights: tuple
    biases: tuple

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match architecture")
        ws, bs = [], []
        for (a, b), w, bias in zip(shapes, self.weights, self.biases):
            w = np.array(w, dtype=np.float32)
            bias = np.array(bias, dtype=np.float32)
            if w.shape != (a, b) or bias.shape != (b,):
                raise ValueError(f"layer shape {w.shape}/{bias.shape} != {(a, b)}/{(b,)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(bias))):
                raise ValueError("MLP parameters must be finite")
            w.setflags(write=False)
            bias.setflags(write=False)
            ws.append(w)
            bs.append(bias)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def width(self):
        return self.arch.width

    @property
    def depth(self):
        return self.arch.depth

    @classmethod
    def zeros(cls, arch: MlpArch) -> MlpParams:
        shapes = arch.layer_shapes()
        return cls(arch, tuple(np.zeros(s) for s in shapes), tuple(np.zeros(s[1]) for s in shapes))

    @classmethod
    def empty(cls, arch: MlpArch) -> MlpParams:
        """Zero weights with a large negative density bias: sigma ~ 4e-18 everywhere."""
        p = cls.zeros(arch)
        bs = list(p.biases)
        bs[-1] = bs[-1].copy()
        bs[-1][0] = EMPTY_SIGMA_BIAS
        return cls(arch, p.weights, tuple(bs))

    @classmethod
    def he_uniform(cls, arch: MlpArch, rng: np.random.Generator) -> MlpParams:
        ws, bs = [], []
        for a, b in arch.layer_shapes():
            lim = math.sqrt(6.0 / a)
            ws.append(rng.uniform(-lim, lim, size=(a, b)))
            bs.append(np.zeros(b))
        return cls(arch, tuple(ws), tuple(bs))

    def flat(self) -> np.ndarray:
        """All parameters as one float32 vector, layer by layer (W then b)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: MlpArch, v) -> MlpParams:
        v = np.asarray(v, dtype=np.float32)
        if v.size != arch.n_params:
            raise ValueError(f"expected {arch.n_params} parameters, got {v.size}")
        ws, bs, i = [], [], 0
        for a, b in arch.layer_shapes():
            ws.append(v[i:i + a * b].reshape(a, b))
            i += a * b
            bs.append(v[i:i + b])
            i += b
        return cls(arch, tuple(ws), tuple(bs))

    def identical(self, other: MlpParams) -> bool:
        return self.arch == other.arch and np.array_equal(self.flat(), other.flat())


# ---------------------------------------------------------------------------
# Inference kernel.  Accumulation runs over fan-in in a fixed order for every
# row, so a sample's output never depends on which batch it is evaluated in.


@numba.njit(cache=True, nogil=True)
def _softplus(v):
    if v > 30.0:
        return v + math.log1p(math.exp(-v))
    return math.log1p(math.exp(v))


@numba.njit(cache=True, nogil=True)
def _sigmoid(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@numba.njit(cache=True, nogil=True)
def _encode_row(xn, d, l_pos, l_dir, feat):
    j = 0
    for k in range(3):
        feat[j] = 2.0 * xn[k] - 1.0
        j += 1
    for k in range(3):
        p = 2.0 * xn[k] - 1.0
        f = math.pi
        for _ in range(l_pos):
            feat[j] = math.sin(f * p)
            feat[j + 1] = math.cos(f * p)
            j += 2
            f *= 2.0
    for k in range(3):
        feat[j] = d[k]
        j += 1
    for k in range(3):
        f = math.pi
        for _ in range(l_dir):
            feat[j] = math.sin(f * d[k])
            feat[j + 1] = math.cos(f * d[k])
            j += 2
            f *= 2.0


@numba.njit(cache=True, nogil=True)
def _forward_row(flat, width, depth, l_pos, l_dir, xn, d, feat, h0, h1, out):
    """One sample through one MLP; writes sigma to out[0] and rgb to out[1:4]."""
    n_in = 6 * l_pos + 6 * l_dir + 6
    _encode_row(xn, d, l_pos, l_dir, feat)
    src = feat
    fan_in = n_in
    off = 0
    for layer in range(depth + 1):
        fan_out = width if layer < depth else 4
        dst = h0 if layer % 2 == 0 else h1
        boff = off + fan_in * fan_out
        for j in range(fan_out):
            dst[j] = 0.0
        for k in range(fan_in):
            v = src[k]
            row = off + k * fan_out
            for j in range(fan_out):
                dst[j] += v * flat[row + j]
        for j in range(fan_out):
            dst[j] += flat[boff + j]
            if layer < depth and dst[j] < 0.0:
                dst[j] = 0.0
        off = boff + fan_out
        src = dst
        fan_in = fan_out
    out[0] = _softplus(src[0])
    for c in range(3):
        out[1 + c] = _sigmoid(src[1 + c])


@numba.njit(cache=True, nogil=True)
def forward_rows(params2d, rows, width, depth, l_pos, l_dir, xn, d, sigma, rgb):
    """Evaluate sample i with the MLP in ``params2d[rows[i]]``."""
    n_in = 6 * l_pos + 6 * l_dir + 6
    feat = np.empty(n_in)
    h0 = np.empty(max(width, 4))
    h1 = np.empty(max(width, 4))
    out = np.empty(4)
    for i in range(xn.shape[0]):
        _forward_row(params2d[rows[i]], width, depth, l_pos, l_dir, xn[i], d[i], feat, h0, h1, out)
        sigma[i] = out[0]
        rgb[i, 0] = out[1]
        rgb[i, 1] = out[2]
        rgb[i, 2] = out[3]


def mlp_forward_many(params: MlpParams, xn, d):
    xn = np.ascontiguousarray(xn, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(d, dtype=np.float64).reshape(-1, 3)
    n = xn.shape[0]
    sigma, rgb = np.empty(n), np.empty((n, 3))
    a = params.arch
    forward_rows(params.flat().astype(np.float64)[None, :], np.zeros(n, dtype=np.int64),
                 a.width, a.depth, a.l_pos, a.l_dir, xn, d, sigma, rgb)
    return sigma, rgb


def mlp_forward(params: MlpParams, x, d) -> FieldSample:
    """Single-sample forward pass; ``x`` is already normalised to the node cube."""
    sigma, rgb = mlp_forward_many(params, x, d)
    return FieldSample(float(sigma[0]), tuple(float(c) for c in rgb[0]))


class MlpField:
    """An MLP bound to a box: world positions are normalised before encoding."""

    def __init__(self, params: MlpParams, box: Aabb):
        self.params = params
        self.box = box

    def query(self, x, d):
        xn = (np.asarray(x, dtype=np.float64) - self.box.min) / self.box.extent
        return mlp_forward_many(self.params, xn, d)


# ---------------------------------------------------------------------------
# Analytic teacher


def _fibonacci_dir(i: int) -> np.ndarray:
    golden = math.pi * (3.0 - math.sqrt(5.0))
    z = 1.0 - 2.0 * ((i * 0.618033988749895 + 0.5) % 1.0)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * math.cos(golden * i), r * math.sin(golden * i), z])


@dataclass(frozen=True, eq=False)
class Blob:
    center: np.ndarray
    stddev: float
    amplitude: float
    color: np.ndarray
    view_dependence: float = 0.0
    view_axis: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        if not (self.stddev > 0 and self.amplitude > 0):
            raise ValueError("blob stddev and amplitude must be positive")
        if not np.all((self.color >= 0) & (self.color <= 1)):
            raise ValueError("blob colour must lie in [0, 1]")
        if not 0.0 <= self.view_dependence <= 1.0:
            raise ValueError("view_dependence must lie in [0, 1]")
        if self.view_axis is not None:
            u = np.asarray(self.view_axis, dtype=np.float64).reshape(3)
            object.__setattr__(self, "view_axis", u / np.linalg.norm(u))


@dataclass(frozen=True, eq=False)
class AnalyticScene:
    """Sum of isotropic Gaussian density blobs inside ``domain``.

    Colour is the density-weighted mean of blob colours, each dimmed by
    ``1 - v + v * max(0, d . u)`` for view dependence ``v`` and a fixed axis ``u``
    (per-blob; a Fibonacci-sphere direction when not given).
    """

    blobs: tuple
    domain: Aabb

    def __post_init__(self):
        blobs = []
        for i, b in enumerate(self.blobs):
            if b.view_axis is None:
                b = Blob(b.center, b.stddev, b.amplitude, b.color, b.view_dependence, _fibonacci_dir(i))
            if not bool(self.domain.contains(b.center)):
                raise ValueError(f"blob centre {b.center} outside domain")
            blobs.append(b)
        object.__setattr__(self, "blobs", tuple(blobs))

    def query(self, x, d):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        sigma = np.zeros(len(x))
        crgb = np.zeros((len(x), 3))
        for b in self.blobs:
            r2 = np.sum((x - b.center) ** 2, axis=1)
            s = b.amplitude * np.exp(-r2 / (2.0 * b.stddev ** 2))
            mod = 1.0 - b.view_dependence + b.view_dependence * np.maximum(0.0, d @ b.view_axis)
            sigma += s
            crgb += (s * mod)[:, None] * b.color
        inside = self.domain.contains(x)
        sigma = np.where(inside, sigma, 0.0)
        pos = sigma > 0.0
        rgb = np.zeros_like(crgb)
        rgb[pos] = crgb[pos] / sigma[pos, None]
        return sigma, np.clip(rgb, 0.0, 1.0)

    def lipschitz_bound(self) -> float:
        return sum(b.amplitude / (b.stddev * math.exp(0.5)) for b in self.blobs)


def analytic_field_eval(scene: AnalyticScene, x, d) -> FieldSample:
    sigma, rgb = scene.query(x, d)
    return FieldSample(float(sigma[0]), tuple(float(c) for c in rgb[0]))


def sphere_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
