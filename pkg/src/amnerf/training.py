"""Distilling a small MLP from a teacher field over one box, and scoring it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .field import MlpArch, MlpParams, encode_inputs, sphere_directions
from .geometry import Aabb

SIGMA_CAP = 20.0
PSNR_CAP = 99.0


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 2000
    batch_size: int = 1024
    dirs_per_point: int = 1
    lr: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.dirs_per_point < 1 or not self.lr > 0:
            raise ValueError("batch_size, dirs_per_point and lr must be positive")


# ---------------------------------------------------------------------------
# forward / backward on plain arrays


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(weights, biases, X):
    acts = [X]
    h = X
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def loss_and_grads(weights, biases, X, sigma_t, rgb_t, need_grad=True):
    """Mean of ``(sigma - sigma*)^2 + |rgb - rgb*|^2`` and its parameter gradients."""
    acts = _forward(weights, biases, X)
    out = acts[-1]
    n = X.shape[0]
    sigma = _softplus(out[:, 0])
    rgb = _sigmoid(out[:, 1:4])
    rs, rc = sigma - sigma_t, rgb - rgb_t
    loss = float((np.sum(rs * rs) + np.sum(rc * rc)) / n)
    if not need_grad:
        return loss, None, None
    g = np.empty_like(out)
    g[:, 0] = (2.0 / n) * rs * _sigmoid(out[:, 0])
    g[:, 1:4] = (2.0 / n) * rc * rgb * (1.0 - rgb)
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ weights[i].T) * (acts[i] > 0.0)
    return loss, gw, gb


def _check_batch(arch: MlpArch, xn, d, sigma_t, rgb_t):
    xn = np.asarray(xn, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    sigma_t = np.asarray(sigma_t, dtype=np.float64).reshape(-1)
    rgb_t = np.asarray(rgb_t, dtype=np.float64).reshape(-1, 3)
    n = xn.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if d.shape[0] != n or sigma_t.shape[0] != n or rgb_t.shape[0] != n:
        raise ValueError("batch and target lengths differ")
    return encode_inputs(xn, d, arch.l_pos, arch.l_dir), sigma_t, rgb_t


def mlp_loss(params: MlpParams, xn, d, sigma_t, rgb_t) -> float:
    X, sigma_t, rgb_t = _check_batch(params.arch, xn, d, sigma_t, rgb_t)
    ws = [w.astype(np.float64) for w in params.weights]
    bs = [b.astype(np.float64) for b in params.biases]
    return loss_and_grads(ws, bs, X, sigma_t, rgb_t, need_grad=False)[0]


def mlp_backward(params, xn, d, sigma_t, rgb_t):
    """Gradients of the distillation loss, as ``(weight_grads, bias_grads)``.

    ``params`` is an :class:`MlpParams` or a ``(arch, weights, biases)`` triple of
    float64 arrays (used by the finite-difference check).
    """
    if isinstance(params, MlpParams):
        arch = params.arch
        ws = [w.astype(np.float64) for w in params.weights]
        bs = [b.astype(np.float64) for b in params.biases]
    else:
        arch, ws, bs = params
        for (a, b), w, bias in zip(arch.layer_shapes(), ws, bs):
            if w.shape != (a, b) or bias.shape != (b,):
                raise ValueError("parameter shapes do not match architecture")
    X, sigma_t, rgb_t = _check_batch(arch, xn, d, sigma_t, rgb_t)
    _, gw, gb = loss_and_grads(ws, bs, X, sigma_t, rgb_t)
    return gw, gb


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, arrays, **hyper) -> AdamState:
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def _adam_inplace(params, grads, st: AdamState):
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam on a list of arrays; returns new ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ValueError("parameter, gradient and moment shapes differ")
    new_p = [np.array(p, dtype=np.float64) for p in params]
    new_s = AdamState([m.copy() for m in state.m], [v.copy() for v in state.v], state.step,
                      state.lr, state.beta1, state.beta2, state.eps)
    _adam_inplace(new_p, [np.asarray(g, dtype=np.float64) for g in grads], new_s)
    return new_p, new_s


# ---------------------------------------------------------------------------
# distillation


def node_rng(seed: int, code: int, stream: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, node code, stream), independent of build order."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, code, stream]))


def _draw_batch(teacher, box: Aabb, rng, n_points: int, n_dirs: int):
    u = rng.random((n_points, 3))
    xn = np.repeat(u, n_dirs, axis=0)
    d = sphere_directions(rng, n_points * n_dirs)
    sigma_t, rgb_t = teacher.query(box.min + xn * box.extent, d)
    return xn, d, sigma_t, rgb_t


@dataclass
class DistillResult:
    params: MlpParams
    final_loss: float
    losses: list = field(default_factory=list)


def distill_node(teacher, box: Aabb, arch: MlpArch, cfg: DistillConfig, code: int = 1) -> DistillResult:
    """Fit a student MLP to ``teacher`` over ``box``.

    Each iteration draws fresh uniform positions (normalised to the box cube) and
    sphere directions, queries the teacher and takes one Adam step.  Seeds come
    from ``(cfg.seed, code)`` so siblings can be trained in any order.
    """
    rng = node_rng(cfg.seed, code, 0)
    init = MlpParams.he_uniform(arch, rng)
    if cfg.iterations == 0:
        return DistillResult(init, math.nan, [])
    ws = [w.copy() for w in init.weights]
    bs = [b.copy() for b in init.biases]
    params = ws + bs
    st = AdamState.like(params, lr=cfg.lr)
    n_pts = max(1, cfg.batch_size // cfg.dirs_per_point)
    losses = []
    for _ in range(cfg.iterations):
        xn, d, sigma_t, rgb_t = _draw_batch(teacher, box, rng, n_pts, cfg.dirs_per_point)
        X = encode_inputs(xn, d, arch.l_pos, arch.l_dir, np.float32)
        loss, gw, gb = loss_and_grads(ws, bs, X, sigma_t.astype(np.float32), rgb_t.astype(np.float32))
        losses.append(loss)
        _adam_inplace(params, gw + gb, st)
    return DistillResult(MlpParams(arch, tuple(ws), tuple(bs)), losses[-1], losses)


def node_score(teacher, student, box: Aabb, n_points: int = 2048, n_dirs: int = 2, seed: int = 0) -> float:
    """PSNR (dB) of the student against the teacher on a seeded point set in ``box``.

    Residuals are taken over four channels: density clamped to ``[0, SIGMA_CAP]``
    and divided by the cap, plus rgb.  ``student`` is anything with ``query``
    working in world coordinates, or an :class:`MlpParams` bound to ``box``.
    """
    if n_points < 1 or n_dirs < 1:
        raise ValueError("n_points and n_dirs must be >= 1")
    from .field import MlpField

    if isinstance(student, MlpParams):
        student = MlpField(student, box)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5C07E]))
    xn = np.repeat(rng.random((n_points, 3)), n_dirs, axis=0)
    d = sphere_directions(rng, n_points * n_dirs)
    x = box.min + xn * box.extent
    s_t, c_t = teacher.query(x, d)
    s_s, c_s = student.query(x, d)
    return psnr_from_residuals(
        np.column_stack([np.clip(s_s, 0, SIGMA_CAP) / SIGMA_CAP, c_s]),
        np.column_stack([np.clip(s_t, 0, SIGMA_CAP) / SIGMA_CAP, c_t]),
    )


def psnr_from_residuals(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))
