import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from amnerf.field import (AnalyticScene, Blob, FieldSample, MlpArch, MlpParams, analytic_field_eval,
                          encode_inputs, frequency_encode, input_dim, mlp_forward, mlp_forward_many)
from amnerf.geometry import Aabb

UNIT = Aabb((0, 0, 0), (1, 1, 1))


def test_field_sample_ranges():
    FieldSample(0.0, (0.0, 0.5, 1.0))
    with pytest.raises(ValueError):
        FieldSample(-1e-9, (0, 0, 0))
    with pytest.raises(ValueError):
        FieldSample(1.0, (0, 1.01, 0))


def test_encode_examples():
    assert np.allclose(frequency_encode(0.0, 4), [0, 1, 0, 1, 0, 1, 0, 1])
    assert np.allclose(frequency_encode(0.5, 2), [1, 0, 0, -1], atol=1e-15)
    assert frequency_encode(0.3, 0).shape == (0,)


@given(p=st.floats(-1, 1), L=st.integers(0, 8), k=st.integers(-3, 3))
def test_encode_periodic_and_bounded(p, L, k):
    a = frequency_encode(p, L)
    b = frequency_encode(p + 2 * k, L)
    assert np.all(np.abs(a) <= 1.0)
    assert np.allclose(a, b, atol=1e-9 * (1 + abs(k)) * 2 ** L)


def test_encode_inputs_matches_direct(rng):
    xn = rng.random((64, 3))
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    X = encode_inputs(xn, d, 4, 2)
    p = 2 * xn - 1
    ref = np.concatenate([p, frequency_encode(p, 4).reshape(64, -1), d, frequency_encode(d, 2).reshape(64, -1)],
                         axis=1)
    assert X.shape == (64, input_dim(4, 2)) == (64, 42)
    assert np.allclose(X, ref, atol=1e-12)


def test_zero_params_forward():
    out = mlp_forward(MlpParams.zeros(MlpArch()), (0.3, 0.2, 0.9), (0, 0, 1))
    assert out.sigma == pytest.approx(math.log(2.0))
    assert out.rgb == pytest.approx((0.5, 0.5, 0.5))


def test_empty_params_have_no_density():
    out = mlp_forward(MlpParams.empty(MlpArch()), (0.3, 0.2, 0.9), (0, 0, 1))
    assert 0 <= out.sigma < 1e-17 and out.rgb == pytest.approx((0.5, 0.5, 0.5))


def test_params_validation():
    arch = MlpArch(width=4, depth=1, l_pos=1, l_dir=0)
    ws = [np.zeros(s) for s in arch.layer_shapes()]
    bs = [np.zeros(s[1]) for s in arch.layer_shapes()]
    ws[0][0, 0] = np.nan
    with pytest.raises(ValueError):
        MlpParams(arch, tuple(ws), tuple(bs))
    with pytest.raises(ValueError):
        MlpParams(arch, tuple(ws[:1]), tuple(bs[:1]))
    assert arch.layer_shapes() == [(input_dim(1, 0), 4), (4, 4)]


def test_dead_neuron_padding_is_exact(rng):
    small = MlpArch(width=8, depth=3, l_pos=2, l_dir=1)
    big = MlpArch(width=16, depth=3, l_pos=2, l_dir=1)
    p = MlpParams.he_uniform(small, rng)
    ws, bs = [], []
    for i, ((a, b), w, bias) in enumerate(zip(big.layer_shapes(), p.weights, p.biases)):
        W = np.zeros((a, b), np.float32)
        B = np.zeros(b, np.float32)
        W[:w.shape[0], :w.shape[1]] = w
        B[:bias.shape[0]] = bias
        ws.append(W)
        bs.append(B)
    q = MlpParams(big, tuple(ws), tuple(bs))
    xn = rng.random((200, 3))
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    s1, c1 = mlp_forward_many(p, xn, d)
    s2, c2 = mlp_forward_many(q, xn, d)
    assert np.array_equal(s1, s2) and np.array_equal(c1, c2)


def test_forward_deterministic_and_batch_independent(rng):
    p = MlpParams.he_uniform(MlpArch(), rng)
    xn = rng.random((50, 3))
    d = np.tile([0.0, 0.0, 1.0], (50, 1))
    s_all, c_all = mlp_forward_many(p, xn, d)
    s_one = np.array([mlp_forward(p, xn[i], d[i]).sigma for i in range(50)])
    assert np.array_equal(s_all, s_one)
    s2, c2 = mlp_forward_many(p, xn, d)
    assert np.array_equal(s_all, s2) and np.array_equal(c_all, c2)


def test_forward_matches_numpy_reference(rng):
    arch = MlpArch(width=16, depth=3, l_pos=3, l_dir=1)
    p = MlpParams.he_uniform(arch, rng)
    xn = rng.random((30, 3))
    d = rng.normal(size=(30, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    h = encode_inputs(xn, d, 3, 1)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.astype(float) + b
        if i < len(p.weights) - 1:
            h = np.maximum(h, 0)
    s, c = mlp_forward_many(p, xn, d)
    assert np.allclose(s, np.logaddexp(0, h[:, 0]), rtol=1e-10, atol=1e-12)
    assert np.allclose(c, 1 / (1 + np.exp(-h[:, 1:])), rtol=1e-10, atol=1e-12)


@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 30))
def test_forward_outputs_always_valid(seed, scale):
    r = np.random.default_rng(seed)
    arch = MlpArch(width=8, depth=2, l_pos=2, l_dir=1)
    shapes = arch.layer_shapes()
    p = MlpParams(arch, tuple(r.normal(size=s) * scale for s in shapes),
                  tuple(r.normal(size=s[1]) * scale for s in shapes))
    s, c = mlp_forward_many(p, r.random((20, 3)), np.tile([1.0, 0, 0], (20, 1)))
    assert np.all(s >= 0) and np.all(np.isfinite(s))
    assert np.all((c >= 0) & (c <= 1))


def test_flat_roundtrip(rng):
    p = MlpParams.he_uniform(MlpArch(width=12, depth=2, l_pos=2, l_dir=2), rng)
    q = MlpParams.from_flat(p.arch, p.flat())
    assert p.identical(q)
    assert p.flat().size == p.arch.n_params


# ---------------------------------------------------------------------------
# analytic teacher

def test_blob_peak_and_one_sigma():
    b = Blob((0.5, 0.5, 0.5), 0.1, 7.0, (1, 0, 0))
    sc = AnalyticScene((b,), UNIT)
    assert analytic_field_eval(sc, (0.5, 0.5, 0.5), (0, 0, 1)).sigma == pytest.approx(7.0)
    assert analytic_field_eval(sc, (0.6, 0.5, 0.5), (0, 0, 1)).sigma == pytest.approx(7.0 * math.exp(-0.5))


def test_outside_domain_is_empty():
    sc = AnalyticScene((Blob((0.5, 0.5, 0.5), 0.3, 7.0, (1, 1, 0)),), UNIT)
    s, c = sc.query([[1.2, 0.5, 0.5]], [[0, 0, 1]])
    assert s[0] == 0.0 and np.all(c[0] == 0.0)


def test_no_view_dependence_means_direction_free(rng):
    sc = AnalyticScene((Blob((0.4, 0.5, 0.5), 0.2, 5.0, (0.2, 0.7, 0.3)),
                        Blob((0.6, 0.5, 0.5), 0.1, 9.0, (0.9, 0.1, 0.5))), UNIT)
    x = np.tile([0.5, 0.5, 0.5], (100, 1))
    d = rng.normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    _, c = sc.query(x, d)
    assert np.allclose(c, c[0], atol=0, rtol=0)


def test_view_dependence_modulates():
    b = Blob((0.5, 0.5, 0.5), 0.2, 5.0, (1.0, 1.0, 1.0), 0.5, (0, 0, 1))
    sc = AnalyticScene((b,), UNIT)
    _, front = sc.query([[0.5, 0.5, 0.5]], [[0, 0, 1]])
    _, back = sc.query([[0.5, 0.5, 0.5]], [[0, 0, -1]])
    assert front[0] == pytest.approx([1, 1, 1]) and back[0] == pytest.approx([0.5, 0.5, 0.5])


def test_scene_validation():
    with pytest.raises(ValueError):
        AnalyticScene((Blob((1.5, 0.5, 0.5), 0.1, 1.0, (1, 0, 0)),), UNIT)
    with pytest.raises(ValueError):
        Blob((0.5, 0.5, 0.5), 0.0, 1.0, (1, 0, 0))
    with pytest.raises(ValueError):
        Blob((0.5, 0.5, 0.5), 0.1, 1.0, (1, 0, 0), view_dependence=1.5)


@given(seed=st.integers(0, 2**31))
def test_lipschitz_bound_holds(seed):
    r = np.random.default_rng(seed)
    blobs = tuple(Blob(r.uniform(0.2, 0.8, 3), r.uniform(0.03, 0.3), r.uniform(0.5, 50), r.random(3))
                  for _ in range(r.integers(1, 4)))
    sc = AnalyticScene(blobs, UNIT)
    lip = sc.lipschitz_bound()
    x = r.uniform(0.05, 0.95, (200, 3))
    eps = r.normal(size=(200, 3)) * 1e-4
    d = np.tile([0, 0, 1.0], (200, 1))
    s0, _ = sc.query(x, d)
    s1, _ = sc.query(x + eps, d)
    assert np.all(np.abs(s1 - s0) <= lip * np.linalg.norm(eps, axis=1) * (1 + 1e-6) + 1e-12)
