import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, strategies as st

from amnerf.geometry import Camera
from amnerf.sampling import HCheckParams, SamplingConfig
from amnerf.scheduler import (composite_ray, composite_weights, infer_batches, render_rays,
                              sort_samples_by_node)


def test_sort_example():
    perm, batches = sort_samples_by_node([5, 2, 5])
    assert list(perm) == [1, 0, 2]
    assert [(b.node_code, b.start, b.stop) for b in batches] == [(2, 0, 1), (5, 1, 3)]
    perm, batches = sort_samples_by_node([])
    assert len(perm) == 0 and batches == []


@given(codes=st.lists(st.integers(1, 40), max_size=200))
def test_sort_groups_and_is_stable(codes):
    perm, batches = sort_samples_by_node(codes)
    assert sorted(perm) == list(range(len(codes)))
    assert sum(len(b) for b in batches) == len(codes)
    for b in batches:
        idx = perm[b.start:b.stop]
        assert all(codes[i] == b.node_code for i in idx)
        assert list(idx) == sorted(idx)
    assert len({b.node_code for b in batches}) == len(batches)


def _cam_rays(w=10, h=8):
    cam = Camera.look_at((1.9, 1.4, 2.2), (0.5, 0.5, 0.5), width=w, height=h)
    return cam, *cam.ray_arrays()


def test_zero_mlp_sample():
    from amnerf.field import MlpParams
    from amnerf.subdivision import KdNode, KdTree
    from conftest import TINY_ARCH, UNIT

    root = KdNode(UNIT, 1)
    root.mlp, root.score = MlpParams.zeros(TINY_ARCH), 0.0
    tree = KdTree(root, TINY_ARCH)
    x = np.array([[0.2, 0.3, 0.4]])
    perm, batches = sort_samples_by_node([1])
    s, c = infer_batches(tree, x, np.array([[0, 0, 1.0]]), [1], perm, batches)
    assert s[0] == pytest.approx(math.log(2)) and np.allclose(c, 0.5)


def test_batch_order_does_not_matter(small_tree, rng):
    x = rng.random((300, 3))
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    codes = small_tree.leaf_codes(x)
    perm, batches = sort_samples_by_node(codes)
    s0, c0 = infer_batches(small_tree, x, d, codes, perm, batches)
    order = rng.permutation(len(batches))
    with ThreadPoolExecutor(4) as ex:
        s1, c1 = infer_batches(small_tree, x, d, codes, perm, batches, order=order, executor=ex)
    assert np.array_equal(s0, s1) and np.array_equal(c0, c1)


def test_composite_examples():
    # one sample with sigma 1 over a unit segment: 1 - e^-1 of its colour, e^-1 of the background
    c = composite_ray([0.0], [1.0], [[1, 0, 0]], 1.0, background=(0, 1, 0))
    assert c == pytest.approx([0.63212056, 0.36787944, 0.0], abs=1e-7)
    assert composite_ray([], [], np.zeros((0, 3)), 0.0, background=(0.2, 0.3, 0.4)) == pytest.approx([0.2, 0.3, 0.4])
    # opaque first sample hides everything behind it
    c = composite_ray([0.0, 1.0], [1e4, 1.0], [[0, 0, 1], [1, 0, 0]], 2.0)
    assert c == pytest.approx([0, 0, 1], abs=1e-6)


def test_composite_fine_quadrature_oracle():
    # constant medium on [0, 1]: the piecewise-constant sum must agree with a 1e5-step march
    n = 100_000
    t = np.linspace(0, 1, n, endpoint=False)
    c_fine = composite_ray(t, np.ones(n), np.tile([1.0, 0, 0], (n, 1)), 1.0, background=(0, 1, 0), tau_stop=0)
    c_one = composite_ray([0.0], [1.0], [[1, 0, 0]], 1.0, background=(0, 1, 0), tau_stop=0)
    assert np.allclose(c_fine, c_one, atol=1e-9)
    assert c_one == pytest.approx([1 - math.exp(-1), math.exp(-1), 0.0], abs=1e-12)


@given(n=st.integers(1, 40), seed=st.integers(0, 2**31))
def test_weights_partition_of_unity(n, seed):
    r = np.random.default_rng(seed)
    t = np.sort(r.random(n) * 5)
    sigma = r.random(n) * r.choice([0.1, 1, 30])
    w, T = composite_weights(t, sigma, 5.0)
    assert np.all(w >= 0)
    assert w.sum() + T == pytest.approx(1.0, abs=1e-12)
    # transmittance telescopes to exp of the total optical depth
    delta = np.diff(np.append(t, 5.0))
    assert T == pytest.approx(math.exp(-np.sum(sigma * delta)), rel=1e-9, abs=1e-12)
    # with a white medium and black background the colour is the total weight
    c = composite_ray(t, sigma, np.ones((n, 3)), 5.0, tau_stop=0)
    assert c == pytest.approx([w.sum()] * 3, abs=1e-12)


@given(n=st.integers(1, 60), seed=st.integers(0, 2**31))
def test_early_termination_error_bound(n, seed):
    r = np.random.default_rng(seed)
    t = np.sort(r.random(n) * 3)
    sigma = r.random(n) * 50
    rgb = r.random((n, 3))
    bg = r.random(3)
    full = composite_ray(t, sigma, rgb, 3.0, bg, tau_stop=0)
    early = composite_ray(t, sigma, rgb, 3.0, bg, tau_stop=1e-4)
    assert np.all(np.abs(full - early) <= 1e-4)


def test_composite_validation():
    with pytest.raises(ValueError):
        composite_ray([1.0, 0.5], [1, 1], np.zeros((2, 3)), 2.0)
    with pytest.raises(ValueError):
        composite_ray([0.0, 0.5], [1, 1], np.zeros((2, 3)), 0.2)
    with pytest.raises(ValueError):
        composite_ray([0.0], [1, 1], np.zeros((2, 3)), 1.0)


@pytest.mark.parametrize("hcheck", [False, True])
@pytest.mark.parametrize("mode", ["stratified", "halton"])
def test_batched_equals_naive(small_tree, hcheck, mode):
    cam, o, d = _cam_rays()
    hp = HCheckParams.for_camera(cam, 4.0) if hcheck else None
    cfg = SamplingConfig(budget=6, mode=mode, seed=2)
    cb, sb = render_rays(small_tree, o, d, hp, cfg, path="batched", background=(0.1, 0.2, 0.3))
    cn, sn = render_rays(small_tree, o, d, hp, cfg, path="naive", background=(0.1, 0.2, 0.3))
    assert np.array_equal(cb, cn)
    assert sb.total_samples == sn.total_samples
    assert sn.evaluated_samples <= sn.total_samples


def test_batched_equals_naive_with_teacher_hook(small_tree, scene2):
    cam, o, d = _cam_rays(6, 5)
    hook = lambda node, x, dd: scene2.query(x, dd)  # noqa: E731
    cfg = SamplingConfig(budget=6)
    cb, _ = render_rays(small_tree, o, d, None, cfg, path="batched", node_field=hook)
    cn, _ = render_rays(small_tree, o, d, None, cfg, path="naive", node_field=hook)
    assert np.allclose(cb, cn, atol=1e-12)


def test_workers_do_not_change_pixels(small_tree):
    cam, o, d = _cam_rays(16, 12)
    cfg = SamplingConfig()
    c1, s1 = render_rays(small_tree, o, d, None, cfg, workers=1)
    c8, s8 = render_rays(small_tree, o, d, None, cfg, workers=8)
    assert np.array_equal(c1, c8)
    assert (s1.total_samples, s1.batch_count) == (s8.total_samples, s8.batch_count)


def test_zero_rays_and_bad_path(small_tree):
    c, s = render_rays(small_tree, np.zeros((0, 3)), np.zeros((0, 3)), None, SamplingConfig())
    assert c.shape == (0, 3) and s.total_samples == 0 and s.avg_samples_per_ray == 0.0
    with pytest.raises(ValueError):
        render_rays(small_tree, np.zeros((1, 3)), np.array([[0, 0, 1.0]]), None, SamplingConfig(), path="fast")


def test_stats_consistency(small_tree):
    cam, o, d = _cam_rays()
    _, s = render_rays(small_tree, o, d, None, SamplingConfig(budget=8, ray_cap=192))
    assert s.ray_count == len(o)
    assert s.max_batch <= s.total_samples
    assert s.avg_samples_per_ray <= 192
    assert s.batch_count <= len(small_tree.leaves())
