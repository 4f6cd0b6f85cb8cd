import math

import numpy as np
import pytest

from amnerf.field import AnalyticScene, Blob
from amnerf.geometry import Camera
from amnerf.renderer import (PSNR_CAP, ImageBuffer, image_psnr, ppm_bytes, read_ppm, render_image,
                             render_reference, write_ppm)
from amnerf.sampling import SamplingConfig
from amnerf.subdivision import build_kdtree

from conftest import UNIT, tiny_cfg


class Empty:
    domain = UNIT

    def query(self, x, d):
        n = len(np.asarray(x).reshape(-1, 3))
        return np.zeros(n), np.zeros((n, 3))


def _cam(w=24, h=20):
    return Camera.look_at((2.0, 1.2, 2.1), (0.5, 0.5, 0.5), width=w, height=h)


def test_image_buffer_validation():
    img = ImageBuffer(2, 1, [0, 0.5, 1, 2.0, -1, 0.25])
    assert img.pixels.shape == (1, 2, 3)
    assert img.pixels.max() == 1.0 and img.pixels.min() == 0.0
    assert img.to_bytes() == bytes([0, 128, 255, 255, 0, 64])
    with pytest.raises(ValueError):
        ImageBuffer(2, 2, np.zeros(3))
    with pytest.raises(ValueError):
        ImageBuffer(1, 1, [np.nan, 0, 0])
    with pytest.raises(ValueError):
        ImageBuffer(0, 1, [])


def test_empty_tree_renders_background():
    tree = build_kdtree(Empty(), UNIT, tiny_cfg())
    img, st = render_image(tree, _cam(), None, SamplingConfig(), background=(0.2, 0.4, 0.6))
    assert tree.node_count == 1
    assert np.allclose(img.pixels, [0.2, 0.4, 0.6], atol=1e-12)
    assert st.ray_count == 24 * 20


def test_reference_of_empty_scene_is_background():
    ref = render_reference(Empty(), _cam(), 64, background=(0.1, 0.2, 0.3))
    assert np.allclose(ref.pixels, [0.1, 0.2, 0.3])


def test_render_workers_identical(small_tree):
    a, sa = render_image(small_tree, _cam(), None, SamplingConfig(), workers=1)
    b, sb = render_image(small_tree, _cam(), None, SamplingConfig(), workers=8)
    assert a.to_bytes() == b.to_bytes()
    assert sa.total_samples == sb.total_samples


def test_reference_converges(scene2):
    cam = _cam(32, 32)
    r512 = render_reference(scene2, cam, 512)
    r1024 = render_reference(scene2, cam, 1024)
    r2048 = render_reference(scene2, cam, 2048)
    p512, p1024 = image_psnr(r512, r2048), image_psnr(r1024, r2048)
    assert p1024 >= p512
    assert p1024 > 50.0
    with pytest.raises(ValueError):
        render_reference(scene2, cam, 8)


def test_teacher_hook_matches_reference(small_tree, scene2):
    # the teacher pushed through the tree's sampling approximates dense quadrature
    cam = _cam(32, 32)
    ref = render_reference(scene2, cam, 1024)
    img, _ = render_image(small_tree, cam, None, SamplingConfig(budget=64, ray_cap=1024),
                          node_field=lambda n, x, d: scene2.query(x, d))
    assert image_psnr(img, ref) > 35.0


def test_psnr_examples():
    a = ImageBuffer.filled(4, 4, (0.5, 0.5, 0.5))
    b = ImageBuffer.filled(4, 4, (0.6, 0.6, 0.6))
    assert image_psnr(a, a) == PSNR_CAP
    assert image_psnr(a, b) == pytest.approx(20.0)
    assert image_psnr(a, b) == image_psnr(b, a)
    assert image_psnr(ImageBuffer.filled(2, 2), ImageBuffer.filled(2, 2, (1, 1, 1))) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        image_psnr(a, ImageBuffer.filled(4, 3))


def test_psnr_symmetric_random(rng):
    a = ImageBuffer(5, 3, rng.random(45))
    b = ImageBuffer(5, 3, rng.random(45))
    mse = np.mean((a.pixels - b.pixels) ** 2)
    assert image_psnr(a, b) == pytest.approx(-10 * math.log10(mse)) == image_psnr(b, a)


def test_ppm_layout_and_roundtrip(tmp_path, rng):
    img = ImageBuffer(3, 2, np.round(rng.random(18) * 255) / 255)
    data = ppm_bytes(img)
    assert data.startswith(b"P6\n3 2\n255\n") and len(data) == 11 + 18
    p = tmp_path / "a.ppm"
    write_ppm(img, p)
    assert p.read_bytes() == data
    back = read_ppm(p)
    assert back.to_bytes() == img.to_bytes()
    assert not (tmp_path / "a.ppm.tmp").exists()


def test_read_ppm_rejects_bad_files(tmp_path):
    p = tmp_path / "b.ppm"
    p.write_bytes(b"P3\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        read_ppm(p)
    p.write_bytes(b"P6\n2 2\n255\n\x00")
    with pytest.raises(ValueError):
        read_ppm(p)


def test_single_blob_brightest_at_centre():
    sc = AnalyticScene((Blob((0.5, 0.5, 0.5), 0.1, 20.0, (1, 1, 1)),), UNIT)
    cam = Camera.look_at((0.5, 0.5, 3.0), (0.5, 0.5, 0.5), width=15, height=15)
    ref = render_reference(sc, cam, 256)
    lum = ref.pixels.sum(-1)
    assert np.unravel_index(np.argmax(lum), lum.shape) == (7, 7)
    assert lum[0, 0] < 1e-3
