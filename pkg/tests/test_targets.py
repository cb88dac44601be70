import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpnpose.synth import SynthParams, generate_scene
from dpnpose.targets import SceneAnnotation, render_heatmaps, render_pafs

LIMBS = ((0, 1),)


def ann_of(persons, h=64, w=64, limbs=LIMBS):
    return SceneAnnotation([np.asarray(p, dtype=float) for p in persons], limbs, h, w)


def test_keypoint_on_grid_peaks_at_one():
    S = render_heatmaps(ann_of([[[16, 24, 1], [40, 40, 1]]]), stride=8)
    assert S[0, 3, 2] == 1.0
    assert np.unravel_index(S[0].argmax(), S[0].shape) == (3, 2)


def test_two_persons_per_pixel_max():
    sigma, s = 7.0, 8
    persons = [[[20, 20, 1], [0, 0, 0]], [[30, 26, 1], [0, 0, 0]]]
    S = render_heatmaps(ann_of(persons), s, sigma)
    for i in range(S.shape[1]):
        for j in range(S.shape[2]):
            want = max(np.exp(-((j * s - x) ** 2 + (i * s - y) ** 2) / (2 * sigma ** 2))
                       for x, y, _ in (p[0] for p in persons))
            assert S[0, i, j] == pytest.approx(want, rel=1e-6, abs=1e-7)
            assert S[2, i, j] == pytest.approx(np.clip(1 - max(S[0, i, j], S[1, i, j]), 0, 1), abs=1e-6)


def test_invisible_type_gives_zero_channel_and_full_background():
    S = render_heatmaps(ann_of([[[0, 0, 0], [0, 0, 0]]]), 8)
    assert not S[0].any() and not S[1].any()
    assert np.all(S[2] == 1.0)


def test_heatmap_range_on_random_scenes():
    p = SynthParams(max_persons=3)
    for i in range(10):
        _, ann = generate_scene(p, i)
        S = render_heatmaps(ann, 8)
        assert S.min() >= 0 and S.max() <= 1


def test_horizontal_paf():
    L = render_pafs(ann_of([[[0, 8, 1], [32, 8, 1]]]), stride=8)
    np.testing.assert_allclose(L[:, 1, 2], [1.0, 0.0])


def test_antiparallel_limbs_cancel():
    L = render_pafs(ann_of([[[0, 8, 1], [32, 8, 1]], [[32, 8, 1], [0, 8, 1]]]), 8)
    np.testing.assert_array_equal(L[:, 1, 0:5], 0.0)


def test_zero_length_limb_contributes_nothing():
    assert not render_pafs(ann_of([[[16, 16, 1], [16, 16, 1]]]), 8).any()


def test_paf_oracle_on_random_scene():
    params = SynthParams(max_persons=3)
    s, hw = 8, 8.0
    for idx in range(5):
        _, ann = generate_scene(params, idx)
        L = render_pafs(ann, s, hw)
        for c, (ia, ib) in enumerate(ann.limbs):
            for i in range(L.shape[1]):
                for j in range(L.shape[2]):
                    px, py = j * s, i * s
                    cover = []
                    for p in ann.persons:
                        a, b = p[ia, :2], p[ib, :2]
                        d = b - a
                        n = np.hypot(*d)
                        u = d / n
                        along = (px - a[0]) * u[0] + (py - a[1]) * u[1]
                        across = abs((px - a[0]) * u[1] - (py - a[1]) * u[0])
                        if 0 <= along <= n and across <= hw:
                            cover.append(u)
                    vec = L[2 * c:2 * c + 2, i, j]
                    if not cover:
                        assert not vec.any()
                    else:
                        np.testing.assert_allclose(vec, np.mean(cover, axis=0), atol=1e-6)
                        if len(cover) == 1:
                            assert abs(np.hypot(*vec) - 1) < 1e-6


@given(x=st.integers(3, 6), y=st.integers(2, 5), shift=st.integers(1, 2))
@settings(max_examples=20, deadline=None)
def test_translation_equivariance(x, y, shift):
    s = 8
    base = [[[x * s + 1.5, y * s + 2.0, 1], [x * s + 14.0, y * s + 9.0, 1]]]
    moved = [[[px + shift * s, py, v] for px, py, v in base[0]]]
    a, b = ann_of(base, 96, 128), ann_of(moved, 96, 128)
    Sa, Sb = render_heatmaps(a, s), render_heatmaps(b, s)
    La, Lb = render_pafs(a, s), render_pafs(b, s)
    np.testing.assert_allclose(Sb[:, :, shift:], Sa[:, :, :-shift], atol=1e-6)
    np.testing.assert_array_equal(Lb[:, :, shift:], La[:, :, :-shift])


def test_annotation_text_round_trip():
    _, ann = generate_scene(SynthParams(), 3)
    back = SceneAnnotation.from_text(ann.to_text(), ann.limbs)
    assert (back.height, back.width) == (ann.height, ann.width)
    for p, q in zip(ann.persons, back.persons):
        np.testing.assert_allclose(p, q, atol=1e-3)


def test_annotation_validation():
    with pytest.raises(ValueError):
        SceneAnnotation([np.zeros((2, 3))], ((0, 5),), 8, 8)
    with pytest.raises(ValueError):
        render_heatmaps(ann_of([[[0, 0, 0], [0, 0, 0]]]), 8, sigma=0)
