import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinemesh import autodiff as ad
from spinemesh.autodiff import Tensor, grad_check
from spinemesh.features import (Backbone, FeatureMap, PatchEmbed, PointSampler, UNet,
                                bilinear_sample, patch_positions, patch_vectors, patchify,
                                position_embedding, sample_with_position)


def fmap(C=3, H=6, W=6, seed=0):
    return FeatureMap(np.random.default_rng(seed).standard_normal((1, C, H, W)))


def test_pixel_norm_mapping_roundtrip():
    fm = fmap(H=8, W=4)
    rc = np.array([[0, 0], [7, 3], [2.5, 1.25]])
    np.testing.assert_allclose(fm.norm_to_pixel(fm.pixel_to_norm(rc)), rc, atol=1e-14)
    np.testing.assert_allclose(fm.pixel_to_norm([[0, 0]]), [[-0.75, -0.875]])


def test_backbone_zero_image_zero_features():
    bb = Backbone(ad.make_rng(0))
    lo, hi = bb(np.zeros((16, 16)))
    assert not lo.data.data.any() and not hi.data.data.any()


def test_backbone_output_sizes():
    lo, hi = Backbone(ad.make_rng(0), c_high=5, c_low=12)(np.zeros((1, 1, 128, 128)))
    assert hi.data.shape == (1, 5, 128, 128)
    assert lo.data.shape == (1, 12, 32, 32)


def test_backbone_rejects_bad_sizes():
    bb = Backbone(ad.make_rng(0))
    with pytest.raises(ad.ShapeError):
        bb(np.zeros((1, 1, 16, 32)))
    with pytest.raises(ad.ShapeError):
        bb(np.zeros((1, 1, 24, 24)))


def test_backbone_grad_check_small_image():
    bb = Backbone(ad.make_rng(1), c_high=2, c_low=4)
    w_lo = np.random.default_rng(2).standard_normal((1, 4, 2, 2))
    w_hi = np.random.default_rng(3).standard_normal((1, 2, 8, 8))

    def loss(img):
        lo, hi = bb(img)
        return (lo.data * w_lo).sum() + (hi.data * w_hi).sum()
    assert grad_check(loss, np.random.default_rng(4).standard_normal((1, 1, 8, 8))) < 1e-4
    errs = ad.check_parameters(lambda: loss(Tensor(np.random.default_rng(4).standard_normal(
        (1, 1, 8, 8)))), bb.parameters(), max_coords=6)
    assert max(errs.values()) < 1e-4


def test_unet_resolutions_and_softmax():
    u = UNet(ad.make_rng(0))
    maps, logits = u(np.random.default_rng(0).random((128, 128)))
    assert u.encoder_sides(128) == (128, 32, 8, 4)
    assert [m.size for m in maps] == [(8, 8), (32, 32), (128, 128)]
    assert logits.shape == (1, 12, 128, 128)
    p = ad.softmax(logits, axis=1).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


def test_patchify_single_token():
    fm = fmap(2, 8, 8)
    emb = ad.Linear(2 * 64, 4, ad.make_rng(0))
    t = patchify(fm, 8, emb)
    assert len(t) == 1
    np.testing.assert_array_equal(t.positions.data, [[[0.0, 0.0]]])


def test_patchify_grid_centres():
    np.testing.assert_allclose(patch_positions(8, 8, 4),
                               [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4, 8, 16]), st.sampled_from([16, 32]))
def test_patch_count_and_spacing(P, H):
    pos = patch_positions(H, H, P)
    assert len(pos) == (H // P) ** 2
    xs = np.unique(pos[:, 0])
    np.testing.assert_allclose(np.diff(xs), 2 * P / H)
    assert (np.abs(pos) < 1).all()


def test_patchify_rejects_indivisible():
    with pytest.raises(ad.ShapeError, match="patchify"):
        patch_vectors(fmap(1, 6, 6), 4)


def test_patch_embedding_invertible():
    fm = fmap(1, 8, 8, seed=5)
    emb = ad.Linear(16, 16, ad.make_rng(0), bias=False)
    emb.weight.data[...] = np.random.default_rng(6).standard_normal((16, 16)) + 4 * np.eye(16)
    tok = patchify(fm, 4, emb).features.data[0]
    rec = tok @ np.linalg.pinv(emb.weight.data)
    # patch (0, 1) covers rows 0..3, columns 4..7
    np.testing.assert_allclose(rec[1].reshape(4, 4), fm.data.data[0, 0, 0:4, 4:8], atol=1e-10)


def test_patch_embed_module():
    pe = PatchEmbed(3, 2, 5, ad.make_rng(0))
    t = pe(fmap(3, 4, 4))
    assert t.features.shape == (1, 4, 5) and t.positions.shape == (1, 4, 2)


def test_bilinear_at_pixel_centre_and_midpoint():
    fm = fmap(2, 4, 4, seed=1)
    v = fm.data.data[0]
    centre = fm.pixel_to_norm([[1, 2]])
    np.testing.assert_allclose(bilinear_sample(fm, centre).data[0, 0], v[:, 1, 2], atol=1e-14)
    mid = fm.pixel_to_norm([[1.5, 2.5]])
    np.testing.assert_allclose(bilinear_sample(fm, mid).data[0, 0],
                               v[:, 1:3, 2:4].mean(axis=(1, 2)), atol=1e-14)


def test_bilinear_exact_on_affine_field():
    H, W = 7, 9
    fm = FeatureMap(np.zeros((1, 1, H, W)))
    xy = fm.pixel_to_norm(np.stack(np.meshgrid(np.arange(H), np.arange(W), indexing="ij"), -1))
    a, b, c = 0.7, -1.3, 0.2
    fm.data.data[0, 0] = a * xy[..., 0] + b * xy[..., 1] + c
    lo = fm.pixel_to_norm([[0, 0]])[0]
    hi = fm.pixel_to_norm([[H - 1, W - 1]])[0]
    pts = np.random.default_rng(0).uniform(lo, hi, (50, 2))
    got = bilinear_sample(fm, pts).data[0, :, 0]
    np.testing.assert_allclose(got, a * pts[:, 0] + b * pts[:, 1] + c, atol=1e-12)


def test_bilinear_clamps_outside_points():
    fm = fmap(1, 4, 4, seed=2)
    v = fm.data.data[0, 0]
    out = bilinear_sample(fm, [[-3.0, -3.0], [5.0, 5.0]]).data[0, :, 0]
    np.testing.assert_allclose(out, [v[0, 0], v[3, 3]], atol=1e-14)


def test_bilinear_empty_points():
    with pytest.raises(ad.ShapeError):
        bilinear_sample(fmap(), np.zeros((0, 2)))


def test_bilinear_gradients():
    fm_data = np.random.default_rng(3).standard_normal((2, 3, 6, 6))
    fm = FeatureMap(fm_data)
    # keep points away from cell boundaries
    rc = np.random.default_rng(4).integers(0, 5, (2, 5, 2)) + np.random.default_rng(5).uniform(
        0.2, 0.8, (2, 5, 2))
    pts = fm.pixel_to_norm(rc)
    w = np.random.default_rng(6).standard_normal((2, 5, 3))
    assert grad_check(lambda p: (bilinear_sample(fm, p) * w).sum(), pts) < 1e-4
    assert grad_check(lambda m: (bilinear_sample(FeatureMap(m), pts) * w).sum(), fm_data) < 1e-4


def test_bilinear_matches_loop():
    fm = fmap(2, 5, 7, seed=8)
    pts = np.random.default_rng(9).uniform(-0.9, 0.9, (6, 2))
    got = bilinear_sample(fm, pts).data[0]
    v = fm.data.data[0]
    for n, (x, y) in enumerate(pts):
        u = (x + 1) * 7 / 2 - 0.5
        w = (y + 1) * 5 / 2 - 0.5
        c0, r0 = int(np.floor(u)), int(np.floor(w))
        fx, fy = u - c0, w - r0
        for ch in range(2):
            want = (v[ch, r0, c0] * (1 - fx) * (1 - fy) + v[ch, r0, c0 + 1] * fx * (1 - fy)
                    + v[ch, r0 + 1, c0] * (1 - fx) * fy + v[ch, r0 + 1, c0 + 1] * fx * fy)
            assert got[n, ch] == pytest.approx(want, abs=1e-13)


def test_sample_with_position_identical_points():
    s = PointSampler(3, 6, ad.make_rng(0))
    t = sample_with_position(fmap(3), [[0.1, 0.2], [0.1, 0.2]], s)
    np.testing.assert_array_equal(t.features.data[0, 0], t.features.data[0, 1])
    np.testing.assert_array_equal(t.positions.data[0], [[0.1, 0.2], [0.1, 0.2]])


def test_sample_with_position_zero_map_uses_position_only():
    s = PointSampler(3, 6, ad.make_rng(0))
    pts = np.array([[0.3, -0.4]])
    t = sample_with_position(FeatureMap(np.zeros((1, 3, 4, 4))), pts, s)
    pe = position_embedding(pts).data
    want = pe @ s.proj.weight.data[3:] + s.proj.bias.data
    np.testing.assert_allclose(t.features.data[0], want, atol=1e-14)


def test_sample_with_position_matches_loop():
    s = PointSampler(2, 4, ad.make_rng(1), n_freq=2)
    fm = fmap(2, 6, 6, seed=10)
    pts = np.random.default_rng(11).uniform(-0.8, 0.8, (5, 2))
    got = s(fm, pts).features.data[0]
    feats = bilinear_sample(fm, pts).data[0]
    W, b = s.proj.weight.data, s.proj.bias.data
    for n in range(5):
        x, y = pts[n]
        pe = [np.sin(np.pi * x), np.sin(2 * np.pi * x), np.sin(np.pi * y), np.sin(2 * np.pi * y),
              np.cos(np.pi * x), np.cos(2 * np.pi * x), np.cos(np.pi * y), np.cos(2 * np.pi * y)]
        vec = list(feats[n]) + pe
        for e in range(4):
            want = sum(vec[i] * W[i, e] for i in range(len(vec))) + b[e]
            assert got[n, e] == pytest.approx(want, abs=1e-12)
