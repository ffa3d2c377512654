import numpy as np
import pytest

from spinemesh import autodiff as ad
from spinemesh.attention import RelAttentionBlock, TokenSet
from spinemesh.autodiff import Tensor, grad_check
from spinemesh.features import FeatureMap, PatchEmbed
from spinemesh.models import (ContractError, ModelConfig, UNetDeformer, build_model,
                              isa_forward, load_backbone, load_checkpoint, s2ia_forward,
                              save_checkpoint, ssa_forward)


def tiny(kind, **kw):
    base = dict(kind=kind, image_side=16, embed=8, heads=2, layers=1, patch=2, c_high=2,
                c_low=4, unet_widths=(2, 3, 4, 4), unet_pools=(2, 2, 2), seed=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_inputs(seed=0, n=12):
    rng = np.random.default_rng(seed)
    img = rng.random((1, 1, 16, 16))
    pts = rng.uniform(-0.7, 0.7, (n, 2))
    return img, pts


def randomize_heads(model, seed=0):
    rng = np.random.default_rng(seed)
    heads = [model.head1, model.head2] if hasattr(model, "head1") else model.heads
    for h in heads:
        h.fc.weight.data[...] = 0.3 * rng.standard_normal(h.fc.weight.shape)


DEFORMERS = ["transdeformer", "unet-deformsa", "unet-mlp"]


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(embed=10, heads=4)
    with pytest.raises(ValueError, match="patch"):
        ModelConfig(patch=5)
    with pytest.raises(ValueError, match="kind"):
        ModelConfig(kind="gcn")
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"kind": "unet-mlp", "depth": 3})
    assert ModelConfig().layers == 2 and ModelConfig().patch == 4


@pytest.mark.parametrize("kind", DEFORMERS)
def test_zero_heads_return_template(kind):
    m = build_model(tiny(kind))
    img, pts = tiny_inputs()
    out = m(img, pts)
    assert len(out.shapes) == (2 if kind == "transdeformer" else 3)
    for s in out.shapes:
        np.testing.assert_array_equal(s.data[0], pts)


@pytest.mark.parametrize("layers", [0, 1, 3])
def test_unet_deformsa_always_three_modules(layers):
    m = build_model(tiny("unet-deformsa", layers=layers))
    assert len(m(*tiny_inputs()).shapes) == 3


def test_ssa_identity_with_no_layers():
    t = TokenSet(np.random.default_rng(0).standard_normal((1, 5, 8)), np.zeros((1, 5, 2)))
    assert ssa_forward(t, []) is t


def _blocks(n, cross=False, seed=0):
    rng = ad.make_rng(seed)
    return [RelAttentionBlock(8, 2, rng, cross=cross) for _ in range(n)]


def test_ssa_translation_invariant():
    rng = np.random.default_rng(1)
    x, p = rng.standard_normal((1, 8, 8)), rng.uniform(-1, 1, (1, 8, 2))
    layers = _blocks(2)
    a = ssa_forward(TokenSet(x, p), layers).features.data
    b = ssa_forward(TokenSet(x, p + [0.31, -0.17]), layers).features.data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_ssa_grad_check():
    rng = np.random.default_rng(2)
    p = rng.uniform(-1, 1, (1, 8, 2))
    w = rng.standard_normal((1, 8, 8))
    layers = _blocks(2)
    assert grad_check(lambda x: (ssa_forward(TokenSet(x, p), layers).features * w).sum(),
                      rng.standard_normal((1, 8, 8))) < 1e-4


def test_isa_identity_translation_and_grad():
    rng = np.random.default_rng(3)
    fm = FeatureMap(rng.standard_normal((1, 2, 4, 4)))
    emb = PatchEmbed(2, 2, 8, ad.make_rng(0))
    tokens = emb(fm)
    assert isa_forward(tokens, []) == []
    layers = _blocks(2, seed=1)
    outs = isa_forward(tokens, layers)
    assert len(outs) == 2
    moved = TokenSet(tokens.features, tokens.positions.data + 0.4)
    np.testing.assert_allclose(isa_forward(moved, layers)[-1].features.data,
                               outs[-1].features.data, atol=1e-9)
    w = rng.standard_normal((1, 4, 8))
    assert grad_check(lambda m: (isa_forward(emb(FeatureMap(m)), layers)[-1].features * w).sum(),
                      fm.data.data) < 1e-4


def _cross_loop(att, x, px, y, py):
    """Scalar-loop multi-head relative cross attention."""
    d = att.d
    q_all = x @ att.q.weight.data
    k_all = y @ att.k.weight.data
    v_all = y @ att.v.weight.data
    out = np.zeros((len(x), att.embed))
    for i in range(len(x)):
        for h in range(att.n_heads):
            sl = slice(h * d, (h + 1) * d)
            logits = np.zeros(len(y))
            for j in range(len(y)):
                dp = px[i] - py[j]
                for c in range(d):
                    a1 = dp @ att.w1.data[h, :, c] + att.b1.data[h, 0, c]
                    a2 = dp @ att.w2.data[h, :, c] + att.b2.data[h, 0, c]
                    logits[j] += q_all[i, sl][c] * (k_all[j, sl][c] * np.cos(a1) + np.cos(a2))
            logits /= np.sqrt(d)
            a = np.exp(logits - logits.max())
            a /= a.sum()
            rel = sum(a[j] * (px[i] - py[j]) for j in range(len(y)))
            out[i] += (a @ v_all[:, sl]) @ att.wvo.data[h] + att.bvo.data[h, 0]
            out[i] += rel @ att.wpo.data[h] + att.bpo.data[h, 0]
    return out


def test_s2ia_matches_loop_oracle():
    rng = np.random.default_rng(4)
    block = _blocks(1, cross=True, seed=5)[0]
    block.attn.b1.data[...] = rng.standard_normal(block.attn.b1.shape)
    block.attn.b2.data[...] = rng.standard_normal(block.attn.b2.shape)
    X = TokenSet(rng.standard_normal((1, 4, 8)), rng.uniform(-1, 1, (1, 4, 2)))
    Y = TokenSet(rng.standard_normal((1, 5, 8)), rng.uniform(-1, 1, (1, 5, 2)))
    xn = block.norm_x(X.features).data[0]
    yn = block.norm_y(Y.features).data[0]
    h = X.features.data[0] + _cross_loop(block.attn, xn, X.positions.data[0], yn,
                                         Y.positions.data[0])
    ffn = block.ffn(block.norm_ff(Tensor(h))).data
    got = s2ia_forward(X, Y, block).features.data[0]
    np.testing.assert_allclose(got, h + ffn, atol=1e-10)


def test_s2ia_uniform_image_tokens_ignore_content():
    rng = np.random.default_rng(6)
    block = _blocks(1, cross=True, seed=7)[0]
    block.attn.wpo.data[...] = 0.0
    v = rng.standard_normal(8)
    outs = []
    for s in range(3):
        r = np.random.default_rng(100 + s)
        X = TokenSet(r.standard_normal((1, 4, 8)), r.uniform(-1, 1, (1, 4, 2)))
        Y = TokenSet(np.tile(v, (1, 6, 1)), r.uniform(-1, 1, (1, 6, 2)))
        xn = TokenSet(block.norm_x(X.features), X.positions)
        yn = TokenSet(block.norm_y(Y.features), Y.positions)
        outs.append(block.attn(xn, yn).data)
    # with uniform image tokens every attention row averages the same value
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], atol=1e-12)
    np.testing.assert_allclose(outs[0][0], np.tile(outs[0][0, :1], (4, 1)), atol=1e-12)


def test_s2ia_joint_translation():
    rng = np.random.default_rng(8)
    block = _blocks(1, cross=True, seed=9)[0]
    X = TokenSet(rng.standard_normal((1, 4, 8)), rng.uniform(-1, 1, (1, 4, 2)))
    Y = TokenSet(rng.standard_normal((1, 6, 8)), rng.uniform(-1, 1, (1, 6, 2)))
    t = np.array([0.2, -0.45])
    a = s2ia_forward(X, Y, block).features.data
    b = s2ia_forward(TokenSet(X.features, X.positions.data + t),
                     TokenSet(Y.features, Y.positions.data + t), block).features.data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_s2ia_rejects_empty():
    block = _blocks(1, cross=True)[0]
    X = TokenSet(np.zeros((1, 3, 8)), np.zeros((1, 3, 2)))
    with pytest.raises((ad.ShapeError, ValueError)):
        s2ia_forward(X, TokenSet(np.zeros((1, 0, 8)), np.zeros((1, 0, 2))), block)


def test_ssa_position_stream_is_template():
    m = build_model(tiny("transdeformer"))
    randomize_heads(m)
    img, pts = tiny_inputs()
    m(img, pts, pts)
    first = [p.copy() for p in m.last_ssa_positions]
    m(img, pts + [0.1, -0.05], pts)
    for a, b in zip(first, m.last_ssa_positions):
        assert np.array_equal(a, b)
        assert np.array_equal(a[0], pts)


def test_shift_changes_only_sampled_features():
    m = build_model(tiny("transdeformer"))
    randomize_heads(m)
    img, pts = tiny_inputs()
    a = m(img, pts, pts).final.data
    b = m(img, pts + [0.1, 0.0], pts).final.data
    assert not np.allclose(a - pts, b - pts - [0.1, 0.0])


def test_unet_mlp_per_point_independence():
    m = build_model(tiny("unet-mlp"))
    randomize_heads(m)
    img, pts = tiny_inputs()
    a = m(img, pts).final.data[0]
    moved = pts.copy()
    moved[5] += [0.05, -0.03]
    b = m(img, moved, moved).final.data[0]
    changed = np.flatnonzero(np.abs(a - b).max(axis=1) > 0)
    assert list(changed) == [5]


def test_unet_deformsa_mixes_points():
    m = build_model(tiny("unet-deformsa"))
    randomize_heads(m)
    img, pts = tiny_inputs()
    a = m(img, pts).final.data[0]
    moved = pts.copy()
    moved[5] += [0.05, -0.03]
    b = m(img, moved, pts).final.data[0]
    assert (np.abs(a - b).max(axis=1) > 0).sum() > 1


def test_unfrozen_backbone_is_rejected():
    m = build_model(tiny("unet-deformsa"))
    assert not any(n.startswith("unet.") for n, _ in m.named_parameters())
    m.unet.e1a.weight.requires_grad = True
    with pytest.raises(ContractError):
        m(*tiny_inputs())


def test_cached_features_match():
    m = build_model(tiny("unet-deformsa"))
    randomize_heads(m)
    img, pts = tiny_inputs()
    a = m(img, pts).final.data
    b = m(img, pts, features=m.features(img)).final.data
    assert np.array_equal(a, b)


def test_estimator_nonnegative():
    m = build_model(tiny("error-estimator"))
    m.out.weight.data *= 50
    for s in range(5):
        y = m(*tiny_inputs(s)).data
        assert y.shape == (1, 12) and (y >= 0).all()


def test_estimator_permutation_equivariant():
    m = build_model(tiny("error-estimator"))
    img, pts = tiny_inputs(1)
    perm = np.random.default_rng(0).permutation(12)
    a = m(img, pts).data[0]
    b = m(img, pts[perm]).data[0]
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@pytest.mark.parametrize("kind", DEFORMERS + ["error-estimator"])
def test_deterministic(kind):
    img, pts = tiny_inputs(2)

    def run():
        m = build_model(tiny(kind))
        if kind != "error-estimator":
            randomize_heads(m)
            return m(img, pts).final.data
        return m(img, pts).data
    assert np.array_equal(run(), run())


@pytest.mark.parametrize("kind", DEFORMERS)
def test_topology_preserved(kind):
    m = build_model(tiny(kind))
    randomize_heads(m)
    img, pts = tiny_inputs(3)
    for s in m(img, pts).shapes:
        assert s.shape == (1, 12, 2)


@pytest.mark.parametrize("kind", DEFORMERS + ["error-estimator", "unet"])
def test_checkpoint_roundtrip(kind, tmp_path):
    m = build_model(tiny(kind))
    rng = np.random.default_rng(0)
    from spinemesh.models import _all_tensors
    for _, t in _all_tensors(m):
        t.data[...] = rng.standard_normal(t.shape) * 0.1
    save_checkpoint(m, tmp_path / "m.ckpt", {"note": "x"})
    m2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["note"] == "x" and meta["config"]["kind"] == kind
    img, pts = tiny_inputs(4)
    if kind == "unet":
        assert np.array_equal(m(img).data, m2(img).data)
    elif kind == "error-estimator":
        assert np.array_equal(m(img, pts).data, m2(img, pts).data)
    else:
        assert np.array_equal(m(img, pts).final.data, m2(img, pts).final.data)


def test_load_backbone_copies_weights():
    seg = build_model(tiny("unet", seed=11))
    m = build_model(tiny("unet-deformsa"))
    load_backbone(m, seg)
    assert np.array_equal(m.unet.d1.weight.data, seg.unet.d1.weight.data)
    assert not m.unet.d1.weight.requires_grad


@pytest.mark.parametrize("kind", DEFORMERS + ["error-estimator"])
def test_model_grad_check_tiny(kind):
    m = build_model(tiny(kind))
    if kind != "error-estimator":
        randomize_heads(m)
    img, pts = tiny_inputs(5)
    w = np.random.default_rng(1).standard_normal((1, 12, 2))

    def loss_pts(p):
        out = m(img, p) if kind == "error-estimator" else m(img, p, pts)
        return (out * w[..., 0]).sum() if kind == "error-estimator" else \
            sum((s * w).sum() for s in out.shapes)

    assert grad_check(loss_pts, pts) < 1e-4
    errs = ad.check_parameters(lambda: loss_pts(Tensor(pts)), m.parameters(), max_coords=3)
    assert max(errs.values()) < 1e-4


def test_cached_decoder_maps_are_standardised():
    m = build_model(tiny("unet-deformsa"))
    img = np.random.default_rng(0).random((2, 1, 16, 16))
    for fm in m.features(img):
        d = fm.data.data
        flat = d.reshape(d.shape[0], d.shape[1], -1)
        live = flat.std(-1) > 0
        np.testing.assert_allclose(flat.mean(-1), 0, atol=1e-9)
        np.testing.assert_allclose(flat.std(-1)[live], 1, atol=1e-6)
