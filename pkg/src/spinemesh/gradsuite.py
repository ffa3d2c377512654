"""Central-difference gradient checks over every differentiable op and each model.

Each case is a (name, function, point) triple; ``run_suite`` evaluates them in a
fixed order and returns one row per case.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check

TOLERANCE = 1e-4
SUITES = ("ops", "models", "all")


def _rng(seed):
    return np.random.default_rng(seed)


def _weighted(f, shape_seed=0):
    """Reduce a tensor output to a scalar with fixed random weights."""
    cache = {}

    def g(x):
        y = f(x)
        if y.shape not in cache:
            cache[y.shape] = _rng(1000 + shape_seed).standard_normal(y.shape)
        return (y * cache[y.shape]).sum()
    return g


def op_cases() -> list:
    r = _rng(0)
    a34 = r.standard_normal((3, 4))
    b34 = r.standard_normal((3, 4))
    pos = r.uniform(0.5, 2.0, (3, 4))
    # values kept away from the relu / clamp / max-pool kinks
    kink = r.choice([-1.0, 1.0], (3, 4)) * r.uniform(0.1, 1.0, (3, 4))
    img = r.standard_normal((2, 2, 6, 6))
    pool = np.arange(2 * 2 * 4 * 4, dtype=float).reshape(2, 2, 4, 4)
    pool = pool + r.uniform(0, 0.3, pool.shape)
    w_conv = r.standard_normal((3, 2, 3, 3))
    gain, shift = r.standard_normal(4), r.standard_normal(4)
    idx = np.array([2, 0, 2])
    W = ad.Tensor(r.standard_normal((2, 4, 5)))
    B = ad.Tensor(b34)
    cases = [
        ("add", _weighted(lambda x: x + B), a34),
        ("sub", _weighted(lambda x: B - x), a34),
        ("mul", _weighted(lambda x: x * x * B), a34),
        ("div", _weighted(lambda x: B / x), pos),
        ("neg", _weighted(lambda x: -x), a34),
        ("power", _weighted(lambda x: x ** 1.5), pos),
        ("exp", _weighted(ad.exp), a34),
        ("log", _weighted(ad.log), pos),
        ("sin", _weighted(ad.sin), a34),
        ("cos", _weighted(ad.cos), a34),
        ("sqrt", _weighted(ad.sqrt), pos),
        ("relu", _weighted(ad.relu), kink),
        ("softplus", _weighted(ad.softplus), a34),
        ("tanh", _weighted(ad.tanh), a34),
        ("clamp", _weighted(lambda x: ad.clamp(x, -0.5, 0.5)), kink * 0.4 + kink),
        ("matmul_broadcast", _weighted(lambda x: x.reshape(1, 3, 4) @ W), a34),
        ("transpose", _weighted(lambda x: x.T * B.T), a34),
        ("reshape", _weighted(lambda x: x.reshape(2, 6)), a34),
        ("getitem_basic", _weighted(lambda x: x[1:, ::2]), a34),
        ("getitem_advanced", _weighted(lambda x: x[idx]), a34),
        ("concat", _weighted(lambda x: ad.concat([x, x * B], axis=1)), a34),
        ("stack", _weighted(lambda x: ad.stack([x, x * x], axis=0)), a34),
        ("sum", _weighted(lambda x: x.sum(axis=1, keepdims=True)), a34),
        ("mean", _weighted(lambda x: x.mean(axis=0)), a34),
        ("softmax", _weighted(lambda x: ad.softmax(x, axis=-1)), a34),
        ("log_softmax", _weighted(lambda x: ad.log_softmax(x, axis=0)), a34),
        ("layer_norm", _weighted(lambda x: ad.layer_norm(x, Tensor(gain), Tensor(shift))), a34),
        ("conv2d", _weighted(lambda x: ad.conv2d(x, Tensor(w_conv), None)), img),
        ("conv2d_stride2", _weighted(lambda x: ad.conv2d(x, Tensor(w_conv), None, stride=2)), img),
        ("conv2d_weight", _weighted(lambda w: ad.conv2d(Tensor(img), w, None)), w_conv),
        ("max_pool2d", _weighted(lambda x: ad.max_pool2d(x, 2)), pool),
        ("upsample_nearest", _weighted(lambda x: ad.upsample_nearest(x, 2)), img),
        ("upsample_bilinear", _weighted(lambda x: ad.upsample_bilinear(x, 2)), img),
    ]
    cases += _module_op_cases()
    return cases


def _module_op_cases() -> list:
    from .attention import MultiHeadRelAttention, TokenSet
    from .features import FeatureMap, bilinear_sample, patchify, position_embedding
    from .training import class_weights, geom_loss, seg_loss
    r = _rng(1)
    att = MultiHeadRelAttention(8, 2, ad.make_rng(2))
    att.b1.data[...] = r.standard_normal(att.b1.shape)
    px, py = r.uniform(-1, 1, (5, 2)), r.uniform(-1, 1, (6, 2))
    y = r.standard_normal((6, 8))
    fm = FeatureMap(r.standard_normal((1, 3, 6, 6)))
    rc = r.integers(0, 5, (4, 2)) + r.uniform(0.2, 0.8, (4, 2))
    pts = fm.pixel_to_norm(rc)
    masks = np.moveaxis(np.eye(12)[r.integers(0, 12, (1, 4, 4))], -1, 1)
    gt = r.uniform(-1, 1, (1, 12, 2))
    emb = ad.Linear(3 * 4, 8, ad.make_rng(3))
    return [
        ("attention_logits", _weighted(lambda x: att.logits(TokenSet(x, px), TokenSet(y, py))),
         r.standard_normal((5, 8))),
        ("attention_positions", _weighted(lambda p: att(TokenSet(Tensor(y[:5]), p),
                                                        TokenSet(y, py))), px),
        ("multi_head", _weighted(lambda x: att(TokenSet(x, px), TokenSet(y, py))),
         r.standard_normal((5, 8))),
        ("patchify", _weighted(lambda m: patchify(FeatureMap(m), 2, emb).features),
         fm.data.data),
        ("bilinear_points", _weighted(lambda p: bilinear_sample(fm, p)), pts),
        ("bilinear_map", _weighted(lambda m: bilinear_sample(FeatureMap(m), pts)), fm.data.data),
        ("position_embedding", _weighted(position_embedding), pts),
        ("seg_loss", lambda z: seg_loss(z, masks, class_weights(masks)),
         r.standard_normal(masks.shape)),
        ("geom_loss_stage1", lambda p: geom_loss(1, [p, p * 0.5], gt), r.uniform(-1, 1, gt.shape)),
        ("geom_loss_stage2", lambda p: geom_loss(2, [p, p * 0.5], gt), r.uniform(-1, 1, gt.shape)),
    ]


def tiny_config(kind: str):
    from .models import ModelConfig
    return ModelConfig(kind=kind, image_side=16, embed=8, heads=2, layers=1, patch=2, c_high=2,
                       c_low=4, unet_widths=(2, 3, 4, 4), unet_pools=(2, 2, 2), seed=3)


def model_cases() -> list:
    """Each model at image 16^2, N_p = 12, E = 8; checked w.r.t. the input points
    and w.r.t. the image (or, for frozen-backbone models, a probe of parameters)."""
    from .models import build_model
    r = _rng(5)
    img = r.random((1, 1, 16, 16))
    pts = r.uniform(-0.7, 0.7, (12, 2))
    w = r.standard_normal((1, 12, 2))
    cases = []
    for kind in ("transdeformer", "unet-deformsa", "unet-mlp", "error-estimator"):
        m = build_model(tiny_config(kind))
        heads = [m.head1, m.head2] if hasattr(m, "head1") else getattr(m, "heads", [])
        for h in heads:
            h.fc.weight.data[...] = 0.3 * r.standard_normal(h.fc.weight.shape)

        def loss(p, im=img, m=m, kind=kind):
            if kind == "error-estimator":
                return (m(im, p) * w[..., 0]).sum()
            return sum((s * w).sum() for s in m(im, p, pts).shapes)
        cases.append((f"{kind}_points", loss, pts))
        if kind in ("transdeformer", "error-estimator"):
            cases.append((f"{kind}_image", lambda im, loss=loss: loss(Tensor(pts), im), img))
        else:
            cases.append((f"{kind}_params", _param_probe(m, lambda loss=loss: loss(Tensor(pts))),
                          np.zeros(1)))
    seg = build_model(tiny_config("unet"))
    cases.append(("unet_image", _weighted(lambda im: seg(im)), img))
    return cases


def _param_probe(model, closure):
    """Wraps check_parameters so it fits the (function, point) case shape."""
    def run(_):
        errs = ad.check_parameters(closure, model.parameters(), max_coords=3)
        return max(errs.values())
    run.direct = True
    return run


def cases_for(suite: str) -> list:
    if suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES}, got {suite!r}")
    out = []
    if suite in ("ops", "all"):
        out += op_cases()
    if suite in ("models", "all"):
        out += model_cases()
    return out


def run_suite(suite: str = "all", step: float = 1e-6, tolerance: float = TOLERANCE) -> list:
    """Rows {name, max_rel_error, passed, seconds}."""
    rows = []
    for name, fn, point in cases_for(suite):
        t0 = time.perf_counter()
        err = fn(point) if getattr(fn, "direct", False) else grad_check(fn, point, step)
        rows.append({"name": name, "max_rel_error": float(err), "passed": bool(err < tolerance),
                     "seconds": time.perf_counter() - t0})
    return rows
