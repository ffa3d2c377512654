"""Losses, the staged training schedule, two-stage inference and evaluation sweeps.

Shapes are handled as (B, N, 2) arrays in normalised coordinates. Pixel
quantities use side / 2 pixels per normalised unit.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Adam, Tensor, as_tensor, make_rng
from .autodiff.tensor import NonFiniteError
from .geometry import GeometryError, Shape, dice, nonlinear_warp
from .models import (DeformationOutput, ErrorEstimator, SegmentationNet, UNetDeformer,
                     _all_tensors, _state)

log = logging.getLogger(__name__)

N_CLASSES = 11
LOG_FIELDS = ("step", "stage", "loss", "val_appd_mean", "val_dice_mean")


class TrainingDiverged(RuntimeError):
    pass


# --- segmentation loss ----------------------------------------------------------
def class_weights(masks) -> np.ndarray:
    """Weights for classes 1..11, inversely proportional to pixel area, summing to 1.

    ``masks`` is (12, H, W) or (B, 12, H, W); classes absent from every mask get
    the weight of the smallest present class.
    """
    m = np.asarray(masks)
    if m.ndim == 3:
        m = m[None]
    if m.shape[1] != N_CLASSES + 1:
        raise ad.ShapeError("class_weights", m.shape, (None, N_CLASSES + 1), "expected 12 planes")
    area = m[:, 1:].sum(axis=(0, 2, 3)).astype(np.float64)
    if not (area > 0).any():
        return np.full(N_CLASSES, 1.0 / N_CLASSES)
    area[area == 0] = area[area > 0].min()
    w = 1.0 / area
    return w / w.sum()


def seg_loss_terms(logits, masks, weights, eps: float = 1e-6) -> tuple:
    """(Dice term, area-weighted cross-entropy term), background excluded from both.

    Both are batch means of per-image sums.
    """
    logits = as_tensor(logits)
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 3:
        m = m[None]
    if logits.shape != m.shape or m.shape[1] != N_CLASSES + 1:
        raise ad.ShapeError("seg_loss", logits.shape, m.shape, "logits and masks differ")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (N_CLASSES,):
        raise ad.ShapeError("seg_loss", w.shape, (N_CLASSES,), "one weight per object class")
    B = m.shape[0]
    logp = ad.log_softmax(logits, axis=1)[:, 1:]
    prob = ad.exp(logp)
    gt = m[:, 1:]
    inter = (prob * gt).sum(axis=(2, 3))
    denom = prob.sum(axis=(2, 3)) + gt.sum(axis=(2, 3)) + eps
    dice_term = -(2.0 * inter / denom).sum() / B
    ce_term = -(logp * (gt * w[None, :, None, None])).sum() / B
    return dice_term, ce_term


def seg_loss(logits, masks, weights, eps: float = 1e-6) -> Tensor:
    d, c = seg_loss_terms(logits, masks, weights, eps)
    return d + c


# --- geometry loss ----------------------------------------------------------------
def _shapes_of(outputs) -> list:
    if isinstance(outputs, DeformationOutput):
        return outputs.shapes
    if isinstance(outputs, (list, tuple)):
        return list(outputs)
    return [outputs]


def geom_loss(stage: int, outputs, gt) -> Tensor:
    """Sum over model outputs; stage 1 compares centroids, stages 2 and 3 use
    ||S_hat - S||^2 / N_p on flattened coordinates. Batch mean."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    g = np.asarray(gt.points if isinstance(gt, Shape) else gt, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    total = None
    for s in _shapes_of(outputs):
        s = as_tensor(s)
        if s.ndim == 2:
            s = s.reshape(1, *s.shape)
        if s.shape[1:] != g.shape[1:]:
            raise GeometryError(f"geom_loss: template mismatch, output {s.shape} vs gt {g.shape}")
        B, N = s.shape[0], s.shape[1]
        if stage == 1:
            diff = (s - g).mean(axis=1)
            term = (diff * diff).sum() / B
        else:
            diff = s - g
            term = (diff * diff).sum() / (N * B)
        total = term if total is None else total + term
    return total


def total_loss(kind: str, seg=None, geom=None, joint: bool = False) -> Tensor:
    """Combine the loss components for a model kind.

    TransDeformer and the estimator use geometry only; backbone pretraining
    ("unet") uses segmentation only. UNet-based deformers add the segmentation
    term only when trained jointly, since their backbone is otherwise frozen.
    """
    if kind in ("transdeformer", "error-estimator"):
        return geom
    if kind == "unet":
        return seg
    if joint and seg is not None:
        return seg + geom
    return geom


# --- placement --------------------------------------------------------------------
@dataclass
class StageConfig:
    stage: int
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-3
    lr_final: float = 1e-4
    warp: float = 0.0
    jitter_px: float = 5.0
    random_radius_frac: float = 0.25
    val_every: int = 100
    # share of stage 2/3 steps that repeat the stage-1 task (random placement,
    # centroid loss); without it the far-placement skill is forgotten
    rehearsal: float | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.rehearsal is None:
            self.rehearsal = 0.0 if self.stage == 1 else 0.25
        if not 0.0 <= self.rehearsal < 1.0:
            raise ValueError(f"rehearsal must be in [0, 1), got {self.rehearsal}")
        if self.stage == 3 and self.warp == 0.0:
            self.warp = 0.03

    @property
    def placement(self) -> str:
        return "random" if self.stage == 1 else "near"


DEFAULT_STAGES = (StageConfig(1, 2000), StageConfig(2, 4000), StageConfig(3, 4000))


def _disc(rng, radius):
    r = radius * math.sqrt(rng.uniform())
    th = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([r * math.cos(th), r * math.sin(th)])


def random_placement(template_pts, rng, side: int, radius_frac: float = 0.25) -> np.ndarray:
    """Template centred at a point drawn uniformly from a disc about the image centre."""
    t = np.asarray(template_pts, dtype=np.float64)
    c = _disc(rng, radius_frac * 2.0)
    return t - t.mean(axis=0) + c


def near_placement(template_pts, gt_pts, rng, side: int, jitter_px: float = 5.0) -> np.ndarray:
    """Template centred on the GT centroid plus a uniform jitter of at most ``jitter_px``."""
    t = np.asarray(template_pts, dtype=np.float64)
    c = np.asarray(gt_pts).mean(axis=0) + _disc(rng, jitter_px * 2.0 / side)
    return t - t.mean(axis=0) + c


def stage_init(cfg: StageConfig, template, gt_pts, rng, side: int) -> np.ndarray:
    pts = template.points
    if cfg.stage == 3:
        pts = nonlinear_warp(template, int(rng.integers(2 ** 31)), cfg.warp).points
    if cfg.placement == "random":
        return random_placement(pts, rng, side, cfg.random_radius_frac)
    return near_placement(pts, gt_pts, rng, side, cfg.jitter_px)


# --- batching helpers -------------------------------------------------------------
def _images(samples) -> np.ndarray:
    return np.stack([np.asarray(s.image, dtype=np.float64)[None] for s in samples])


def _side(samples) -> int:
    return int(np.asarray(samples[0].image).shape[-1])


def _run(model, images, init, template_pts, features=None) -> DeformationOutput:
    if isinstance(model, UNetDeformer):
        return model(images, init, template_pts, features=features)
    return model(images, init, template_pts)


def _features(model, samples, batch: int = 8):
    """Frozen UNet decoder maps per sample (None for other models)."""
    if not isinstance(model, UNetDeformer):
        return None
    out = []
    for i in range(0, len(samples), batch):
        maps = model.features(_images(samples[i:i + batch]))
        for b in range(maps[0].data.shape[0]):
            out.append([m.data.data[b:b + 1] for m in maps])
    return out


def _batch_features(feats, idx):
    if feats is None:
        return None
    from .features import FeatureMap
    return [FeatureMap(np.concatenate([feats[i][k] for i in idx])) for k in range(len(feats[0]))]


def appd_px(pred, gt, side: int) -> np.ndarray:
    """Per-sample whole-shape APPD in pixels (mean over points)."""
    p, g = np.asarray(pred), np.asarray(gt)
    return np.linalg.norm(p - g, axis=-1).mean(axis=-1) * (side / 2.0)


# --- inference --------------------------------------------------------------------
def initial_shapes(template, n: int, policy: str, side: int, seed: int = 0,
                   radius_frac: float = 0.25) -> np.ndarray:
    """(n, N, 2) stage-A template placements for ``policy`` in {center, random}."""
    t = np.asarray(template.points, dtype=np.float64)
    centred = t - t.mean(axis=0)
    if policy == "center":
        return np.broadcast_to(centred, (n,) + t.shape).copy()
    if policy == "random":
        return np.stack([random_placement(t, make_rng(seed * 7919 + i), side, radius_frac)
                         for i in range(n)])
    raise ValueError(f"init policy must be 'center' or 'random', got {policy!r}")


def infer_batch(model, images, template, init_pts, features=None) -> np.ndarray:
    """Two-stage inference from given stage-A placements; returns (B, N, 2)."""
    t = np.asarray(template.points, dtype=np.float64)
    init_pts = np.asarray(init_pts, dtype=np.float64)
    with ad.no_grad():
        first = np.asarray(_run(model, images, init_pts, t, features).final.data)
        c = first.mean(axis=1, keepdims=True)
        second = t - t.mean(axis=0) + c
        final = _run(model, images, second, t, features).final.data
    return np.asarray(final)


def infer(model, image, template, init_policy: str = "center", seed: int = 0,
          radius_frac: float = 0.25) -> Shape:
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape((1, 1) + img.shape[-2:])
    init = initial_shapes(template, 1, init_policy, img.shape[-1], seed, radius_frac)
    return Shape(template, infer_batch(model, img, template, init)[0])


def predict_dataset(model, samples, template, init_policy: str = "center", seed: int = 0,
                    batch: int = 8, init_pts=None) -> np.ndarray:
    """(S, N, 2) two-stage predictions for a list of samples."""
    side = _side(samples)
    if init_pts is None:
        init_pts = initial_shapes(template, len(samples), init_policy, side, seed)
    out = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        feats = _batch_features(_features(model, chunk, batch), range(len(chunk)))
        out.append(infer_batch(model, _images(chunk), template, init_pts[i:i + batch], feats))
    return np.concatenate(out)


def evaluate(pred, samples, with_dice: bool = True) -> dict:
    """Mean whole-shape APPD (px) and Dice for predicted point arrays."""
    side = _side(samples)
    gt = np.stack([s.shape.points for s in samples])
    errs = appd_px(pred, gt, side)
    out = {"appd_px": errs, "appd_mean": float(errs.mean())}
    if with_dice:
        d = [dice(s.shape.with_points(p), s.shape)["whole"] for p, s in zip(pred, samples)]
        out["dice"] = np.array(d)
        out["dice_mean"] = float(np.mean(d))
    return out


# --- training ---------------------------------------------------------------------
@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_val: float = math.inf
    best_step: int = -1
    best_state: dict | None = None


def _lr_at(cfg: StageConfig, step: int) -> float:
    if cfg.steps <= 1:
        return cfg.lr
    frac = step / (cfg.steps - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total
    return total


@contextlib.contextmanager
def _guard(stage: int, step: int):
    try:
        yield
    except NonFiniteError as e:
        raise TrainingDiverged(f"{e} at stage {stage} step {step}; "
                               f"lower the learning rate or check the data") from e


def _check_finite(value: float, stage: int, step: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss is {value} at stage {stage} step {step}; "
                               f"lower the learning rate or check the data")


def write_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in LOG_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.8g}"
    return v


def _restore(model, state: dict):
    for k, t in _all_tensors(model):
        t.data[...] = state[k]


def train(model, train_set, val_set, stages=DEFAULT_STAGES, template=None, seed: int = 0,
          log_path=None, max_grad_norm: float = 1.0, val_dice: bool = True,
          restore_best: bool = True, joint: bool = False) -> TrainResult:
    """Run the stages in order, validating with two-stage centre-init inference.

    The model is left holding the best-validation weights when ``restore_best``.
    ``joint`` (UNet deformers only) trains the backbone too, adding the
    segmentation loss to the geometry loss.
    """
    from .synth import canonical_template
    if not train_set:
        raise ValueError("empty training set")
    template = template or canonical_template()
    side = _side(train_set)
    rng = make_rng(seed)
    if joint:
        if not isinstance(model, UNetDeformer):
            raise ValueError("joint training applies to UNet deformers only")
        if any(s.masks is None for s in train_set):
            raise ValueError("joint training needs masks for every sample")
        model.unfreeze_backbone()
        masks = np.stack([s.masks for s in train_set])
        weights = class_weights(masks)
    params = model.parameters()
    opt = Adam(params)
    feats = None if joint else _features(model, train_set)
    gts = np.stack([s.shape.points for s in train_set])
    images = _images(train_set)
    t_pts = template.points
    res = TrainResult()
    step = 0
    for cfg in stages:
        for k in range(cfg.steps):
            idx = rng.choice(len(train_set), size=min(cfg.batch_size, len(train_set)),
                             replace=False)
            task = cfg.stage
            if cfg.rehearsal > 0 and rng.uniform() < cfg.rehearsal:
                task = 1
                init = np.stack([random_placement(t_pts, rng, side, cfg.random_radius_frac)
                                 for _ in idx])
            else:
                init = np.stack([stage_init(cfg, template, gts[i], rng, side) for i in idx])
            opt.lr = _lr_at(cfg, k)
            opt.zero_grad()
            with _guard(cfg.stage, step):
                out = _run(model, images[idx], init, t_pts, _batch_features(feats, idx))
                loss = geom_loss(task, out, gts[idx])
                if joint:
                    seg = seg_loss(model.last_logits, masks[idx], weights)
                    loss = total_loss(model.cfg.kind, seg=seg, geom=loss, joint=True)
                value = float(loss.data)
                _check_finite(value, cfg.stage, step)
                loss.backward()
            clip_gradients(params, max_grad_norm)
            opt.step()
            step += 1
            last = k == cfg.steps - 1
            row = {"step": step, "stage": cfg.stage, "loss": value,
                   "val_appd_mean": math.nan, "val_dice_mean": math.nan}
            if val_set and (step % cfg.val_every == 0 or last):
                pred = predict_dataset(model, val_set, template, "center")
                ev = evaluate(pred, val_set, with_dice=val_dice)
                row["val_appd_mean"] = ev["appd_mean"]
                row["val_dice_mean"] = ev.get("dice_mean", math.nan)
                # centroid-only stage 1 is not a candidate for the final model
                if cfg.stage > 1 and ev["appd_mean"] < res.best_val:
                    res.best_val, res.best_step = ev["appd_mean"], step
                    res.best_state = _state(model)
                log.info("stage %d step %d loss %.4g val APPD %.3f px", cfg.stage, step, value,
                         ev["appd_mean"])
            res.log.append(row)
    if restore_best and res.best_state is not None:
        _restore(model, res.best_state)
    if log_path is not None:
        write_log(log_path, res.log)
    return res


def pretrain_unet(net: SegmentationNet, train_set, steps: int = 300, batch_size: int = 4,
                  lr: float = 2e-3, seed: int = 0, log_path=None) -> list:
    """Backbone pretraining with the segmentation loss; returns per-step losses."""
    if any(s.masks is None for s in train_set):
        raise ValueError("pretraining needs masks for every sample")
    rng = make_rng(seed)
    masks = np.stack([s.masks for s in train_set])
    w = class_weights(masks)
    images = _images(train_set)
    opt = Adam(net.parameters(), lr=lr)
    losses = []
    for k in range(steps):
        idx = rng.choice(len(train_set), size=min(batch_size, len(train_set)), replace=False)
        opt.zero_grad()
        with _guard(0, k):
            loss = total_loss("unet", seg=seg_loss(net(images[idx]), masks[idx], w))
            value = float(loss.data)
            _check_finite(value, 0, k)
            loss.backward()
        opt.step()
        losses.append(value)
    if log_path is not None:
        write_log(log_path, [{"step": i + 1, "stage": 0, "loss": v, "val_appd_mean": math.nan,
                              "val_dice_mean": math.nan} for i, v in enumerate(losses)])
    return losses


# --- error estimator ----------------------------------------------------------------
def noisy_shape(gt_pts, template, rng, side: int, sigma_px=(0.2, 8.0),
                object_shift_prob: float = 0.3, max_shift_px: float = 6.0) -> np.ndarray:
    """GT plus per-point Gaussian noise with a log-uniform sigma, and occasional
    rigid shifts of single objects."""
    pts = np.asarray(gt_pts, dtype=np.float64).copy()
    sigma = math.exp(rng.uniform(math.log(sigma_px[0]), math.log(sigma_px[1])))
    pts += rng.normal(0.0, sigma, pts.shape) * (2.0 / side)
    for idx in template.objects.values():
        if rng.uniform() < object_shift_prob:
            pts[idx] += _disc(rng, max_shift_px * 2.0 / side)
    return pts


def point_errors_mm(pred, gt, side: int, spacing: float) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1) * (side / 2.0) * spacing


def train_estimator(model: ErrorEstimator, train_set, steps: int = 1000, batch_size: int = 4,
                    lr: float = 1e-3, lr_final: float = 1e-4, seed: int = 0, template=None,
                    log_path=None, max_grad_norm: float = 1.0) -> list:
    """MSE between predicted and true per-point distances (mm) on noisy GT shapes."""
    from .synth import canonical_template
    template = template or canonical_template()
    side = _side(train_set)
    spacing = train_set[0].pixel_spacing_mm
    rng = make_rng(seed)
    gts = np.stack([s.shape.points for s in train_set])
    images = _images(train_set)
    params = model.parameters()
    opt = Adam(params)
    cfg = StageConfig(2, steps, batch_size, lr, lr_final)
    losses = []
    for k in range(steps):
        idx = rng.choice(len(train_set), size=min(batch_size, len(train_set)), replace=False)
        noisy = np.stack([noisy_shape(gts[i], template, rng, side) for i in idx])
        target = point_errors_mm(noisy, gts[idx], side, spacing)
        opt.lr = _lr_at(cfg, k)
        opt.zero_grad()
        with _guard(0, k):
            diff = model(images[idx], noisy) - target
            loss = (diff * diff).mean()
            value = float(loss.data)
            _check_finite(value, 0, k)
            loss.backward()
        clip_gradients(params, max_grad_norm)
        opt.step()
        losses.append(value)
    if log_path is not None:
        write_log(log_path, [{"step": i + 1, "stage": 0, "loss": v, "val_appd_mean": math.nan,
                              "val_dice_mean": math.nan} for i, v in enumerate(losses)])
    return losses


def estimate_errors(model: ErrorEstimator, images, shapes, batch: int = 8) -> np.ndarray:
    """(S, N) per-point error estimates in mm."""
    out = []
    with ad.no_grad():
        for i in range(0, len(shapes), batch):
            out.append(model(images[i:i + batch], shapes[i:i + batch]).data)
    return np.concatenate(out)


# --- evaluation -------------------------------------------------------------------
def robustness_sweep(model, samples, template, radii_px=(0, 10, 20, 30, 40), seed: int = 0,
                     batch: int = 8) -> list:
    """Whole-shape APPD after shifting the centred template by up to each radius.

    Rows: {radius_px, mean, std, max, q95} in pixels.
    """
    from .geometry import random_shift_in_circle
    from .synth import sample_seed
    side = _side(samples)
    base = initial_shapes(template, 1, "center", side)[0]
    placed = template.with_points(base)
    gt = np.stack([s.shape.points for s in samples])
    rows = []
    for r in radii_px:
        init = np.stack([random_shift_in_circle(placed, float(r), sample_seed(seed, i), side).points
                         for i in range(len(samples))])
        pred = predict_dataset(model, samples, template, init_pts=init, batch=batch)
        e = appd_px(pred, gt, side)
        rows.append({"radius_px": float(r), "mean": float(e.mean()), "std": float(e.std()),
                     "max": float(e.max()), "q95": float(np.quantile(e, 0.95))})
    return rows


def correlations(estimated, true) -> tuple:
    """(Pearson, Spearman) of paired per-sample values; Spearman uses average ranks."""
    x = np.asarray(estimated, dtype=np.float64).ravel()
    y = np.asarray(true, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"correlations: {x.size} estimates vs {y.size} true values")
    if x.size < 3:
        raise ValueError("correlations need at least 3 pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("correlations undefined for zero-variance input")
    return float(stats.pearsonr(x, y)[0]), float(stats.spearmanr(x, y)[0])


def rank_and_filter(estimated, alpha: float, ids=None) -> np.ndarray:
    """Indices of the ceil(alpha * N / 100) samples with the lowest estimates.

    Ties are broken by ``ids`` (default: position). Indices come back in rank order.
    """
    e = np.asarray(estimated, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("rank_and_filter: empty sample set")
    if not 0 < alpha <= 100:
        raise ValueError(f"alpha must be in (0, 100], got {alpha}")
    ids = np.arange(e.size) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, e))
    return order[:math.ceil(alpha * e.size / 100 - 1e-9)]
