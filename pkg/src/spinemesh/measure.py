"""Vertebra and disc measurements from landmarked shapes, and the α-filtered error report."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import DISCS, VERTEBRAE, GeometryError, Shape

VERTEBRA_FIELDS = ("UVD", "LVD", "MVD", "AVH", "PVH", "MVH", "VHMean")
DISC_FIELDS = ("ADH", "PDH", "MDH", "MDD", "DHMean", "rABA", "rPBA")
# the 14 lengths/ratios reported per sample (disc_area is a helper, not a parameter)
PARAMETERS = VERTEBRA_FIELDS + DISC_FIELDS


@dataclass
class VertebraParams:
    UVD: float
    LVD: float
    MVD: float
    AVH: float
    PVH: float
    MVH: float
    VHMean: float
    area: float


@dataclass
class DiscParams:
    ADH: float
    PDH: float
    MDH: float
    MDD: float
    DHMean: float
    rABA: float
    rPBA: float
    disc_area: float


def polygon_area(points, pixel_spacing_mm: float = 1.0) -> float:
    """Shoelace area (absolute), scaled by spacing squared."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or len(p) < 3:
        raise GeometryError(f"polygon_area needs >= 3 points, got {len(p)}")
    x, y = p[:, 0], p[:, 1]
    a = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    return float(a) * pixel_spacing_mm ** 2


def _signed(p):
    x, y = p[:, 0], p[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _mm_points(shape: Shape, name: str, spacing):
    """Object points and landmarks in mm (image frame)."""
    t = shape.template
    if name not in t.objects:
        raise GeometryError(f"unknown object {name!r}")
    if name not in t.landmarks or any(d not in t.landmarks[name] for d in ("d1", "d2", "d3", "d4")):
        raise GeometryError(f"{name}: missing landmarks")
    spacing = t.pixel_spacing_mm if spacing is None else spacing
    k = t.image_size[1] / 2.0 * spacing
    pts = shape.points * k
    lm = {d: pts[i] for d, i in t.landmarks[name].items()}
    return pts[t.objects[name]], lm


def _dist(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def vertebra_params(shape: Shape, name: str, pixel_spacing_mm: float | None = None,
                    diameter: str = "MVD") -> VertebraParams:
    poly, d = _mm_points(shape, name, pixel_spacing_mm)
    mvd = _dist(0.5 * (d["d1"] + d["d4"]), 0.5 * (d["d2"] + d["d3"]))
    uvd, lvd = _dist(d["d1"], d["d2"]), _dist(d["d3"], d["d4"])
    area = polygon_area(poly)
    if diameter == "MVD":
        diam = mvd
    elif diameter == "mean":
        diam = (uvd + lvd + mvd) / 3.0
    else:
        raise ValueError(f"diameter must be 'MVD' or 'mean', got {diameter!r}")
    if diam <= 0:
        raise GeometryError(f"{name}: zero diameter")
    return VertebraParams(uvd, lvd, mvd, _dist(d["d1"], d["d4"]), _dist(d["d2"], d["d3"]),
                          _dist(d["d5"], d["d7"]), area / diam, area)


def _chord_length(poly, a, b, name):
    """Length of line ab extended to its outermost crossings of the polygon boundary."""
    u = b - a
    q, r = poly, np.roll(poly, -1, axis=0)
    e = r - q
    den = u[0] * e[:, 1] - u[1] * e[:, 0]
    ok = np.abs(den) > 1e-15
    w = q - a
    t = np.where(ok, (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / np.where(ok, den, 1), np.nan)
    s = np.where(ok, (w[:, 0] * u[1] - w[:, 1] * u[0]) / np.where(ok, den, 1), np.nan)
    hit = ok & (s >= -1e-12) & (s <= 1 + 1e-12)
    ts = t[hit]
    if len(ts) < 2 or ts.max() - ts.min() <= 1e-12:
        raise GeometryError(f"{name}: MDD chord does not cross the boundary twice")
    return float((ts.max() - ts.min()) * np.linalg.norm(u))


def _side_bulge(shape: Shape, name: str, start: str, end: str, poly_mm, lm) -> float:
    """Area between the boundary run start->end and its chord, counted only when outward."""
    t = shape.template
    idx = list(t.objects[name])
    i0, i1 = idx.index(t.landmarks[name][start]), idx.index(t.landmarks[name][end])
    run = [poly_mm[(i0 + j) % len(idx)] for j in range((i1 - i0) % len(idx) + 1)]
    if len(run) < 3:
        return 0.0
    return max(0.0, float(_signed(np.asarray(run))))


def disc_params(shape: Shape, name: str, pixel_spacing_mm: float | None = None,
                averaged_area: float | None = None, per_disc_area: bool = False) -> DiscParams:
    """Disc heights, MDD, mean height and relative bulge areas.

    ``averaged_area`` (mm²) defaults to the mean over the shape's five discs.
    """
    poly, d = _mm_points(shape, name, pixel_spacing_mm)
    area = polygon_area(poly)
    mdd = _chord_length(poly, 0.5 * (d["d1"] + d["d4"]), 0.5 * (d["d2"] + d["d3"]), name)
    if per_disc_area:
        avg = area
    elif averaged_area is not None:
        avg = averaged_area
    else:
        avg = float(np.mean([polygon_area(_mm_points(shape, n, pixel_spacing_mm)[0])
                             for n in DISCS if n in shape.template.objects]))
    # anterior run d4 -> d1, posterior run d2 -> d3 (template walk order)
    aba = _side_bulge(shape, name, "d4", "d1", poly, d)
    pba = _side_bulge(shape, name, "d2", "d3", poly, d)
    return DiscParams(_dist(d["d1"], d["d4"]), _dist(d["d2"], d["d3"]), _dist(d["d5"], d["d7"]),
                      mdd, area / mdd, aba / avg, pba / avg, area)


def shape_params(shape: Shape, pixel_spacing_mm: float | None = None, diameter: str = "MVD",
                 per_disc_area: bool = False) -> dict:
    """{object name: params} for every vertebra and disc in the shape."""
    out = {}
    for n in VERTEBRAE:
        if n in shape.template.objects:
            out[n] = vertebra_params(shape, n, pixel_spacing_mm, diameter)
    discs = [n for n in DISCS if n in shape.template.objects]
    if discs:
        avg = float(np.mean([polygon_area(_mm_points(shape, n, pixel_spacing_mm)[0])
                             for n in discs]))
        for n in discs:
            out[n] = disc_params(shape, n, pixel_spacing_mm, avg, per_disc_area)
    return out


def params_table(shape: Shape, **kw) -> dict:
    """{parameter: [values over the objects that carry it]}."""
    table = {p: [] for p in PARAMETERS}
    for obj, prm in shape_params(shape, **kw).items():
        for k, v in asdict(prm).items():
            if k in table:
                table[k].append(v)
    return table


def relative_error_report(pred_shapes, gt_shapes, estimated_errors=None,
                          alphas=(100, 60, 20), **kw) -> list:
    """Rows {alpha, parameter, n, mean, std, max, q95} of |pred - gt| / |gt|.

    Samples are kept per α by ranking ``estimated_errors`` (lowest first);
    without estimates every α keeps all samples.
    """
    from .training import rank_and_filter
    if len(pred_shapes) != len(gt_shapes):
        raise ValueError("pred and gt lists differ in length")
    n = len(gt_shapes)
    per_sample = []
    dropped = 0
    for p, g in zip(pred_shapes, gt_shapes):
        tp, tg = params_table(p, **kw), params_table(g, **kw)
        rel = {}
        for k in PARAMETERS:
            gv, pv = np.asarray(tg[k]), np.asarray(tp[k])
            keep = np.abs(gv) > 0
            dropped += int((~keep).sum())
            rel[k] = np.abs(pv[keep] - gv[keep]) / np.abs(gv[keep])
        per_sample.append(rel)
    if dropped:
        warnings.warn(f"relative_error_report: {dropped} zero-valued GT parameters excluded")
    est = np.zeros(n) if estimated_errors is None else np.asarray(estimated_errors, dtype=float)
    rows = []
    for a in alphas:
        keep = rank_and_filter(est, a) if estimated_errors is not None else np.arange(n)
        for k in PARAMETERS:
            vals = np.concatenate([per_sample[i][k] for i in keep]) if len(keep) else np.zeros(0)
            if len(vals) == 0:
                rows.append({"alpha": a, "parameter": k, "n": 0, "mean": float("nan"),
                             "std": float("nan"), "max": float("nan"), "q95": float("nan")})
                continue
            rows.append({"alpha": a, "parameter": k, "n": int(len(keep)),
                         "mean": float(vals.mean()), "std": float(vals.std()),
                         "max": float(vals.max()), "q95": float(np.quantile(vals, 0.95))})
    return rows
