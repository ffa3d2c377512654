"""Lumbar mesh templates, shapes, APPD/Dice metrics and template perturbations.

Coordinates are normalised to [-1, 1]^2 with x to the right and y down. For an
image of side ``W`` the pixel-unit coordinate is ``u = (x + 1) * W / 2`` and
pixel column ``c`` has its centre at ``u = c + 0.5``.

Object polygons run d1 -> d2 -> d3 -> d4: upper-anterior, upper-posterior,
lower-posterior, lower-anterior corners, with anterior on the -x side. That
order has positive shoelace area in these (x, y) coordinates, which is what
"counter-clockwise" means throughout the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

OBJECT_NAMES = ("L1", "D1", "L2", "D2", "L3", "D3", "L4", "D4", "L5", "D5", "S1")
VERTEBRAE = ("L1", "L2", "L3", "L4", "L5", "S1")
DISCS = ("D1", "D2", "D3", "D4", "D5")
LANDMARKS = ("d1", "d2", "d3", "d4", "d5", "d6", "d7", "d8")

# Boundary sampling per object kind: segments on the (upper, posterior, lower,
# anterior) edges. Upper/lower edges share their sampling so a disc endplate
# can coincide point-for-point with the neighbouring vertebra endplate.
EDGE_SEGMENTS = {"vertebra": (6, 6, 6, 6), "disc": (6, 4, 6, 4)}


def object_kind(name: str) -> str:
    return "disc" if name.startswith("D") else "vertebra"


def landmark_offsets(kind: str) -> dict:
    """Within-object indices of d1..d8 (corners, then mid-edge points)."""
    up, post, low, ant = EDGE_SEGMENTS[kind]
    d1, d2 = 0, up
    d3 = d2 + post
    d4 = d3 + low
    return {"d1": d1, "d2": d2, "d3": d3, "d4": d4,
            "d5": up // 2, "d6": d2 + post // 2, "d7": d3 + low // 2, "d8": d4 + ant // 2}


def points_per_object(kind: str) -> int:
    return sum(EDGE_SEGMENTS[kind])


class GeometryError(ValueError):
    pass


class MeshValidationError(GeometryError):
    def __init__(self, where: str, field_name: str, message: str):
        self.where, self.field = where, field_name
        super().__init__(f"{where}: {field_name}: {message}")


@dataclass
class MeshTemplate:
    """Fixed-topology contour set: 11 closed polygons over one point array."""

    points: np.ndarray
    objects: dict
    landmarks: dict
    pixel_spacing_mm: float = 0.68
    image_size: tuple = (128, 128)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.objects = {k: np.asarray(v, dtype=np.intp) for k, v in self.objects.items()}
        self.landmarks = {k: {d: int(i) for d, i in v.items()} for k, v in self.landmarks.items()}
        self.image_size = tuple(int(s) for s in self.image_size)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def with_points(self, points) -> "MeshTemplate":
        return MeshTemplate(np.array(points, dtype=np.float64), self.objects, self.landmarks,
                            self.pixel_spacing_mm, self.image_size)

    def edges(self) -> np.ndarray:
        out = []
        for idx in self.objects.values():
            out.extend(zip(idx, np.roll(idx, -1)))
        return np.asarray(out, dtype=np.intp)

    def same_topology(self, other: "MeshTemplate") -> bool:
        return (self.n_points == other.n_points
                and list(self.objects) == list(other.objects)
                and all(np.array_equal(self.objects[k], other.objects[k]) for k in self.objects)
                and self.landmarks == other.landmarks)

    def object_index(self) -> np.ndarray:
        """Object number (0..10, OBJECT_NAMES order) of every point."""
        lab = np.full(self.n_points, -1, dtype=np.intp)
        for k, name in enumerate(self.objects):
            lab[self.objects[name]] = k
        return lab


@dataclass
class Shape:
    """Point positions sharing a template's topology."""

    template: MeshTemplate
    points: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.points is None:
            self.points = self.template.points.copy()
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != self.template.points.shape:
            raise GeometryError(f"shape has {self.points.shape} points, template "
                                f"{self.template.points.shape}")

    @property
    def n_points(self) -> int:
        return len(self.points)

    def with_points(self, points) -> "Shape":
        return Shape(self.template, np.array(points, dtype=np.float64))

    def object_points(self, name: str) -> np.ndarray:
        return self.points[self.template.objects[name]]

    def landmark(self, name: str, d: str) -> np.ndarray:
        return self.points[self.template.landmarks[name][d]]


def build_template(points, pixel_spacing_mm: float = 0.68, image_size=(128, 128)) -> MeshTemplate:
    """Wrap an (N_p, 2) array laid out object-by-object in OBJECT_NAMES order."""
    objects, landmarks, start = {}, {}, 0
    for name in OBJECT_NAMES:
        kind = object_kind(name)
        n = points_per_object(kind)
        objects[name] = np.arange(start, start + n)
        landmarks[name] = {d: start + o for d, o in landmark_offsets(kind).items()}
        start += n
    points = np.asarray(points, dtype=np.float64)
    if len(points) != start:
        raise GeometryError(f"expected {start} points, got {len(points)}")
    return MeshTemplate(points, objects, landmarks, pixel_spacing_mm, image_size)


# --- polygon utilities -------------------------------------------------------
def signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) \
        - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def polygon_is_simple(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges touch and no edge is degenerate."""
    poly = np.asarray(poly, dtype=np.float64)
    n = len(poly)
    if n < 3:
        return False
    a, b = poly, np.roll(poly, -1, axis=0)
    if np.any(np.all(a == b, axis=1)):
        return False
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]
    o1, o2 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    o3, o4 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    if proper.any():
        return False

    def on_seg(p, q, r, o):
        return (o == 0) & (np.minimum(p[:, 0], q[:, 0]) <= r[:, 0]) \
            & (r[:, 0] <= np.maximum(p[:, 0], q[:, 0])) \
            & (np.minimum(p[:, 1], q[:, 1]) <= r[:, 1]) & (r[:, 1] <= np.maximum(p[:, 1], q[:, 1]))
    touch = on_seg(p1, p2, q1, o1) | on_seg(p1, p2, q2, o2) \
        | on_seg(q1, q2, p1, o3) | on_seg(q1, q2, p2, o4)
    return not touch.any()


def validate_template(t: MeshTemplate, where: str = "template", polygons: bool = True):
    """Raise MeshValidationError unless every topology invariant holds.

    ``polygons=False`` skips the simplicity/orientation checks, for predicted
    shapes that share the topology but may fold.
    """
    n = t.n_points
    if t.points.ndim != 2 or t.points.shape[1] != 2:
        raise MeshValidationError(where, "points", f"expected (N, 2), got {t.points.shape}")
    if not np.isfinite(t.points).all():
        raise MeshValidationError(where, "points", "non-finite coordinate")
    if tuple(t.objects) != OBJECT_NAMES:
        raise MeshValidationError(where, "objects", f"expected {OBJECT_NAMES}, got {tuple(t.objects)}")
    counts = np.zeros(n, dtype=int)
    for name, idx in t.objects.items():
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise MeshValidationError(where, f"objects.{name}", "index out of range")
        np.add.at(counts, idx, 1)
    if np.any(counts != 1):
        bad = int(np.flatnonzero(counts != 1)[0])
        raise MeshValidationError(where, "objects", f"point {bad} belongs to {counts[bad]} objects")
    for name, idx in t.objects.items():
        poly = t.points[idx]
        if polygons and not polygon_is_simple(poly):
            raise MeshValidationError(where, f"objects.{name}", "polygon is self-intersecting")
        if polygons and signed_area(poly) <= 0:
            raise MeshValidationError(where, f"objects.{name}", "polygon is not counter-clockwise")
        lm = t.landmarks.get(name)
        if lm is None or set(lm) != set(LANDMARKS):
            raise MeshValidationError(where, f"landmarks.{name}", "needs d1..d8")
        members = set(idx.tolist())
        for d, i in lm.items():
            if i not in members:
                raise MeshValidationError(where, f"landmarks.{name}.{d}",
                                          f"index {i} not on object")


# --- metrics ------------------------------------------------------------------
def centroid(shape) -> np.ndarray:
    """Arithmetic mean of all points."""
    pts = np.asarray(shape.points if hasattr(shape, "points") else shape, dtype=np.float64)
    if len(pts) == 0:
        raise GeometryError("centroid of empty point set")
    return pts.mean(axis=0)


def norm_to_px(points, side: int) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) + 1.0) * (side / 2.0)


def px_to_norm(points, side: int) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * (2.0 / side) - 1.0


def _check_pair(pred, gt):
    if not pred.template.same_topology(gt.template):
        raise GeometryError("template mismatch between shapes")


def point_errors_px(pred: Shape, gt: Shape) -> np.ndarray:
    """Per-point Euclidean distance in pixels."""
    _check_pair(pred, gt)
    side = gt.template.image_size[1]
    return np.linalg.norm(pred.points - gt.points, axis=1) * (side / 2.0)


def appd(pred: Shape, gt: Shape, pixel_spacing_mm: float | None = None) -> dict:
    """Average point-to-point distance per object and the mean of the 11 ('whole').

    Values are in mm, or in pixels when ``pixel_spacing_mm`` is 1.
    """
    spacing = gt.template.pixel_spacing_mm if pixel_spacing_mm is None else pixel_spacing_mm
    d = point_errors_px(pred, gt) * spacing
    out = {name: float(d[idx].mean()) for name, idx in gt.template.objects.items()}
    out["whole"] = float(np.mean([out[n] for n in gt.template.objects]))
    return out


def rasterize_polygon(points_px, height: int, width: int, check: bool = True) -> np.ndarray:
    """Scanline fill with the even-odd rule, sampling pixel centres.

    ``points_px`` are pixel-unit coordinates (pixel (r, c) has centre
    (c + 0.5, r + 0.5)). Crossings are half-open in y and spans half-open in
    x, so polygons sharing an edge never claim the same pixel.
    """
    poly = np.asarray(points_px, dtype=np.float64)
    if check and not polygon_is_simple(poly):
        raise GeometryError("rasterize_polygon: polygon is self-intersecting")
    mask = np.zeros((height, width), dtype=bool)
    a, b = poly, np.roll(poly, -1, axis=0)
    # canonical orientation makes crossings of a shared edge bitwise identical
    swap = (a[:, 1] > b[:, 1]) | ((a[:, 1] == b[:, 1]) & (a[:, 0] > b[:, 0]))
    lo = np.where(swap[:, None], b, a)
    hi = np.where(swap[:, None], a, b)
    keep = lo[:, 1] != hi[:, 1]
    lo, hi = lo[keep], hi[keep]
    if len(lo) == 0:
        return mask
    r0 = max(0, int(math.floor(lo[:, 1].min() - 0.5)))
    r1 = min(height - 1, int(math.ceil(hi[:, 1].max() - 0.5)))
    slope = (hi[:, 0] - lo[:, 0]) / (hi[:, 1] - lo[:, 1])
    for r in range(r0, r1 + 1):
        yc = r + 0.5
        act = (lo[:, 1] <= yc) & (yc < hi[:, 1])
        if not act.any():
            continue
        xs = np.sort(lo[act, 0] + (yc - lo[act, 1]) * slope[act])
        for xl, xr in zip(xs[0::2], xs[1::2]):
            c0 = max(0, int(math.ceil(xl - 0.5)))
            c1 = min(width, int(math.ceil(xr - 0.5)))
            if c1 > c0:
                mask[r, c0:c1] ^= True
    return mask


def object_masks(shape: Shape, side: int | None = None, check: bool = True) -> np.ndarray:
    """Boolean (11, side, side) masks, one per object, from the shape polygons."""
    side = side or shape.template.image_size[0]
    px = norm_to_px(shape.points, side)
    return np.stack([rasterize_polygon(px[idx], side, side, check=check)
                     for idx in shape.template.objects.values()])


def label_masks(shape: Shape, side: int | None = None) -> np.ndarray:
    """(12, side, side) uint8 one-hot planes: background then the 11 objects."""
    obj = object_masks(shape, side)
    if (obj.sum(axis=0) > 1).any():
        raise GeometryError("objects overlap when rasterised")
    bg = ~obj.any(axis=0)
    return np.concatenate([bg[None], obj]).astype(np.uint8)


def dice(pred: Shape, gt: Shape, raster_side: int | None = None) -> dict:
    """Per-object Dice on rasterised polygons plus the mean of the 11 ('whole')."""
    _check_pair(pred, gt)
    side = raster_side or gt.template.image_size[0]
    pm = object_masks(pred, side, check=False)
    gm = object_masks(gt, side, check=False)
    out = {}
    for k, name in enumerate(gt.template.objects):
        inter = np.logical_and(pm[k], gm[k]).sum()
        tot = pm[k].sum() + gm[k].sum()
        out[name] = float(2.0 * inter / tot) if tot else 1.0
    out["whole"] = float(np.mean([out[n] for n in gt.template.objects]))
    return out


# --- perturbations -------------------------------------------------------------
def _shapes_simple(t, points) -> bool:
    return all(polygon_is_simple(points[idx]) and signed_area(points[idx]) > 0
               for idx in _objects_of(t).values())


def _objects_of(t):
    return t.objects if isinstance(t, MeshTemplate) else t.template.objects


def nonlinear_warp(template, seed: int, magnitude: float, max_tries: int = 20):
    """Smooth random warp: affine jitter about the centroid plus a low-frequency
    sinusoidal displacement field whose amplitude is at most ``magnitude``.

    Works on MeshTemplate or Shape and returns the same type. A warp that
    breaks an object polygon is redrawn with the next sub-seed.
    """
    from .autodiff.nn import make_rng
    if magnitude < 0:
        raise GeometryError("warp magnitude must be >= 0")
    pts = np.asarray(template.points, dtype=np.float64)
    if magnitude == 0:
        return template.with_points(pts.copy())
    c = pts.mean(axis=0)
    for attempt in range(max_tries):
        rng = make_rng(seed * 1009 + attempt)
        A = np.eye(2) + rng.uniform(-1, 1, (2, 2)) * magnitude
        field_disp = np.zeros_like(pts)
        for _ in range(3):
            freq = rng.uniform(0.5, 2.0, 2) * rng.choice([-1, 1], 2) * math.pi / 2
            phase = rng.uniform(0, 2 * math.pi)
            amp = rng.uniform(-1, 1, 2)
            field_disp += np.sin(pts @ freq + phase)[:, None] * amp
        peak = np.linalg.norm(field_disp, axis=1).max()
        if peak > 0:
            field_disp *= magnitude / peak
        out = (pts - c) @ A.T + c + field_disp
        if _shapes_simple(template, out):
            return template.with_points(out)
    raise GeometryError(f"nonlinear_warp: no valid warp after {max_tries} tries")


def translate(template, offset):
    return template.with_points(np.asarray(template.points) + np.asarray(offset, dtype=np.float64))


def place_at(template, center):
    """Rigidly translate so the point centroid sits at ``center``."""
    return translate(template, np.asarray(center, dtype=np.float64) - centroid(template))


def random_shift_in_circle(template, radius_px: float, seed: int, side: int | None = None):
    """Rigid translation by a point drawn uniformly from a disk of ``radius_px`` pixels."""
    from .autodiff.nn import make_rng
    if radius_px < 0:
        raise GeometryError("radius must be >= 0")
    if radius_px == 0:
        return template.with_points(np.asarray(template.points).copy())
    side = side or (template.image_size if isinstance(template, MeshTemplate)
                    else template.template.image_size)[1]
    rng = make_rng(seed)
    r = radius_px * math.sqrt(rng.uniform())
    th = rng.uniform(0, 2 * math.pi)
    shift_px = np.array([r * math.cos(th), r * math.sin(th)])
    return translate(template, shift_px * (2.0 / side))


# --- file format -----------------------------------------------------------------
def mesh_to_dict(mesh) -> dict:
    t = mesh if isinstance(mesh, MeshTemplate) else mesh.template
    return {
        "points": [[float(x), float(y)] for x, y in mesh.points],
        "objects": {k: [int(i) for i in v] for k, v in t.objects.items()},
        "landmarks": {k: dict(v) for k, v in t.landmarks.items()},
        "pixel_spacing_mm": float(t.pixel_spacing_mm),
        "image_size": list(t.image_size),
    }


def save_mesh(path, mesh):
    Path(path).write_text(json.dumps(mesh_to_dict(mesh), indent=1))


def mesh_from_dict(d: Mapping, where: str = "mesh", polygons: bool = True) -> MeshTemplate:
    for key in ("points", "objects", "landmarks"):
        if key not in d:
            raise MeshValidationError(where, key, "missing")
    try:
        pts = np.asarray(d["points"], dtype=np.float64)
    except (TypeError, ValueError):
        raise MeshValidationError(where, "points", "not a numeric list") from None
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise MeshValidationError(where, "points", f"expected [[x, y], ...], got shape {pts.shape}")
    t = MeshTemplate(pts, {k: d["objects"][k] for k in d["objects"]}, d["landmarks"],
                     float(d.get("pixel_spacing_mm", 0.68)),
                     tuple(d.get("image_size", (128, 128))))
    validate_template(t, where, polygons)
    return t


def load_mesh(path, template: MeshTemplate | None = None, polygons: bool = True):
    """Load a mesh file; with ``template`` given, return a Shape on that template."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshValidationError(str(path), "json", str(exc)) from None
    t = mesh_from_dict(d, str(path), polygons)
    if template is None:
        return t
    if not template.same_topology(t):
        raise MeshValidationError(str(path), "objects", "topology differs from template")
    return Shape(template, t.points)
