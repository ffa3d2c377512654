"""Synthetic lumbar phantoms (image + mesh + 12-class masks) and the sample directory format.

A phantom is a stack of twelve "endplate" segments along a curved centreline.
Object k spans endplates k and k+1, so each disc shares its upper and lower
edge point-for-point with the neighbouring vertebrae. Disc side walls bulge
outward with a fixed piecewise-linear profile.

Sample directory layout (all little-endian, row-major)::

    image.raw    float32 intensities, height * width values
    image.json   {"height", "width", "pixel_spacing_mm"}
    mesh.json    mesh file (see geometry.mesh_to_dict)
    masks.raw    uint8, 12 planes (background, L1, D1, ..., S1) of height * width
    masks.json   {"planes": 12, "height", "width", "dtype": "u8"}
    meta.json    generator spec echo (free-form)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff.nn import make_rng
from .geometry import (DISCS, EDGE_SEGMENTS, OBJECT_NAMES, GeometryError, MeshTemplate,
                       MeshValidationError, Shape, build_template, label_masks, mesh_from_dict,
                       mesh_to_dict, norm_to_px, rasterize_polygon, validate_template)

# Heights along the centreline, normalised units at scale 1.
VERTEBRA_HEIGHTS = (0.150, 0.155, 0.160, 0.160, 0.155, 0.175)
DISC_HEIGHTS = (0.060, 0.065, 0.070, 0.075, 0.075)
ENDPLATE_WIDTHS = (0.27, 0.28, 0.285, 0.29, 0.295, 0.30, 0.305, 0.31, 0.315, 0.32, 0.32, 0.20)
# Heights of the disc side-wall bulge at the side's sample fractions 0, 1/4, ..., 1.
BULGE_PROFILE = (0.0, math.sqrt(0.5), 1.0, math.sqrt(0.5), 0.0)
# Area under BULGE_PROFILE's polyline per unit chord and unit amplitude.
BULGE_AREA_FACTOR = 0.25 * (sum(BULGE_PROFILE) - 0.5 * (BULGE_PROFILE[0] + BULGE_PROFILE[-1]))


@dataclass
class PhantomSpec:
    seed: int = 0
    image_side: int = 128
    pixel_spacing_mm: float = 0.68
    translation_px: float = 10.0        # uniform in [-t, t] per axis (at 128 px, scaled)
    rotation_rad: float = 0.10
    scale_range: tuple = (0.9, 1.1)
    size_jitter: float = 0.08           # per-object relative height/width jitter
    tilt_jitter_rad: float = 0.05
    curvature_jitter: float = 0.15
    bulge_range: tuple = (0.004, 0.030)
    noise_sigma: float = 0.03
    blur_px: float = 0.5
    supersample: int = 4
    posterior_band: bool = True

    def canonical(self) -> "PhantomSpec":
        """Same spec with every random jitter and the noise switched off."""
        c = PhantomSpec(**asdict(self))
        c.translation_px = c.rotation_rad = c.size_jitter = c.tilt_jitter_rad = 0.0
        c.curvature_jitter = c.noise_sigma = 0.0
        c.scale_range = (1.0, 1.0)
        mid = 0.5 * (self.bulge_range[0] + self.bulge_range[1])
        c.bulge_range = (mid, mid)
        return c


@dataclass
class PhantomParams:
    """Generating parameters of one phantom (enough to recompute its mesh)."""

    centers: np.ndarray          # (12, 2) endplate centres
    angles: np.ndarray           # (12,) endplate direction angles
    widths: np.ndarray           # (12,) endplate widths
    bulges: np.ndarray           # (5, 2) disc bulge amplitude (anterior, posterior)
    intensities: np.ndarray      # (11,) object intensities
    background: np.ndarray       # (3,) background level, x and y gradient

    def corners(self, k: int) -> dict:
        """d1..d4 of object k from its bounding endplates."""
        a0, p0 = self.endplate_ends(k)
        a1, p1 = self.endplate_ends(k + 1)
        return {"d1": a0, "d2": p0, "d3": p1, "d4": a1}

    def endplate_ends(self, k: int):
        n = np.array([math.cos(self.angles[k]), -math.sin(self.angles[k])])
        half = 0.5 * self.widths[k] * n
        return self.centers[k] - half, self.centers[k] + half


@dataclass
class Sample:
    image: np.ndarray
    shape: Shape
    masks: np.ndarray | None = None
    pixel_spacing_mm: float = 0.68
    meta: dict = field(default_factory=dict)
    sample_id: str = ""


# --- generation -------------------------------------------------------------------
def _draw_params(spec: PhantomSpec, rng: np.random.Generator) -> PhantomParams:
    j = spec.size_jitter
    scale = rng.uniform(*spec.scale_range)
    heights = []
    for k in range(11):
        base = VERTEBRA_HEIGHTS[k // 2] if k % 2 == 0 else DISC_HEIGHTS[k // 2]
        heights.append(base * scale * (1 + rng.uniform(-j, j)))
    widths = np.array([w * scale * (1 + rng.uniform(-j, j)) for w in ENDPLATE_WIDTHS])

    # tangent angle phi(s) = a + kappa * s; (sin phi, cos phi) points down the spine
    cj = spec.curvature_jitter
    a = -0.25 * (1 + rng.uniform(-cj, cj)) + rng.uniform(-spec.rotation_rad, spec.rotation_rad)
    kappa = 0.46 * (1 + rng.uniform(-cj, cj))
    s = np.concatenate([[0.0], np.cumsum(heights)])
    # integrate the centreline exactly for a linear tangent angle
    fine = np.linspace(0, s[-1], 2001)
    phi = a + kappa * fine
    dx = np.concatenate([[0.0], np.cumsum(np.diff(fine) * np.sin(0.5 * (phi[1:] + phi[:-1])))])
    dy = np.concatenate([[0.0], np.cumsum(np.diff(fine) * np.cos(0.5 * (phi[1:] + phi[:-1])))])
    cx, cy = np.interp(s, fine, dx), np.interp(s, fine, dy)
    centers = np.stack([cx, cy], axis=1)
    angles = a + kappa * s + rng.uniform(-spec.tilt_jitter_rad, spec.tilt_jitter_rad, 12)
    angles[11] += 0.30  # sacral tilt
    centers -= centers.mean(axis=0)
    t = spec.translation_px * 2.0 / 128.0
    centers += rng.uniform(-t, t, 2)
    bulges = rng.uniform(*spec.bulge_range, (5, 2))
    intens = np.array([rng.uniform(0.62, 0.78) if k % 2 == 0 else rng.uniform(0.38, 0.52)
                       for k in range(11)])
    if spec.noise_sigma == 0 and spec.size_jitter == 0:
        intens = np.where(np.arange(11) % 2 == 0, 0.7, 0.45)
    background = np.array([rng.uniform(0.12, 0.25), rng.uniform(-0.05, 0.05),
                           rng.uniform(-0.05, 0.05)])
    return PhantomParams(centers, angles, widths, bulges, intens, background)


def _edge(a, b, n_seg):
    t = np.linspace(0.0, 1.0, n_seg + 1)[:, None]
    out = a + (b - a) * t
    out[-1] = b  # exact endpoint so neighbours share corners bitwise
    return out


def _bulged_side(a, b, amp, quad_center):
    chord = b - a
    normal = np.array([chord[1], -chord[0]]) / np.linalg.norm(chord)
    if np.dot(normal, 0.5 * (a + b) - quad_center) < 0:
        normal = -normal
    pts = _edge(a, b, len(BULGE_PROFILE) - 1)
    return pts + np.asarray(BULGE_PROFILE)[:, None] * amp * normal


def shape_points(params: PhantomParams) -> np.ndarray:
    """Ordered mesh points for all 11 objects (template layout)."""
    plates = []
    for k in range(12):
        ant, post = params.endplate_ends(k)
        plates.append(_edge(ant, post, EDGE_SEGMENTS["vertebra"][0]))
    out = []
    for k, name in enumerate(OBJECT_NAMES):
        c = params.corners(k)
        top, bottom = plates[k], plates[k + 1][::-1]
        if name in DISCS:
            qc = np.mean([c["d1"], c["d2"], c["d3"], c["d4"]], axis=0)
            b_ant, b_post = params.bulges[DISCS.index(name)]
            post = _bulged_side(c["d2"], c["d3"], b_post, qc)
            ant = _bulged_side(c["d4"], c["d1"], b_ant, qc)
        else:
            n_side = EDGE_SEGMENTS["vertebra"][1]
            post = _edge(c["d2"], c["d3"], n_side)
            ant = _edge(c["d4"], c["d1"], n_side)
        out.append(np.concatenate([top[:-1], post[:-1], bottom[:-1], ant[:-1]]))
    return np.concatenate(out)


def _render(params: PhantomParams, points: np.ndarray, spec: PhantomSpec, template: MeshTemplate,
            rng: np.random.Generator) -> np.ndarray:
    side, ss = spec.image_side, spec.supersample
    big = side * ss
    u = (np.arange(side) + 0.5) * 2.0 / side - 1.0
    xx, yy = np.meshgrid(u, u)
    b0, gx, gy = params.background
    img = b0 + gx * xx + gy * yy
    cover = np.zeros((side, side))
    layer = np.zeros((side, side))
    px = norm_to_px(points, big)

    def coverage(poly_px):
        m = rasterize_polygon(poly_px, big, big, check=False).astype(np.float64)
        return m.reshape(side, ss, side, ss).mean(axis=(1, 3))

    if spec.posterior_band:
        # canal-like band behind the posterior walls
        post = np.array([params.endplate_ends(k)[1] for k in range(11)])
        offs = np.array([math.cos(a) for a in params.angles[:11]]), \
            np.array([-math.sin(a) for a in params.angles[:11]])
        n = np.stack(offs, axis=1)
        inner, outer = post + 0.05 * n, post + 0.13 * n
        band = np.concatenate([inner, outer[::-1]])
        cv = coverage(norm_to_px(band, big))
        layer += cv * 0.32
        cover += cv
    for k, idx in enumerate(template.objects.values()):
        cv = coverage(px[idx])
        layer += cv * params.intensities[k]
        cover += cv
    cover = np.clip(cover, 0.0, 1.0)
    img = img * (1.0 - cover) + layer
    if spec.blur_px > 0:
        img = gaussian_filter(img, spec.blur_px, mode="nearest")
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32).astype(np.float64)


def draw_params(spec: PhantomSpec) -> PhantomParams:
    return _draw_params(spec, make_rng(spec.seed))


def generate(spec: PhantomSpec, max_tries: int = 10) -> Sample:
    """Render one phantom. Retries with derived seeds if objects collide."""
    for attempt in range(max_tries):
        rng = make_rng(spec.seed * 7919 + attempt)
        params = _draw_params(spec, rng)
        pts = shape_points(params)
        t = build_template(pts, spec.pixel_spacing_mm, (spec.image_side, spec.image_side))
        try:
            validate_template(t)
            if np.abs(pts).max() > 0.97:
                raise GeometryError("phantom leaves the image")
            masks = label_masks(Shape(t), spec.image_side)
        except GeometryError:
            continue
        img = _render(params, pts, spec, t, rng)
        meta = {"spec": _jsonable(asdict(spec)), "attempt": attempt}
        return Sample(img, Shape(canonical_template(spec), pts), masks, spec.pixel_spacing_mm,
                      meta, f"{spec.seed:06d}")
    raise GeometryError(f"generate: seed {spec.seed} produced no valid phantom "
                        f"after {max_tries} tries")


def generate_params(spec: PhantomSpec) -> PhantomParams:
    """Generating parameters of the phantom ``generate(spec)`` returns."""
    s = generate(spec)
    return _draw_params(spec, make_rng(spec.seed * 7919 + s.meta["attempt"]))


_TEMPLATE_CACHE: dict = {}


def canonical_template(spec: PhantomSpec | None = None) -> MeshTemplate:
    """Mean phantom mesh, centred on the image centre; the default template."""
    spec = spec or PhantomSpec()
    key = (spec.image_side, spec.pixel_spacing_mm)
    if key not in _TEMPLATE_CACHE:
        c = spec.canonical()
        params = _draw_params(c, make_rng(0))
        pts = shape_points(params)
        pts -= pts.mean(axis=0)
        t = build_template(pts, spec.pixel_spacing_mm, (spec.image_side, spec.image_side))
        validate_template(t)
        _TEMPLATE_CACHE[key] = t
    return _TEMPLATE_CACHE[key]


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0] % (2 ** 31))


def generate_dataset(count: int, seed: int = 0, **spec_kwargs) -> list:
    out = []
    for i in range(count):
        s = generate(PhantomSpec(seed=sample_seed(seed, i), **spec_kwargs))
        s.sample_id = f"{i:05d}"
        out.append(s)
    return out


def split(dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Deterministic shuffled split into (train, val, test)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset)
    order = make_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([dataset[i] for i in sorted(p)] for p in parts)


# --- sample directory I/O ---------------------------------------------------------
class SampleFormatError(ValueError):
    def __init__(self, path, field_name, message):
        self.path, self.field = str(path), field_name
        super().__init__(f"{path}: {field_name}: {message}")


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def save_sample(sample: Sample, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = sample.image.shape
    (d / "image.raw").write_bytes(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
    (d / "image.json").write_text(json.dumps(
        {"height": h, "width": w, "pixel_spacing_mm": sample.pixel_spacing_mm}, indent=1))
    mesh = mesh_to_dict(sample.shape)
    mesh["pixel_spacing_mm"] = sample.pixel_spacing_mm
    (d / "mesh.json").write_text(json.dumps(mesh, indent=1))
    if sample.masks is not None:
        m = np.ascontiguousarray(sample.masks, dtype=np.uint8)
        (d / "masks.raw").write_bytes(m.tobytes())
        (d / "masks.json").write_text(json.dumps(
            {"planes": int(m.shape[0]), "height": h, "width": w, "dtype": "u8"}, indent=1))
    (d / "meta.json").write_text(json.dumps(_jsonable(sample.meta), indent=1, sort_keys=True))


def _read_json(path: Path):
    if not path.exists():
        raise SampleFormatError(path, "file", "missing")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SampleFormatError(path, "json", str(exc)) from None


def load_sample(directory, template: MeshTemplate | None = None, require_masks: bool = False,
                validate_polygons: bool = True) -> Sample:
    d = Path(directory)
    info = _read_json(d / "image.json")
    for key in ("height", "width"):
        if not isinstance(info.get(key), int) or info[key] < 2:
            raise SampleFormatError(d / "image.json", key, "must be an integer >= 2")
    h, w = info["height"], info["width"]
    spacing = float(info.get("pixel_spacing_mm", 0.68))
    raw = (d / "image.raw").read_bytes() if (d / "image.raw").exists() else None
    if raw is None:
        raise SampleFormatError(d / "image.raw", "file", "missing")
    if len(raw) != 4 * h * w:
        raise SampleFormatError(d / "image.raw", "size", f"{len(raw)} bytes, expected {4 * h * w}")
    img = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
    if not np.isfinite(img).all():
        raise SampleFormatError(d / "image.raw", "values", "non-finite intensity")
    lo, hi = img.min(), img.max()
    if lo < 0.0 or hi > 1.0:
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)

    mesh_d = _read_json(d / "mesh.json")
    try:
        mt = mesh_from_dict(mesh_d, str(d / "mesh.json"), polygons=validate_polygons)
    except MeshValidationError:
        raise
    if template is None:
        template = mt.with_points(mt.points)
    elif not template.same_topology(mt):
        raise SampleFormatError(d / "mesh.json", "objects", "topology differs from template")
    shape = Shape(template, mt.points)

    masks = None
    if (d / "masks.raw").exists():
        minfo = _read_json(d / "masks.json")
        if minfo.get("dtype") != "u8" or minfo.get("height") != h or minfo.get("width") != w:
            raise SampleFormatError(d / "masks.json", "dims", "must match the image and be u8")
        planes = int(minfo.get("planes", 12))
        mraw = (d / "masks.raw").read_bytes()
        if len(mraw) != planes * h * w:
            raise SampleFormatError(d / "masks.raw", "size",
                                    f"{len(mraw)} bytes, expected {planes * h * w}")
        masks = np.frombuffer(mraw, dtype=np.uint8).reshape(planes, h, w).copy()
    elif require_masks:
        raise SampleFormatError(d / "masks.raw", "file", "missing")
    meta = _read_json(d / "meta.json") if (d / "meta.json").exists() else {}
    return Sample(img, shape, masks, spacing, meta, d.name)


def save_dataset(samples, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, root / s.sample_id)


def load_dataset(root, template: MeshTemplate | None = None, **kw) -> list:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "image.json").exists())
    if not dirs:
        raise SampleFormatError(root, "directory", "no sample directories found")
    return [load_sample(p, template, **kw) for p in dirs]
