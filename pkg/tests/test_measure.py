import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinemesh import geometry as G
from spinemesh import measure as M
from spinemesh.synth import PhantomSpec, generate


def _edge(a, b, n):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return [a + (b - a) * t for t in np.linspace(0, 1, n + 1)[:-1]]


def single_object(name, corners, side_runs=None):
    """One-object shape in a frame where normalised units equal mm (side 2, spacing 1)."""
    kind = G.object_kind(name)
    segs = G.EDGE_SEGMENTS[kind]
    d1, d2, d3, d4 = corners
    runs = [_edge(d1, d2, segs[0]), _edge(d2, d3, segs[1]), _edge(d3, d4, segs[2]),
            _edge(d4, d1, segs[3])]
    if side_runs:
        for k, pts in side_runs.items():
            runs[k] = pts
    pts, lm, start = [], {}, 0
    starts = []
    for r in runs:
        starts.append(start)
        pts.extend(r)
        start += len(r)
    lm = {"d1": starts[0], "d2": starts[1], "d3": starts[2], "d4": starts[3],
          "d5": starts[0] + len(runs[0]) // 2, "d6": starts[1] + len(runs[1]) // 2,
          "d7": starts[2] + len(runs[2]) // 2, "d8": starts[3] + len(runs[3]) // 2}
    t = G.MeshTemplate(np.array(pts), {name: np.arange(len(pts))}, {name: lm},
                       pixel_spacing_mm=1.0, image_size=(2, 2))
    return G.Shape(t)


def rect(w, h, x0=0.0, y0=0.0):
    return [(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)]


def rotate(shape, ang, about=(0.0, 0.0)):
    r = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    return shape.with_points((shape.points - about) @ r.T + about)


def test_polygon_area_unit_square_and_translation():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    assert M.polygon_area(sq) == 1.0
    assert M.polygon_area(sq + [3.5, -2.0]) == 1.0
    assert M.polygon_area(sq, 0.5) == 0.25


def test_polygon_area_needs_three_points():
    with pytest.raises(G.GeometryError):
        M.polygon_area([[0, 0], [1, 1]])


def test_polygon_area_fan_triangulation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ang = np.sort(rng.uniform(0, 2 * np.pi, 11))
        poly = rng.uniform(-5, 5, 2) + rng.uniform(1, 4) * np.stack([np.cos(ang), np.sin(ang)], 1)
        fan = 0.0
        for i in range(1, len(poly) - 1):
            u, v = poly[i] - poly[0], poly[i + 1] - poly[0]
            fan += 0.5 * (u[0] * v[1] - u[1] * v[0])
        assert abs(M.polygon_area(poly) - abs(fan)) < 1e-12


def test_rectangle_vertebra_exact():
    w, h = 0.5, 0.3
    p = M.vertebra_params(single_object("L1", rect(w, h, -0.2, -0.1)), "L1")
    for k in ("UVD", "LVD", "MVD"):
        assert getattr(p, k) == pytest.approx(w, abs=1e-15)
    for k in ("AVH", "PVH", "MVH", "VHMean"):
        assert getattr(p, k) == pytest.approx(h, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_rotated_rectangle_invariant(ang, tx, ty):
    s = single_object("L2", rect(0.4, 0.25))
    moved = rotate(s, ang).with_points(rotate(s, ang).points + [tx, ty])
    a, b = M.vertebra_params(s, "L2"), M.vertebra_params(moved, "L2")
    for k in M.VERTEBRA_FIELDS:
        assert getattr(b, k) == pytest.approx(getattr(a, k), abs=1e-12)


def test_trapezoid_hand_computed():
    # upper edge 0.4 wide, lower 0.6, height 0.3, symmetric
    c = [(-0.2, 0.0), (0.2, 0.0), (0.3, 0.3), (-0.3, 0.3)]
    p = M.vertebra_params(single_object("L3", c), "L3")
    leg = math.hypot(0.1, 0.3)
    assert p.UVD == pytest.approx(0.4, abs=1e-12)
    assert p.LVD == pytest.approx(0.6, abs=1e-12)
    assert p.MVD == pytest.approx(0.5, abs=1e-12)
    assert p.AVH == pytest.approx(leg, abs=1e-12)
    assert p.PVH == pytest.approx(leg, abs=1e-12)
    assert p.MVH == pytest.approx(0.3, abs=1e-12)
    assert p.VHMean == pytest.approx(0.5 * (0.4 + 0.6) * 0.3 / 0.5, abs=1e-12)


def test_rectangle_disc():
    s = single_object("D1", rect(0.5, 0.1))
    p = M.disc_params(s, "D1")
    assert p.rABA == 0.0 and p.rPBA == 0.0
    assert p.MDD == pytest.approx(0.5, abs=1e-12)
    assert p.DHMean == pytest.approx(0.1, abs=1e-12)
    assert p.ADH == pytest.approx(0.1) and p.PDH == pytest.approx(0.1) and p.MDH == pytest.approx(0.1)


def test_semicircular_anterior_bulge():
    w, h, n = 0.5, 0.2, 400
    r = h / 2
    # anterior run d4 -> d1 bulging to -x around the left side's midpoint
    th = np.linspace(0.5 * np.pi, 1.5 * np.pi, n + 1)[:-1]
    arc = [np.array([r * np.cos(t), h / 2 + r * np.sin(t)]) for t in th]
    s = single_object("D2", rect(w, h), {3: arc})
    avg = 0.17
    p = M.disc_params(s, "D2", averaged_area=avg)
    discrete = 0.5 * n * r * r * math.sin(math.pi / n)
    assert p.rABA == pytest.approx(discrete / avg, rel=1e-12)
    assert p.rABA == pytest.approx(0.5 * math.pi * r * r / avg, rel=1e-3)
    assert p.rPBA == 0.0
    assert p.MDD == pytest.approx(w + r, abs=1e-12)
    assert p.disc_area == pytest.approx(w * h + discrete, rel=1e-12)


def test_definitional_identities_on_phantom():
    s = generate(PhantomSpec(seed=4))
    for name, prm in M.shape_params(s.shape).items():
        if name in G.VERTEBRAE:
            assert prm.VHMean * prm.MVD == pytest.approx(prm.area, rel=1e-12)
        else:
            assert prm.DHMean * prm.MDD == pytest.approx(prm.disc_area, rel=1e-12)
            assert prm.rABA >= 0 and prm.rPBA >= 0


def test_scaling_behaviour():
    s = generate(PhantomSpec(seed=4)).shape
    c = s.points.mean(axis=0)
    big = s.with_points((s.points - c) * 1.5 + c)
    a, b = M.shape_params(s), M.shape_params(big)
    for name in a:
        for k in M.PARAMETERS:
            if hasattr(a[name], k):
                want = getattr(a[name], k) * (1.0 if k in ("rABA", "rPBA") else 1.5)
                assert getattr(b[name], k) == pytest.approx(want, rel=1e-9)


def test_missing_landmarks():
    s = single_object("L1", rect(0.4, 0.2))
    del s.template.landmarks["L1"]["d3"]
    with pytest.raises(G.GeometryError, match="landmarks"):
        M.vertebra_params(s, "L1")


def test_degenerate_mdd():
    # collapsed disc: mid-line has zero length
    s = single_object("D1", [(0, 0), (0, 0.1), (0, 0.2), (0, 0.1)])
    with pytest.raises(G.GeometryError):
        M.disc_params(s, "D1", averaged_area=1.0)


def test_report_identity_is_zero():
    shapes = [generate(PhantomSpec(seed=i)).shape for i in range(3)]
    rows = M.relative_error_report(shapes, shapes, [0.1, 0.3, 0.2])
    assert {r["alpha"] for r in rows} == {100, 60, 20}
    assert all(r["mean"] == 0 and r["max"] == 0 for r in rows)
    assert len(rows) == 3 * len(M.PARAMETERS)


def test_report_alpha_100_uses_all():
    shapes = [generate(PhantomSpec(seed=i)).shape for i in range(5)]
    preds = [s.with_points(s.points * 1.01) for s in shapes]
    rows = M.relative_error_report(preds, shapes, np.arange(5.0), alphas=(100, 20))
    assert {r["n"] for r in rows if r["alpha"] == 100} == {5}
    assert {r["n"] for r in rows if r["alpha"] == 20} == {1}
