import json

import numpy as np
import pytest

from spinemesh import geometry as G
from spinemesh import synth
from spinemesh.measure import shape_params


def test_canonical_phantom_deterministic_and_partitioned():
    spec = synth.PhantomSpec(seed=0).canonical()
    a, b = synth.generate(spec), synth.generate(spec)
    assert a.image.tobytes() == b.image.tobytes()
    assert (a.masks.sum(axis=0) == 1).all()
    assert a.masks.shape == (12, 128, 128)


def test_same_seed_bit_identical():
    a = synth.generate(synth.PhantomSpec(seed=11))
    b = synth.generate(synth.PhantomSpec(seed=11))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.shape.points.tobytes() == b.shape.points.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()


def test_different_seeds_differ():
    a = synth.generate(synth.PhantomSpec(seed=1))
    b = synth.generate(synth.PhantomSpec(seed=2))
    assert not np.array_equal(a.shape.points, b.shape.points)


@pytest.mark.parametrize("seed", range(100))
def test_random_phantoms_valid(seed):
    s = synth.generate(synth.PhantomSpec(seed=1000 + seed))
    G.validate_template(s.shape.template.with_points(s.shape.points))
    assert (s.masks.sum(axis=0) == 1).all()
    assert np.abs(s.shape.points).max() < 0.97
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_masks_match_mesh_raster():
    s = synth.generate(synth.PhantomSpec(seed=5))
    np.testing.assert_array_equal(s.masks[1:].astype(bool), G.object_masks(s.shape))


def test_shared_edges_are_identical():
    s = synth.generate(synth.PhantomSpec(seed=6))
    t = s.shape.template
    for upper, disc in zip(G.VERTEBRAE[:5], G.DISCS):
        v, d = t.landmarks[upper], t.landmarks[disc]
        vi, di = list(t.objects[upper]), list(t.objects[disc])
        v_lower = [vi[(vi.index(v["d3"]) + j) % 24] for j in range(7)]
        d_upper = [di[(di.index(d["d1"]) + j) % 20] for j in range(7)]
        np.testing.assert_array_equal(s.shape.points[v_lower][::-1], s.shape.points[d_upper])


def _mm(p):
    return np.asarray(p) * 64 * 0.68


def _reach(origin, u, a, b, amp, centre):
    """Distance along unit u from origin to the bulged side a-b built from its parameters."""
    chord = b - a
    n = np.array([chord[1], -chord[0]]) / np.linalg.norm(chord)
    if np.dot(n, 0.5 * (a + b) - centre) < 0:
        n = -n
    prof = np.array(synth.BULGE_PROFILE)
    pts = [a + chord * f + amp * h * n for f, h in zip(np.linspace(0, 1, 5), prof)]
    best = None
    for p, q in zip(pts[:-1], pts[1:]):
        m = np.array([u, p - q]).T
        if abs(np.linalg.det(m)) < 1e-15:
            continue
        t, s = np.linalg.solve(m, p - origin)
        if -1e-12 <= s <= 1 + 1e-12 and t > 0:
            best = t if best is None else max(best, t)
    return best


def _quad_area(a, b, c, d):
    # half the cross product of the diagonals
    p, q = c - a, d - b
    return 0.5 * abs(p[0] * q[1] - p[1] * q[0])


@pytest.mark.parametrize("seed", [3, 17, 42])
def test_params_match_generating_parameters(seed):
    spec = synth.PhantomSpec(seed=seed)
    sample = synth.generate(spec)
    gp = synth.generate_params(spec)
    got = shape_params(sample.shape)
    disc_areas = []
    for k, name in enumerate(G.OBJECT_NAMES):
        c = {key: _mm(v) for key, v in gp.corners(k).items()}
        quad = _quad_area(c["d1"], c["d2"], c["d3"], c["d4"])
        if name in G.VERTEBRAE:
            p = got[name]
            mvd = np.linalg.norm(0.5 * (c["d1"] + c["d4"]) - 0.5 * (c["d2"] + c["d3"]))
            expect = {"UVD": gp.widths[k] * 64 * 0.68, "LVD": gp.widths[k + 1] * 64 * 0.68,
                      "MVD": mvd, "AVH": np.linalg.norm(c["d1"] - c["d4"]),
                      "PVH": np.linalg.norm(c["d2"] - c["d3"]),
                      "MVH": np.linalg.norm(_mm(gp.centers[k]) - _mm(gp.centers[k + 1])),
                      "VHMean": quad / mvd}
        else:
            j = G.DISCS.index(name)
            la, lp = np.linalg.norm(c["d1"] - c["d4"]), np.linalg.norm(c["d2"] - c["d3"])
            ba, bp = _mm(gp.bulges[j])
            aba, pba = synth.BULGE_AREA_FACTOR * la * ba, synth.BULGE_AREA_FACTOR * lp * bp
            disc_areas.append(quad + aba + pba)
            ma, mp = 0.5 * (c["d1"] + c["d4"]), 0.5 * (c["d2"] + c["d3"])
            u = (mp - ma) / np.linalg.norm(mp - ma)
            qc = 0.25 * (c["d1"] + c["d2"] + c["d3"] + c["d4"])
            mdd = _reach(qc, u, c["d2"], c["d3"], bp, qc) + _reach(qc, -u, c["d4"], c["d1"], ba, qc)
            # the chord passes through qc, the midpoint of ma and mp
            expect = {"ADH": la, "PDH": lp,
                      "MDH": np.linalg.norm(_mm(gp.centers[k]) - _mm(gp.centers[k + 1])),
                      "MDD": mdd, "disc_area": quad + aba + pba}
            expect["DHMean"] = expect["disc_area"] / expect["MDD"]
            expect["_aba"], expect["_pba"] = aba, pba
        for key, v in expect.items():
            if not key.startswith("_"):
                assert getattr(got[name], key) == pytest.approx(v, rel=0.01), (name, key)
        if name in G.DISCS:
            got[name]._expect = expect
    avg = np.mean(disc_areas)
    for name in G.DISCS:
        e = got[name]._expect
        assert got[name].rABA == pytest.approx(e["_aba"] / avg, rel=0.01)
        assert got[name].rPBA == pytest.approx(e["_pba"] / avg, rel=0.01)


def test_split_70_10_20_disjoint_and_deterministic():
    items = list(range(100))
    tr, va, te = synth.split(items, seed=3)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    assert sorted(tr + va + te) == items
    assert synth.split(items, seed=3) == (tr, va, te)


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError, match="sum"):
        synth.split(list(range(10)), (0.5, 0.2, 0.2))


def test_sample_roundtrip_bit_exact(tmp_path):
    s = synth.generate(synth.PhantomSpec(seed=9))
    synth.save_sample(s, tmp_path / "s")
    back = synth.load_sample(tmp_path / "s")
    assert back.image.tobytes() == s.image.tobytes()
    assert back.shape.points.tobytes() == s.shape.points.tobytes()
    assert back.masks.tobytes() == s.masks.tobytes()
    assert json.loads((tmp_path / "s" / "image.json").read_text())["pixel_spacing_mm"] == 0.68
    assert (tmp_path / "s" / "image.raw").stat().st_size == 128 * 128 * 4


def test_missing_masks_optional(tmp_path):
    s = synth.generate(synth.PhantomSpec(seed=9))
    synth.save_sample(s, tmp_path / "s")
    (tmp_path / "s" / "masks.raw").unlink()
    assert synth.load_sample(tmp_path / "s").masks is None
    with pytest.raises(synth.SampleFormatError, match="masks.raw"):
        synth.load_sample(tmp_path / "s", require_masks=True)


def test_dimension_mismatch_names_file(tmp_path):
    s = synth.generate(synth.PhantomSpec(seed=9))
    synth.save_sample(s, tmp_path / "s")
    (tmp_path / "s" / "image.json").write_text(json.dumps({"height": 64, "width": 128}))
    with pytest.raises(synth.SampleFormatError, match="image.raw: size"):
        synth.load_sample(tmp_path / "s")


def test_corrupted_polygon_names_object(tmp_path):
    s = synth.generate(synth.PhantomSpec(seed=9))
    synth.save_sample(s, tmp_path / "s")
    d = json.loads((tmp_path / "s" / "mesh.json").read_text())
    idx = d["objects"]["D3"]
    d["points"][idx[1]], d["points"][idx[11]] = d["points"][idx[11]], d["points"][idx[1]]
    (tmp_path / "s" / "mesh.json").write_text(json.dumps(d))
    with pytest.raises(G.MeshValidationError, match="mesh.json.*D3"):
        synth.load_sample(tmp_path / "s")


def test_malformed_sidecar(tmp_path):
    s = synth.generate(synth.PhantomSpec(seed=9))
    synth.save_sample(s, tmp_path / "s")
    (tmp_path / "s" / "image.json").write_text("{not json")
    with pytest.raises(synth.SampleFormatError, match="image.json"):
        synth.load_sample(tmp_path / "s")
