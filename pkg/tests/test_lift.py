import numpy as np
import pytest

from seqsplat.lift import (
    FeatureBank, FeatureMap, ProceduralFeatureizer, lift_features, lift_pipeline, load_bank,
    procedural_featureize, save_bank, upsample_bilinear,
)
from seqsplat.raster import WeightRecords, default_view_ring, render_rgb, render_weights

from conftest import random_camera, random_scene
from oracles import brute_lift, brute_weights


def _records(entries, width=4, height=3):
    """WeightRecords from (x, y, gaussian, weight) tuples."""
    x, y, g, w = (np.array(c) for c in zip(*entries))
    return WeightRecords(x.astype(np.int64), y.astype(np.int64), g.astype(np.int64),
                         w.astype(np.float64), width, height, np.ones((height, width)))


def _dense_from(rec, n):
    out = np.zeros((rec.height, rec.width, n))
    np.add.at(out, (rec.pixel_y, rec.pixel_x, rec.gaussian), rec.weight)
    return out


def _views(rng, scene, m, d=5, width=16, height=12):
    cams = [random_camera(rng, width, height) for _ in range(m)]
    maps = [FeatureMap(rng.normal(size=(height, width, d)), v) for v in range(m)]
    recs = [render_weights(scene, c) for c in cams]
    return cams, maps, recs


def test_single_record_returns_pixel_feature(rng):
    scene = random_scene(rng, 1)
    cam = random_camera(rng, 4, 3)
    fmap = FeatureMap(rng.normal(size=(3, 4, 2)))
    bank = lift_features(scene, [cam], [fmap], [_records([(2, 1, 0, 0.7)])])
    np.testing.assert_allclose(bank.data[0], fmap.data[1, 2], atol=1e-15)
    assert bank.coverage[0] == pytest.approx(0.7)


def test_two_records_weighted_mean(rng):
    scene = random_scene(rng, 2)
    cam = random_camera(rng, 4, 3)
    data = np.zeros((3, 4, 2))
    a, b = np.array([1.0, -2.0]), np.array([5.0, 4.0])
    data[0, 0], data[2, 3] = a, b
    bank = lift_features(scene, [cam], [FeatureMap(data)], [_records([(0, 0, 1, 1.0), (3, 2, 1, 3.0)])])
    np.testing.assert_allclose(bank.data[1], (a + 3 * b) / 4, atol=1e-15)
    np.testing.assert_array_equal(bank.data[0], [0, 0])  # uncovered
    assert bank.coverage[0] == 0


def test_constant_features_are_reproduced(rng):
    scene = random_scene(rng, 30)
    cams, maps, recs = _views(rng, scene, 3)
    c = rng.normal(size=5)
    maps = [FeatureMap(np.broadcast_to(c, m.data.shape).copy(), m.view_id) for m in maps]
    bank = lift_features(scene, cams, maps, recs)
    cov = bank.coverage > 0
    assert cov.any()
    np.testing.assert_allclose(bank.data[cov], np.broadcast_to(c, (cov.sum(), 5)), atol=1e-12)
    assert np.all(bank.data[~cov] == 0)


@pytest.mark.parametrize("seed", range(3))
def test_matches_brute_force_lift(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 20, spread=0.7, scale=(0.05, 0.3))
    cams, maps, recs = _views(rng, scene, 3, d=3, width=14, height=10)
    bank = lift_features(scene, cams, maps, recs)
    ref, den = brute_lift(scene.n, [m.data for m in maps], [_dense_from(r, scene.n) for r in recs])
    np.testing.assert_allclose(bank.data, ref, atol=1e-9)
    np.testing.assert_allclose(bank.coverage, den, atol=1e-12)


def test_dense_oracle_weights_agree_with_records(rng):
    scene = random_scene(rng, 15, spread=0.6, scale=(0.05, 0.3))
    cam = random_camera(rng, 12, 10)
    maps = [FeatureMap(rng.normal(size=(10, 12, 2)))]
    full = render_weights(scene, cam, cutoff=0.0)
    dense, _ = brute_weights(scene, cam)
    ref, _ = brute_lift(scene.n, [maps[0].data], [dense])
    np.testing.assert_allclose(lift_features(scene, [cam], maps, [full]).data, ref, atol=1e-9)


def test_convex_combination_bounds(rng):
    scene = random_scene(rng, 40)
    cams, maps, recs = _views(rng, scene, 2)
    bank = lift_features(scene, cams, maps, recs)
    for i in np.flatnonzero(bank.coverage > 0):
        feats = np.concatenate([m.data[r.pixel_y[r.gaussian == i], r.pixel_x[r.gaussian == i]]
                                for m, r in zip(maps, recs)])
        assert np.all(bank.data[i] >= feats.min(0) - 1e-12)
        assert np.all(bank.data[i] <= feats.max(0) + 1e-12)


def test_weight_scaling_invariance(rng):
    scene = random_scene(rng, 25)
    cams, maps, recs = _views(rng, scene, 2)
    base = lift_features(scene, cams, maps, recs)
    scaled = [WeightRecords(r.pixel_x, r.pixel_y, r.gaussian, r.weight * 7.3, r.width, r.height,
                            r.transmittance) for r in recs]
    np.testing.assert_allclose(lift_features(scene, cams, maps, scaled).data, base.data, atol=1e-9)


def test_view_permutation_invariance(rng):
    scene = random_scene(rng, 25)
    cams, maps, recs = _views(rng, scene, 4)
    base = lift_features(scene, cams, maps, recs)
    perm = [2, 0, 3, 1]
    other = lift_features(scene, [cams[k] for k in perm], [maps[k] for k in perm], [recs[k] for k in perm])
    np.testing.assert_allclose(other.data, base.data, atol=1e-9)
    np.testing.assert_array_equal(other.coverage, base.coverage)


def test_coverage_matches_rasterizer_totals(rng):
    scene = random_scene(rng, 30)
    cams, maps, recs = _views(rng, scene, 3)
    bank = lift_features(scene, cams, maps, recs)
    totals = sum(np.bincount(r.gaussian, weights=r.weight, minlength=scene.n) for r in recs)
    np.testing.assert_allclose(bank.coverage, totals, atol=1e-6)


def test_mismatched_view_counts_raise(rng):
    scene = random_scene(rng, 5)
    cams, maps, recs = _views(rng, scene, 2)
    with pytest.raises(ValueError, match="mismatch"):
        lift_features(scene, cams, maps[:1], recs)


def test_coarse_maps_are_upsampled():
    coarse = np.arange(4.0).reshape(2, 2, 1)
    up = upsample_bilinear(coarse, 4, 4)
    assert up.shape == (4, 4, 1)
    assert up[0, 0, 0] == 0.0 and up[3, 3, 0] == 3.0
    np.testing.assert_allclose(upsample_bilinear(np.full((3, 3, 2), 1.5), 9, 6), 1.5)


def test_procedural_featureizer_examples(rng):
    gray = np.full((6, 8, 3), 0.5)
    fm = procedural_featureize(gray)
    assert fm.d == 16 == ProceduralFeatureizer.d_sem
    np.testing.assert_array_equal(fm.data[..., :3], 0.5)
    np.testing.assert_array_equal(fm.data[:, 0, 3], 0.0)
    np.testing.assert_allclose(fm.data[..., 13:16], 0.0, atol=1e-12)  # no skew on flat input
    img = rng.uniform(size=(7, 9, 3))
    np.testing.assert_array_equal(procedural_featureize(img).data, procedural_featureize(img).data)


def test_single_view_pipeline_equals_direct_lift(rng):
    scene = random_scene(rng, 30, spread=0.5)
    bank = lift_pipeline(scene, m=1, resolution=(24, 20))
    cam = default_view_ring(scene, 1, (24, 20))[0]
    rec = render_weights(scene, cam)
    fmap = procedural_featureize(render_rgb(scene, cam, records=rec))
    direct = lift_features(scene, [cam], [fmap], [rec])
    np.testing.assert_array_equal(bank.data, direct.data)


def test_pipeline_cache_hit_is_identical(tmp_path, rng):
    scene = random_scene(rng, 30, spread=0.5)
    first = lift_pipeline(scene, m=2, resolution=(20, 16), cache_dir=tmp_path)
    files = list(tmp_path.glob("*.ssfb"))
    assert len(files) == 1
    second = lift_pipeline(scene, m=2, resolution=(20, 16), cache_dir=tmp_path)
    again = lift_pipeline(scene, m=2, resolution=(20, 16), cache_dir=tmp_path)
    np.testing.assert_array_equal(second.data, again.data)
    np.testing.assert_allclose(second.data, first.data, rtol=1e-6, atol=1e-6)  # float32 on disk


def test_bank_file_roundtrip(tmp_path, rng):
    bank = FeatureBank(rng.normal(size=(6, 3)).astype(np.float32).astype(np.float64),
                       rng.uniform(size=6).astype(np.float32).astype(np.float64))
    path = tmp_path / "b.ssfb"
    save_bank(bank, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SSFB" and len(raw) == 12 + 4 * (18 + 6)
    back = load_bank(path)
    np.testing.assert_array_equal(back.data, bank.data)
    np.testing.assert_array_equal(back.coverage, bank.coverage)
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_bank(path)
