import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eirseg.errors import PlacementSkip
from eirseg.placement import (FusedSample, PlacementConfig, PlacementPlan, build_region_grid, choose_anchor,
                              fit_instance, fuse_all, instance_canvas, mixup_fuse, resize_instance)
from eirseg.protocol import IGNORE, SegSample

from conftest import make_record, make_sample


@pytest.mark.parametrize("H,W,n,rc", [
    (64, 64, 6, (2, 3)), (64, 64, 4, (2, 2)), (64, 64, 9, (3, 3)), (64, 64, 12, (3, 4)),
    (48, 96, 6, (2, 3)), (96, 48, 6, (3, 2)), (40, 100, 4, (1, 4)), (64, 64, 1, (1, 1)), (64, 64, 7, (1, 7)),
])
def test_region_grid_shape(H, W, n, rc):
    g = build_region_grid(H, W, n)
    assert (g.rows, g.cols) == rc and g.n == n


@pytest.mark.parametrize("H,W,n", [(64, 64, 6), (33, 47, 6), (31, 64, 12), (50, 50, 9), (37, 41, 4)])
def test_region_grid_tiles_image(H, W, n):
    g = build_region_grid(H, W, n)
    cover = np.zeros((H, W), int)
    for t, l, h, w in g.regions:
        cover[t:t + h, l:l + w] += 1
    assert (cover == 1).all()
    assert [r[:2] for r in g.regions] == sorted(r[:2] for r in g.regions)  # row-major


def test_region_grid_errors():
    with pytest.raises(ValueError):
        build_region_grid(4, 4, 0)
    with pytest.raises(ValueError):
        build_region_grid(2, 2, 5)


def anchor_oracle(label, grid, occupied):
    best = None
    for i, (t, l, h, w) in enumerate(grid.regions):
        if i in occupied:
            continue
        bg = sum(1 for y in range(t, t + h) for x in range(l, l + w) if label[y][x] == 0)
        if best is None:
            best = (i, bg, h * w)
            continue
        j, bbg, barea = best
        bt, bl = grid.regions[j][:2]
        if bg * barea > bbg * h * w:  # strictly more background
            best = (i, bg, h * w)
        elif bg * barea == bbg * h * w and t * t + l * l < bt * bt + bl * bl:
            best = (i, bg, h * w)
    if best is None:
        return None
    i = best[0]
    return grid.regions[i][:2], i


def test_choose_anchor_brute_force_1000_maps():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for k in range(1000):
        H, W = int(rng.integers(6, 20)), int(rng.integers(6, 20))
        n = int(rng.choice([4, 6, 9, 12]))
        if n > 9 and min(H, W) < 4:
            n = 6
        grid = build_region_grid(H, W, n)
        density = rng.uniform(0, 1)
        label = np.where(rng.random((H, W)) < density, rng.integers(1, 5, (H, W)), 0).astype(np.uint8)
        if k % 5 == 0:  # many exact ties
            label[:] = 0
        occupied = set(rng.choice(n, size=int(rng.integers(0, n)), replace=False).tolist())
        got = choose_anchor(label, grid, occupied)
        want = anchor_oracle(label.tolist(), grid, occupied)
        mismatches += (got[0], got[1]) != (tuple(want[0]), want[1])
    assert mismatches == 0


def test_choose_anchor_all_occupied():
    g = build_region_grid(8, 8, 4)
    with pytest.raises(PlacementSkip):
        choose_anchor(np.zeros((8, 8), np.uint8), g, range(4))


def test_ignore_is_not_background_for_placement():
    g = build_region_grid(8, 8, 4)
    label = np.zeros((8, 8), np.uint8)
    label[:4, :4] = IGNORE
    assert choose_anchor(label, g)[1] == 1


@pytest.mark.parametrize("seed", range(40))
def test_fit_instance_fits_and_only_shrinks(seed):
    rng = np.random.default_rng(seed)
    H, W = int(rng.integers(8, 40)), int(rng.integers(8, 40))
    rec = make_record(int(rng.integers(1, 50)), int(rng.integers(1, 50)), seed=seed)
    anchor = (int(rng.integers(0, H)), int(rng.integers(0, W)))
    try:
        plan = fit_instance(rec, anchor, H, W, min_scale=0.0)
    except PlacementSkip:
        pytest.fail("min_scale 0 never skips")
    assert 0 < plan.scale <= 1
    assert anchor[0] + plan.size[0] <= H and anchor[1] + plan.size[1] <= W
    if rec.shape[0] <= H - anchor[0] and rec.shape[1] <= W - anchor[1]:
        assert plan.scale == 1 and plan.size == rec.shape
    pix, msk = resize_instance(rec, plan)
    assert msk.shape == plan.size and pix.shape[:2] == plan.size


def test_fit_instance_skips_tiny_scale():
    rec = make_record(40, 40)
    with pytest.raises(PlacementSkip):
        fit_instance(rec, (30, 30), 32, 32, min_scale=0.1)
    with pytest.raises(ValueError):
        fit_instance(rec, (32, 0), 32, 32)


def _fuse_case(seed, lam):
    rng = np.random.default_rng(seed)
    H, W = int(rng.integers(6, 16)), int(rng.integers(6, 16))
    label = rng.choice([0, 0, 1, 2, IGNORE], size=(H, W)).astype(np.uint8)
    sample = make_sample(label, seed)
    rec = make_record(int(rng.integers(1, H)), int(rng.integers(1, W)), class_id=3, seed=seed + 1)
    anchor = (int(rng.integers(0, H - rec.shape[0] + 1)), int(rng.integers(0, W - rec.shape[1] + 1)))
    plan = fit_instance(rec, anchor, H, W)
    return sample, rec, plan, mixup_fuse(sample, rec, plan, lam, num_outputs=4)


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 10 ** 6), lam=st.floats(0.0, 1.0))
def test_mixup_properties(seed, lam):
    sample, rec, plan, f = _fuse_case(seed, lam)
    base = FusedSample.from_sample(sample, 4)
    u, v = plan.anchor
    h, w = rec.shape
    inside = np.zeros(sample.label.shape, bool)
    inside[u:u + h, v:v + w] = rec.mask.astype(bool)
    # convexity: every fused pixel lies between its two sources
    crop = np.zeros_like(sample.image)
    crop[u:u + h, v:v + w] = rec.pixels
    lo, hi = np.minimum(sample.image, crop), np.maximum(sample.image, crop)
    assert np.all(f.image[inside] >= lo[inside] - 1e-6) and np.all(f.image[inside] <= hi[inside] + 1e-6)
    assert np.array_equal(f.image[~inside], sample.image[~inside])
    assert np.abs(f.soft_label.sum(axis=2) - 1).max() <= 1e-5
    assert np.array_equal(f.soft_label[~inside], base.soft_label[~inside])
    assert np.array_equal(f.fused_mask, inside) and f.fused_classes == {3}
    np.testing.assert_allclose(f.soft_label[inside][:, 3], 1 - lam, atol=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_mixup_identity_and_replacement(seed):
    sample, rec, plan, f1 = _fuse_case(seed, 1.0)
    base = FusedSample.from_sample(sample, 4)
    assert np.array_equal(f1.image, sample.image)
    assert np.array_equal(f1.soft_label, base.soft_label)
    _, _, _, f0 = _fuse_case(seed, 0.0)
    u, v = plan.anchor
    h, w = rec.shape
    m = rec.mask.astype(bool)
    assert np.array_equal(f0.image[u:u + h, v:v + w][m], rec.pixels[m])
    onehot = np.zeros(4, np.float32)
    onehot[3] = 1
    assert np.all(f0.soft_label[u:u + h, v:v + w][m] == onehot)


def test_mixup_worked_example():
    sample = SegSample(np.zeros((3, 3, 3), np.float32), np.zeros((3, 3), np.uint8), "z")
    rec = make_record(1, 1, class_id=2, full=True)
    rec = type(rec)(np.ones((1, 1, 3), np.float32), rec.mask, 2, "one", 1.0)
    f = mixup_fuse(sample, rec, PlacementPlan((1, 1), 1.0, 0, (1, 1)), 0.3, num_outputs=3)
    np.testing.assert_allclose(f.image[1, 1], 0.7, atol=1e-7)
    np.testing.assert_allclose(f.soft_label[1, 1], [0.3, 0.0, 0.7], atol=1e-7)
    with pytest.raises(ValueError):
        mixup_fuse(sample, rec, PlacementPlan((1, 1), 1.0, 0, (1, 1)), 1.5, num_outputs=3)
    with pytest.raises(ValueError):
        mixup_fuse(sample, rec, PlacementPlan((1, 1), 1.0, 0, (1, 1)), 0.5, num_outputs=2)


def test_fuse_all_uses_distinct_regions_and_logs_skips():
    label = np.zeros((32, 32), np.uint8)
    label[:16, :] = 1
    sample = make_sample(label, sid="f")
    recs = [make_record(6, 6, 2, seed=1, source="a"), make_record(5, 7, 3, seed=2, source="b")]
    f = fuse_all(sample, recs, grid_n=4, rng=np.random.default_rng(0), num_outputs=4)
    placed = [e for e in f.log if e["status"] == "placed"]
    assert [e["region_index"] for e in placed] == [2, 3]
    assert [tuple(e["anchor"]) for e in placed] == [(16, 0), (16, 16)]
    f1 = fuse_all(sample, recs, grid_n=1, rng=np.random.default_rng(0), num_outputs=4)
    assert [e["status"] for e in f1.log] == ["placed", "skipped"]
    assert f1.fused_classes == {2}


def test_fuse_all_is_seeded_and_fixed_lambda():
    label = np.zeros((24, 24), np.uint8)
    sample = make_sample(label)
    recs = [make_record(5, 5, 1, seed=1)]
    a = fuse_all(sample, recs, rng=np.random.default_rng(4), num_outputs=2)
    b = fuse_all(sample, recs, rng=np.random.default_rng(4), num_outputs=2)
    assert np.array_equal(a.image, b.image) and a.log == b.log
    cfg = PlacementConfig(fixed_lambda=0.4)
    c = fuse_all(sample, recs, rng=np.random.default_rng(4), num_outputs=2, cfg=cfg)
    assert c.log[0]["lambda"] == 0.4


def test_size_policies_stay_in_image():
    label = np.zeros((20, 20), np.uint8)
    sample = make_sample(label)
    rec = make_record(15, 15, 1, seed=3)
    for policy in ("fit", "crop", "random"):
        cfg = PlacementConfig(region_n=4, size_policy=policy, min_scale=0.01)
        for s in range(10):
            f = fuse_all(sample, [rec], rng=np.random.default_rng(s), num_outputs=2, cfg=cfg)
            assert f.image.shape == (20, 20, 3)
    with pytest.raises(ValueError):
        PlacementConfig(size_policy="huge")


def test_iou_overlap_policy():
    sample = make_sample(np.zeros((16, 16), np.uint8))
    recs = [make_record(16, 16, 1, full=True), make_record(16, 16, 2, full=True, seed=5)]
    cfg = PlacementConfig(region_n=4, overlap_policy="iou", overlap_iou=0.0)
    f = fuse_all(sample, recs, rng=np.random.default_rng(0), num_outputs=3, cfg=cfg)
    assert [e["status"] for e in f.log] == ["placed", "skipped"]


def test_instance_canvas():
    rec = make_record(5, 7, 2, seed=9)
    c = instance_canvas(rec, 16, 16, 3)
    assert c.image.shape == (16, 16, 3)
    assert (c.label == 2).sum() == rec.area and set(np.unique(c.label)) == {0, 2}
    assert np.all(c.image[c.label == 0] == 0)
    big = instance_canvas(make_record(40, 20, 1, seed=1), 16, 16, 2)
    assert big.image.shape == (16, 16, 3) and (big.label == 1).any()
