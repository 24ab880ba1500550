import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pathonet.labels import CLASSES, CellAnnotation, render_density_map
from pathonet.postprocess import (
    BOUNDARY,
    EmptySeedsWarning,
    PostprocessConfig,
    binarize,
    distance_transform,
    extract_cells,
    local_maxima,
    regional_maxima,
    watershed_basic,
    watershed_seeded,
)
from oracles import TWO_BASIN_HEIGHTS, TWO_BASIN_LABELS, components, dumbbell, edt_brute


# --- binarize ---------------------------------------------------------------

def test_binarize_examples():
    assert not binarize(np.zeros((4, 4)), 120).any()
    assert np.all(binarize(np.random.default_rng(0).random((4, 4)), 0) == 255)
    b = binarize(np.array([119.9, 120.0, 300.0]), 120)
    assert b.tolist() == [0, 255, 255] and b.dtype == np.uint8


def test_binarize_single_cell_is_one_disk():
    m = render_density_map([CellAnnotation(16, 16, "immunopositive")], (33, 33))
    fg = binarize(m[0], 120) > 0
    labels, n = components(fg)
    assert n == 1 and fg[16, 16]
    yy, xx = np.nonzero(fg)
    radius = math.sqrt(18 * math.log(255 / 120))
    assert np.hypot(yy - 16, xx - 16).max() <= radius


@settings(max_examples=50)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 300)), st.floats(0, 255), st.floats(0, 255))
def test_binarize_monotone(grid, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert np.all(binarize(grid, hi) <= binarize(grid, lo))


# --- distance transform -------------------------------------------------------

def test_edt_row():
    out = distance_transform(np.array([[0, 255, 255, 255, 0]]))
    np.testing.assert_array_equal(out, [[0, 1, 2, 1, 0]])


def test_edt_all_background():
    assert not distance_transform(np.zeros((5, 5))).any()


def test_edt_all_foreground_has_no_background():
    assert np.all(np.isinf(distance_transform(np.full((3, 3), 255))))


def test_edt_random_32():
    mask = np.random.default_rng(1).random((32, 32)) < 0.7
    np.testing.assert_allclose(distance_transform(mask), edt_brute(mask), atol=1e-3)


@settings(max_examples=200)
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_edt_matches_brute_force(mask):
    np.testing.assert_allclose(distance_transform(mask), edt_brute(mask), atol=1e-3)


# --- local maxima -----------------------------------------------------------------

def _two_peaks(dx):
    yy, xx = np.mgrid[:21, :31]
    a = 10 * np.exp(-((xx - 10) ** 2 + (yy - 10) ** 2) / 2.0)
    b = 9 * np.exp(-((xx - 10 - dx) ** 2 + (yy - 10) ** 2) / 2.0)
    return np.maximum(a, b)


def test_peaks_far_apart_both_kept():
    assert sorted(local_maxima(_two_peaks(8), 5)) == [(10, 10), (18, 10)]


def test_peaks_close_only_higher_kept():
    assert local_maxima(_two_peaks(3), 5) == [(10, 10)]


def test_constant_grid_has_no_maxima():
    assert local_maxima(np.full((6, 6), 3.0), 5) == []
    assert not regional_maxima(np.full((6, 6), 3.0)).any()


def test_plateau_maximum_detected():
    g = np.zeros((7, 7))
    g[2:4, 2:5] = 5.0
    mask = regional_maxima(g)
    assert mask.sum() == 6
    # representative: first in (height desc, y asc, x asc) order
    assert local_maxima(g, 5) == [(2, 2)]


def test_plateau_touching_higher_is_not_maximum():
    g = np.zeros((5, 5))
    g[2, 1:4] = 3.0
    g[2, 4] = 4.0
    assert regional_maxima(g).tolist() == (g == 4.0).tolist()


def test_tie_break_order():
    g = np.zeros((9, 9))
    g[1, 6] = g[1, 2] = g[3, 4] = 5.0
    assert local_maxima(g, 2) == [(2, 1), (6, 1), (4, 3)]
    assert local_maxima(g, 3) == [(2, 1), (6, 1)]  # (4, 3) is 2.83 from both
    assert local_maxima(g, 10) == [(2, 1)]


def test_separation_validated():
    with pytest.raises(ValueError):
        local_maxima(np.zeros((3, 3)), 0)


@settings(max_examples=40)
@given(arrays(np.int8, (10, 10), elements=st.integers(0, 6)), st.integers(1, 6))
def test_survivors_respect_separation(grid, sep):
    pts = local_maxima(grid.astype(float), sep)
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            assert math.dist(pts[i], pts[j]) >= sep


# --- watershed by immersion ---------------------------------------------------------

def test_basic_two_basins():
    topo = watershed_basic(TWO_BASIN_HEIGHTS)
    np.testing.assert_array_equal(topo.labels, TWO_BASIN_LABELS)
    assert topo.n_regions == 2


def test_basic_uniform_single_region():
    topo = watershed_basic(np.full((4, 5), 7))
    assert topo.n_regions == 1 and np.all(topo.labels != BOUNDARY)


def test_basic_ramp_single_region():
    ramp = np.add.outer(np.arange(6), np.arange(8))
    topo = watershed_basic(ramp)
    assert topo.n_regions == 1 and np.all(topo.labels == 1)


def test_basic_rejects_non_integer():
    with pytest.raises(ValueError):
        watershed_basic(np.array([[0.5, 1.0]]))


def test_basic_regions_connected():
    rng = np.random.default_rng(2)
    for _ in range(20):
        topo = watershed_basic(rng.integers(0, 4, (8, 8)))
        for lab in np.unique(topo.labels[topo.labels != BOUNDARY]):
            assert components(topo.labels == lab)[1] == 1


# --- seeded watershed ----------------------------------------------------------------

def test_seeded_one_seed_whole_blob():
    mask, (c1, _) = dumbbell()
    dist = distance_transform(mask)
    topo = watershed_seeded(-dist, [c1], mask)
    assert np.array_equal(topo.labels > 0, mask)


def test_seeded_dumbbell_cut_at_neck():
    mask, centers = dumbbell()
    dist = distance_transform(mask)
    labels = watershed_seeded(-dist, centers, mask).labels
    assert set(np.unique(labels[mask])) == {1, 2}
    assert np.all(labels[~mask] == 0)
    cy = mask.shape[0] // 2
    cut = [x for x in range(mask.shape[1] - 1) if labels[cy, x] == 1 and labels[cy, x + 1] == 2]
    assert len(cut) == 1
    assert centers[0][0] + 5 <= cut[0] <= centers[1][0] - 5
    for lab in (1, 2):
        assert components(labels == lab)[1] == 1


def test_seeded_overlapping_gaussians():
    cells = [CellAnnotation(20, 20, "immunonegative"), CellAnnotation(32, 20, "immunonegative")]
    m = render_density_map(cells, (41, 53))[1]
    # 12 px apart the two disks merge once tau < 255 * exp(-2) ~ 34.5
    fg = binarize(m, 30) > 0
    assert components(fg)[1] == 1
    dist = distance_transform(fg)
    seeds = local_maxima(m, 5)
    assert len(seeds) == 2
    topo = watershed_seeded(-dist, seeds, fg)
    assert topo.n_regions == 2
    reps = []
    for lab in (1, 2):
        ys, xs = np.nonzero(topo.labels == lab)
        k = np.argmax(dist[ys, xs])
        reps.append((xs[k], ys[k]))
    reps.sort()
    for rep, c in zip(reps, cells):
        assert math.dist(rep, (c.x, c.y)) <= 2


def test_seeded_empty_seeds_signalled():
    with pytest.warns(EmptySeedsWarning):
        topo = watershed_seeded(np.zeros((3, 3)), [])
    assert not topo.labels.any()


def test_seeded_bad_seeds():
    with pytest.raises(ValueError):
        watershed_seeded(np.zeros((3, 3)), [(1, 1), (1, 1)])
    with pytest.raises(ValueError):
        watershed_seeded(np.zeros((3, 3)), [(3, 0)])


def test_seeded_region_count_equals_seed_count():
    rng = np.random.default_rng(3)
    for _ in range(30):
        mask = rng.random((20, 20)) < 0.45
        labels, n = components(mask)
        if n == 0:
            continue
        seeds = []
        for lab in range(1, n + 1):
            ys, xs = np.nonzero(labels == lab)
            k = int(rng.integers(len(ys)))
            seeds.append((int(xs[k]), int(ys[k])))
        topo = watershed_seeded(-distance_transform(mask), seeds, mask)
        assert topo.n_regions == n
        assert np.array_equal(topo.labels > 0, mask)


def test_seeded_deterministic():
    mask, centers = dumbbell()
    d = -distance_transform(mask)
    assert np.array_equal(watershed_seeded(d, centers, mask).labels, watershed_seeded(d, centers, mask).labels)


# --- extract_cells -------------------------------------------------------------------

def test_three_classes_recovered():
    cells = [CellAnnotation(10, 12, "immunopositive"), CellAnnotation(40, 30, "immunonegative"),
             CellAnnotation(25, 50, "lymphocyte")]
    found = extract_cells(render_density_map(cells, (64, 64)))
    assert len(found) == 3
    for c in cells:
        match = [f for f in found if f.cls == c.cls]
        assert len(match) == 1
        assert math.dist((match[0].x, match[0].y), (c.x, c.y)) <= 1
        assert match[0].score == 2250


def test_zero_map_empty():
    assert extract_cells(np.zeros((3, 16, 16))) == []


@pytest.mark.parametrize("source", ["distance", "density"])
def test_two_close_cells_split(source):
    cells = [CellAnnotation(20, 20, "immunopositive"), CellAnnotation(32, 20, "immunopositive")]
    m = render_density_map(cells, (41, 53))
    cfg = PostprocessConfig(thresholds=(30, 180, 40), seed_source=source)
    assert components(binarize(m[0], 30) > 0)[1] == 1
    found = extract_cells(m, cfg)
    assert len(found) == 2


def test_extract_rejects_bad_shape():
    with pytest.raises(ValueError):
        extract_cells(np.zeros((2, 8, 8)))


def test_config_validation():
    with pytest.raises(ValueError):
        PostprocessConfig(thresholds=(120, 300, 40))
    with pytest.raises(ValueError):
        PostprocessConfig(min_separation=0)
    with pytest.raises(ValueError):
        PostprocessConfig(seed_source="centroid")


def test_random_separated_cells_recovered():
    rng = np.random.default_rng(4)
    radius = 2 * math.sqrt(18 * math.log(255))
    for trial in range(10):
        k = int(rng.integers(1, 51))
        pts = []
        while len(pts) < k:
            p = (int(rng.integers(3, 253)), int(rng.integers(3, 253)))
            if all(math.dist(p, q) > radius for q in pts):
                pts.append(p)
        cells = [CellAnnotation(x, y, CLASSES[int(rng.integers(3))]) for x, y in pts]
        found = extract_cells(render_density_map(cells, (256, 256)))
        assert len(found) == k
        for c in cells:
            assert any(f.cls == c.cls and math.dist((f.x, f.y), (c.x, c.y)) <= 1 for f in found)
