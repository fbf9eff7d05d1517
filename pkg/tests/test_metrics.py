import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from multiseg import metrics
from multiseg.volgrid import SegLabel


def random_mask(rng, shape=(8, 8, 8), p=0.25, nonempty=True):
    while True:
        m = (rng.random(shape) < p).astype(np.uint8)
        if not nonempty or m.any():
            return m


# --- independent oracles -----------------------------------------------------

def oracle_surface(mask):
    """Surface voxels by explicit neighbor comparison (no erosion calls)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    out = np.zeros_like(m)
    core = padded[1:-1, 1:-1, 1:-1]
    neighbor_and = np.ones_like(m)
    for axis in range(3):
        for shift in (-1, 1):
            neighbor_and &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    out = core & ~neighbor_and
    return np.argwhere(out)


def oracle_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """All-pairs directed surface distances, pooled 95th percentile."""
    scale = np.asarray(spacing, dtype=np.float64)
    pa = oracle_surface(pred) * scale
    pb = oracle_surface(gt) * scale
    diff = pa[:, None, :] - pb[None, :, :]
    d2 = (diff**2).sum(axis=2)
    d_ab = np.sqrt(d2.min(axis=1))
    d_ba = np.sqrt(d2.min(axis=0))
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def oracle_boundary(mask):
    """Erosion-XOR boundary: mask voxels lost under 6-connectivity erosion."""
    m = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(m, ndimage.generate_binary_structure(3, 1), border_value=0)
    return (m ^ eroded).astype(np.uint8)


def random_solid(rng, shape=(12, 12, 12)):
    """A random solid ellipsoid or box."""
    if rng.random() < 0.5:
        center = rng.uniform(3, np.array(shape) - 3)
        radii = rng.uniform(1.5, 4.5, 3)
        grids = np.ogrid[tuple(slice(0, n) for n in shape)]
        q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        return (q <= 1).astype(np.uint8)
    lo = rng.integers(0, 5, 3)
    hi = lo + rng.integers(2, 6, 3)
    m = np.zeros(shape, dtype=np.uint8)
    m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 1
    return m


# --- dice --------------------------------------------------------------------

class TestDiceScore:
    def test_identical_nonempty(self):
        m = random_mask(np.random.default_rng(0))
        assert metrics.dice_score(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros_like(a)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert metrics.dice_score(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros_like(a)
        a[0, 0, :4] = 1
        b[0, 0, 2:4] = 1
        b[0, 1, :2] = 1
        # |A| = 4, |B| = 4, |A ∩ B| = 2
        assert metrics.dice_score(a, b) == 0.5

    def test_both_empty_is_one(self):
        z = np.zeros((4, 4, 4), dtype=np.uint8)
        assert metrics.dice_score(z, z) == 1.0

    def test_one_empty_is_zero(self):
        z = np.zeros((4, 4, 4), dtype=np.uint8)
        m = z.copy()
        m[1, 1, 1] = 1
        assert metrics.dice_score(z, m) == 0.0
        assert metrics.dice_score(m, z) == 0.0

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            metrics.dice_score(np.full((2, 2, 2), 0.5), np.zeros((2, 2, 2)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_and_flip_invariant(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng), random_mask(rng)
        assert metrics.dice_score(a, b) == metrics.dice_score(b, a)
        fa, fb = np.flip(a, axis=1), np.flip(b, axis=1)
        assert metrics.dice_score(fa, fb) == metrics.dice_score(a, b)


# --- hausdorff ---------------------------------------------------------------

class TestHausdorff95:
    def test_identical_masks_zero(self):
        m = random_mask(np.random.default_rng(1))
        assert metrics.hausdorff95(m, m) == 0.0

    def test_single_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), dtype=np.uint8)
        b = np.zeros_like(a)
        a[2, 2, 2] = 1
        b[2, 2, 5] = 1
        assert metrics.hausdorff95(a, b, (1, 1, 1)) == 3.0

    def test_spacing_scales_distances(self):
        a = np.zeros((8, 8, 8), dtype=np.uint8)
        b = np.zeros_like(a)
        a[2, 2, 2] = 1
        b[2, 2, 5] = 1
        assert metrics.hausdorff95(a, b, (1, 1, 2.5)) == pytest.approx(7.5)

    def test_empty_mask_gives_sentinel(self):
        z = np.zeros((4, 4, 4), dtype=np.uint8)
        m = z.copy()
        m[0, 0, 0] = 1
        assert metrics.hausdorff95(z, m) is None
        assert metrics.hausdorff95(m, z) is None
        assert metrics.hausdorff95(z, z) is None

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_all_pairs_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng), random_mask(rng)
        assert metrics.hausdorff95(a, b) == oracle_hd95(a, b)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_pooled_definition_is_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng), random_mask(rng)
        assert metrics.hausdorff95(a, b) == metrics.hausdorff95(b, a)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_hd95_below_exact_hausdorff(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng), random_mask(rng)
        scale = np.ones(3)
        pa = oracle_surface(a) * scale
        pb = oracle_surface(b) * scale
        diff = pa[:, None, :] - pb[None, :, :]
        d2 = (diff**2).sum(axis=2)
        exact = max(np.sqrt(d2.min(axis=1)).max(), np.sqrt(d2.min(axis=0)).max())
        assert metrics.hausdorff95(a, b) <= exact + 1e-12


# --- boundary extraction -----------------------------------------------------

class TestExtractBoundary:
    def test_all_zeros(self):
        z = np.zeros((6, 6, 6), dtype=np.uint8)
        boundary, beta = metrics.extract_boundary(z)
        assert boundary.sum() == 0
        assert beta == 1.0

    def test_solid_cube_shell(self):
        m = np.zeros((9, 9, 9), dtype=np.uint8)
        m[2:7, 2:7, 2:7] = 1
        boundary, beta = metrics.extract_boundary(m)
        assert boundary.sum() == 98  # 5^3 - 3^3
        assert np.array_equal(boundary, oracle_boundary(m))
        assert beta == pytest.approx(1 - 98 / 9**3)

    def test_single_voxel_is_boundary(self):
        m = np.zeros((5, 5, 5), dtype=np.uint8)
        m[2, 2, 2] = 1
        boundary, _ = metrics.extract_boundary(m)
        assert boundary[2, 2, 2] == 1
        assert boundary.sum() == 1

    def test_mask_touching_border_counts_as_boundary(self):
        m = np.ones((4, 4, 4), dtype=np.uint8)
        boundary, _ = metrics.extract_boundary(m)
        assert np.array_equal(boundary, oracle_boundary(m))
        assert boundary[0, 0, 0] == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_erosion_oracle_on_solids(self, seed):
        rng = np.random.default_rng(seed)
        m = random_solid(rng)
        boundary, beta = metrics.extract_boundary(m)
        assert np.array_equal(boundary, oracle_boundary(m))
        assert 0.0 <= beta <= 1.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_boundary_subset_of_mask(self, seed):
        rng = np.random.default_rng(seed)
        m = random_mask(rng, p=0.4, nonempty=False)
        boundary, beta = metrics.extract_boundary(m)
        assert (boundary <= m).all()
        assert 0.0 <= beta <= 1.0


# --- case evaluation ---------------------------------------------------------

def nested_label(rng, shape=(8, 8, 8)):
    wt = random_mask(rng, shape, p=0.3)
    tc = wt & random_mask(rng, shape, p=0.7, nonempty=False)
    et = tc & random_mask(rng, shape, p=0.7, nonempty=False)
    return SegLabel(np.stack([et, tc, wt]).astype(np.uint8))


class TestEvaluateCase:
    def test_perfect_prediction(self):
        gt = nested_label(np.random.default_rng(0))
        report = metrics.evaluate_case(gt, gt)
        for name in ("ET", "TC", "WT"):
            assert report.regions[name].dice == 1.0
            hd = report.regions[name].hd95
            assert hd == 0.0 or hd is None  # None when the region is empty

    def test_empty_pred_channel(self):
        rng = np.random.default_rng(3)
        gt = nested_label(rng)
        pred_data = gt.data.copy()
        pred_data[0] = 0  # drop ET entirely
        report = metrics.evaluate_case(SegLabel(pred_data), gt)
        assert report.regions["ET"].dice == 0.0
        assert report.regions["ET"].hd95 is None

    def test_report_covers_exactly_three_regions(self):
        gt = nested_label(np.random.default_rng(1))
        report = metrics.evaluate_case(gt, gt)
        assert set(report.regions) == {"ET", "TC", "WT"}
        d = report.as_dict()
        assert set(d["WT"]) == {"dice", "hd95"}

    def test_shape_mismatch_rejected(self):
        a = nested_label(np.random.default_rng(0), (8, 8, 8))
        b = nested_label(np.random.default_rng(0), (6, 6, 6))
        with pytest.raises(ValueError):
            metrics.evaluate_case(a, b)
