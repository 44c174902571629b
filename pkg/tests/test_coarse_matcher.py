import numpy as np
import pytest

from guidematch import coarse_matcher as cm
from guidematch.numerics import Tensor, parameter
from guidematch.numerics.gradcheck import max_gradient_error

import oracles


def make_model(seed=0, channels=(4, 8), hidden=(4,)):
    return cm.CoarseModel.create(seed, backbone_channels=channels, filter_hidden=hidden)


def orthonormal_feature_map(n_cells, stride=16):
    """Feature map whose cell vectors are distinct rows of an identity matrix."""
    h = w = int(np.sqrt(n_cells))
    c = h * w
    grid = np.eye(c).reshape(c, h, w)
    return cm.FeatureMap(Tensor(grid), stride, (h * stride, w * stride), normalized=True)


class TestExtractFeatures:
    def test_shape(self):
        model = cm.CoarseModel.create(0)
        fmap = cm.extract_features(model.backbone, np.zeros((64, 64)))
        assert fmap.grid.shape == (32, 4, 4)
        assert fmap.stride == 16

    def test_non_multiple_errors_with_resize_hint(self):
        model = cm.CoarseModel.create(0)
        with pytest.raises(ValueError, match="resize"):
            cm.extract_features(model.backbone, np.zeros((60, 64)))

    def test_constant_image_interior_cells_equal(self):
        model = cm.CoarseModel.create(1)
        fmap = cm.extract_features(model.backbone, np.full((96, 96), 0.37))
        g = fmap.grid.data
        interior = g[:, 1:-1, 1:-1].reshape(g.shape[0], -1)
        ref = interior[:, :1]
        assert np.abs(interior - ref).max() < 1e-9

    def test_unit_norms(self):
        model = cm.CoarseModel.create(2)
        rng = np.random.default_rng(0)
        fmap = cm.extract_features(model.backbone, rng.random((64, 64)))
        norms = np.sqrt((fmap.grid.data**2).sum(axis=0))
        assert np.abs(norms - 1.0).max() < 1e-9


class TestResizeImage:
    def test_800_to_496(self):
        img = np.zeros((800, 800))
        out, (sx, sy) = cm.resize_image(img, 497, 16)
        assert out.shape == (496, 496)
        assert sx == pytest.approx(0.62)
        assert sy == pytest.approx(0.62)

    def test_small_image_unchanged(self):
        rng = np.random.default_rng(1)
        img = rng.random((64, 64))
        out, scales = cm.resize_image(img, 497, 16)
        assert scales == (1.0, 1.0)
        assert np.array_equal(out, img)

    def test_aspect_preserved_within_stride(self):
        img = np.zeros((800, 400))
        out, (sx, sy) = cm.resize_image(img, 401, 16)
        assert out.shape[0] % 16 == 0 and out.shape[1] % 16 == 0
        assert abs(sx - sy) * 401 < 16

    def test_degenerate(self):
        with pytest.raises(ValueError):
            cm.resize_image(np.zeros((4, 800)), 497, 16)


class TestCorrelate:
    def test_orthonormal_identity(self):
        fa = orthonormal_feature_map(9)
        vol = cm.correlate(fa, fa)
        c = vol.raw.data
        for i in range(3):
            for j in range(3):
                expected = np.zeros((3, 3))
                expected[i, j] = 1.0
                assert np.array_equal(c[i, j], expected)

    def test_orthogonal_maps_all_zero(self):
        grid_a = np.zeros((4, 2, 2))
        grid_a[0] = 1.0
        grid_b = np.zeros((4, 2, 2))
        grid_b[1] = 1.0
        fa = cm.FeatureMap(Tensor(grid_a), 16, (32, 32), normalized=True)
        fb = cm.FeatureMap(Tensor(grid_b), 16, (32, 32), normalized=True)
        assert np.abs(cm.correlate(fa, fb).raw.data).max() == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        ga = rng.standard_normal((6, 4, 4))
        gb = rng.standard_normal((6, 3, 5))
        fa = cm.FeatureMap(Tensor(ga), 16, (64, 64), normalized=True)
        fb = cm.FeatureMap(Tensor(gb), 16, (48, 80), normalized=True)
        vol = cm.correlate(fa, fb)
        assert np.abs(vol.raw.data - oracles.correlation_loops(ga, gb)).max() < 1e-12

    def test_channel_mismatch(self):
        fa = cm.FeatureMap(Tensor(np.zeros((4, 2, 2))), 16, (32, 32), normalized=True)
        fb = cm.FeatureMap(Tensor(np.zeros((5, 2, 2))), 16, (32, 32), normalized=True)
        with pytest.raises(ValueError, match="channel"):
            cm.correlate(fa, fb)

    def test_cosine_range(self):
        model = cm.CoarseModel.create(4)
        rng = np.random.default_rng(4)
        fa = cm.extract_features(model.backbone, rng.random((64, 64)))
        fb = cm.extract_features(model.backbone, rng.random((64, 64)))
        c = cm.correlate(fa, fb).raw.data
        assert c.min() >= -1.0 - 1e-9 and c.max() <= 1.0 + 1e-9


class TestFilterSymmetric:
    def test_identity_kernel_filter_is_identity(self):
        filt = cm.ConsensusFilter(hidden=())
        filt.weights[0].data = np.zeros((1, 1, 3, 3, 3, 3))
        filt.weights[0].data[0, 0, 1, 1, 1, 1] = 1.0
        rng = np.random.default_rng(5)
        raw = rng.standard_normal((3, 3, 3, 3))
        vol = cm.CorrelationVolume(Tensor(raw), 16, 16, (48, 48), (48, 48))
        cm.filter_symmetric(filt, vol)
        assert np.abs(vol.filtered.data - raw).max() < 1e-12

    def test_order_symmetry(self):
        rng = np.random.default_rng(6)
        filt = cm.ConsensusFilter(hidden=(4,), rng=rng)
        raw = rng.standard_normal((2, 3, 4, 2))
        vol_ab = cm.CorrelationVolume(Tensor(raw), 16, 16, (32, 48), (64, 32))
        vol_ba = cm.CorrelationVolume(Tensor(raw.transpose(2, 3, 0, 1)), 16, 16, (64, 32), (32, 48))
        cm.filter_symmetric(filt, vol_ab)
        cm.filter_symmetric(filt, vol_ba)
        assert np.abs(vol_ab.filtered.data - vol_ba.filtered.data.transpose(2, 3, 0, 1)).max() < 1e-12

    def test_matches_two_pass_reference(self):
        rng = np.random.default_rng(7)
        filt = cm.ConsensusFilter(hidden=(4,), rng=rng)
        raw = rng.standard_normal((2, 2, 3, 3))
        vol = cm.CorrelationVolume(Tensor(raw), 16, 16, (32, 32), (48, 48))
        cm.filter_symmetric(filt, vol)
        direct = filt.forward(Tensor(raw)).data
        swapped = filt.forward(Tensor(raw.transpose(2, 3, 0, 1))).data.transpose(2, 3, 0, 1)
        assert np.abs(vol.filtered.data - 0.5 * (direct + swapped)).max() < 1e-12


class TestNormalizeScores:
    def _vol(self, s):
        vol = cm.CorrelationVolume(Tensor(s), 16, 16, (s.shape[0] * 16, s.shape[1] * 16), (s.shape[2] * 16, s.shape[3] * 16))
        vol.filtered = Tensor(s)
        return vol

    def test_uniform(self):
        vol = self._vol(np.zeros((2, 2, 3, 3)))
        cm.normalize_scores(vol)
        assert np.abs(vol.prob_ab.data - 1 / 9).max() < 1e-12

    def test_dominant_cell_saturates(self):
        s = np.zeros((1, 1, 2, 2))
        s[0, 0, 1, 1] = 1000.0
        vol = self._vol(s)
        cm.normalize_scores(vol)
        assert vol.prob_ab.data[0, 0, 1, 1] > 1.0 - 1e-12

    def test_sums(self):
        rng = np.random.default_rng(8)
        vol = self._vol(rng.standard_normal((3, 2, 4, 2)))
        cm.normalize_scores(vol)
        assert np.abs(vol.prob_ab.data.sum(axis=(2, 3)) - 1.0).max() < 1e-10
        assert np.abs(vol.prob_ba.data.sum(axis=(0, 1)) - 1.0).max() < 1e-10


class TestExtractMatches:
    def _vol(self, s):
        vol = cm.CorrelationVolume(
            Tensor(s), 16, 16, (s.shape[0] * 16, s.shape[1] * 16), (s.shape[2] * 16, s.shape[3] * 16)
        )
        vol.filtered = Tensor(s)
        return vol

    def test_identity_from_orthonormal_maps(self):
        fa = orthonormal_feature_map(16)
        vol = cm.correlate(fa, fa)
        vol.filtered = vol.raw
        field = cm.extract_matches(vol, "AB")
        for i in range(4):
            for j in range(4):
                assert tuple(field.target_cells[i, j]) == (i, j)

    def test_constant_scores_tie_rule(self):
        vol = self._vol(np.zeros((2, 2, 3, 3)))
        field = cm.extract_matches(vol, "AB")
        assert np.all(field.target_cells == 0)

    def test_matches_scan_oracle_both_directions(self):
        rng = np.random.default_rng(9)
        s = rng.standard_normal((3, 4, 2, 5))
        vol = self._vol(s)
        ab = cm.extract_matches(vol, "AB")
        ba = cm.extract_matches(vol, "BA")
        for i in range(3):
            for j in range(4):
                flat = s[i, j].ravel()
                assert flat[ab.target_cells[i, j, 0] * 5 + ab.target_cells[i, j, 1]] == flat.max()
        for k in range(2):
            for l in range(5):
                flat = s[:, :, k, l].ravel()
                assert flat[ba.target_cells[k, l, 0] * 4 + ba.target_cells[k, l, 1]] == flat.max()

    def test_softmax_argmax_commutation(self):
        rng = np.random.default_rng(10)
        s = rng.standard_normal((2, 3, 3, 2))
        vol = self._vol(s)
        cm.normalize_scores(vol)
        from_filtered = cm.extract_matches(vol, "AB").target_cells
        vol2 = self._vol(vol.prob_ab.data)
        from_prob = cm.extract_matches(vol2, "AB").target_cells
        assert np.array_equal(from_filtered, from_prob)


class TestInterpolateMatch:
    def _field(self, cells, stride=16, grid=(4, 4)):
        h, w = grid
        return cm.CoarseMatchField(
            "AB",
            cells,
            np.ones((h, w)),
            stride,
            stride,
            (h * stride, w * stride),
            (h * stride, w * stride),
        )

    def test_feature_center_exact(self):
        rng = np.random.default_rng(11)
        cells = rng.integers(0, 4, size=(4, 4, 2))
        field = self._field(cells)
        i, j = 2, 1
        p = ((j + 0.5) * 16, (i + 0.5) * 16)
        out = cm.interpolate_match(field, p)
        k, l = cells[i, j]
        assert out == pytest.approx(((l + 0.5) * 16, (k + 0.5) * 16))

    def test_midpoint_between_centers(self):
        cells = np.zeros((4, 4, 2), dtype=int)
        cells[0, 0] = (0, 0)  # match point (8, 8)
        cells[0, 1] = (0, 2)  # match point (40, 8)
        field = self._field(cells)
        # (16, 8) sits midway between the centers of cells (0,0) and (0,1)
        out = cm.interpolate_match(field, (16.0, 8.0))
        assert out == pytest.approx((24.0, 8.0))

    def test_matches_direct_bilinear_formula(self):
        rng = np.random.default_rng(12)
        cells = rng.integers(0, 4, size=(4, 4, 2))
        field = self._field(cells)
        targets = (cells[..., ::-1] + 0.5) * 16.0
        for _ in range(50):
            x = rng.uniform(8.0, 56.0)
            y = rng.uniform(8.0, 56.0)
            gx, gy = x / 16 - 0.5, y / 16 - 0.5
            j0, i0 = int(gx), int(gy)
            tx, ty = gx - j0, gy - i0
            ref = (
                targets[i0, j0] * (1 - tx) * (1 - ty)
                + targets[i0, j0 + 1] * tx * (1 - ty)
                + targets[i0 + 1, j0] * (1 - tx) * ty
                + targets[i0 + 1, j0 + 1] * tx * ty
            )
            assert np.abs(np.array(cm.interpolate_match(field, (x, y))) - ref).max() < 1e-12

    def test_outside_image_errors(self):
        field = self._field(np.zeros((4, 4, 2), dtype=int))
        with pytest.raises(ValueError, match="outside"):
            cm.interpolate_match(field, (64.0, 10.0))

    def test_border_clamped(self):
        cells = np.zeros((4, 4, 2), dtype=int)
        field = self._field(cells)
        corner = cm.interpolate_match(field, (0.0, 0.0))
        center = cm.interpolate_match(field, (8.0, 8.0))
        assert corner == center


class TestEndToEndGradients:
    def test_full_pipeline_finite_differences(self):
        # FD checks need a point away from rectifier kinks and tiny feature
        # norms (1/norm^3 curvature wrecks the difference quotient), so take
        # the first seed whose forward pass is well conditioned.
        from guidematch.numerics.gradcheck import sample_coords, well_conditioned

        checked = False
        for seed in range(13, 60):
            model = cm.CoarseModel.create(seed, backbone_channels=(3, 4, 4, 4), filter_hidden=(2,))
            rng = np.random.default_rng(seed)
            # the zero output head makes an untrained model's scores uniform;
            # give it weights so the check runs at a generic point
            model.cons_filter.weights[-1].data = rng.standard_normal(
                model.cons_filter.weights[-1].shape
            ) * 0.2
            img_a = rng.random((48, 48))
            img_b = rng.random((48, 48))
            params = model.parameters()
            w = rng.standard_normal((3, 3, 3, 3))

            def f():
                vol = cm.compute_volume(model, img_a, img_b)
                return (vol.prob_ab * w).sum()

            if not well_conditioned(f):
                continue
            coords = sample_coords(params, 4, np.random.default_rng(99))
            assert max_gradient_error(f, params, coords=coords) < 1e-4
            checked = True
            break
        assert checked, "no well-conditioned seed found"


class TestModelCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        model = make_model(seed=3)
        rng = np.random.default_rng(14)
        img = rng.random((64, 64))
        vol = cm.compute_volume(model, img, img)
        model.save(tmp_path / "m.gmck")
        loaded = cm.CoarseModel.load(tmp_path / "m.gmck")
        assert loaded.backbone.channels == model.backbone.channels
        vol2 = cm.compute_volume(loaded, img, img)
        assert np.array_equal(vol.filtered.data, vol2.filtered.data)

    def test_field_export(self, tmp_path):
        model = make_model()
        rng = np.random.default_rng(15)
        field = cm.compute_match_field(model, rng.random((64, 64)), rng.random((64, 64)))
        cm.write_match_field(tmp_path / "field.txt", field)
        lines = (tmp_path / "field.txt").read_text().splitlines()
        hs, ws = field.target_cells.shape[:2]
        assert len(lines) == hs * ws
        parts = lines[0].split()
        assert len(parts) == 5
