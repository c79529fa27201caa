import numpy as np
import pytest

from crossface.errors import InvalidParameterError
from crossface.features import (
    DESCRIPTOR_DIM,
    EMBED_DIM,
    PcaModel,
    build_descriptor_set,
    embed,
    extract_dense,
    extract_dense_values,
    make_grid,
    pca_fit,
)
from crossface.imgproc import GrayImage, _smooth_array


class TestMakeGrid:
    def test_110x150_gives_204_blocks(self):
        grid = make_grid(110, 150, 20, 8)
        assert grid.n_x == 12 and grid.n_y == 17
        assert len(grid) == 204

    def test_272x322_gives_1216_blocks(self):
        grid = make_grid(272, 322, 20, 8)
        assert grid.n_x == 32 and grid.n_y == 38
        assert len(grid) == 1216

    def test_degenerate_single_block_centered(self):
        grid = make_grid(20, 20, 20, 8)
        assert len(grid) == 1
        np.testing.assert_array_equal(grid.positions, [[0.0, 0.0]])

    def test_block_larger_than_image_rejected(self):
        with pytest.raises(InvalidParameterError):
            make_grid(16, 40, 20, 8)

    def test_row_major_ordering(self):
        grid = make_grid(36, 28, 20, 8)  # 3 x 2 blocks
        assert len(grid) == 6
        # first row shares cy, cx increases by the stride
        assert grid.positions[0][1] == grid.positions[1][1] == grid.positions[2][1]
        assert grid.positions[1][0] - grid.positions[0][0] == 8
        assert grid.positions[3][1] - grid.positions[0][1] == 8

    def test_identical_for_same_dims(self):
        a = make_grid(64, 64)
        b = make_grid(64, 64)
        np.testing.assert_array_equal(a.positions, b.positions)


class TestExtractDense:
    def test_flat_image_gives_zero_descriptors(self):
        img = GrayImage(np.full((20, 20), 0.33))
        grid = make_grid(20, 20)
        values = extract_dense_values(img, grid, (0.6,))
        np.testing.assert_array_equal(values, np.zeros((1, DESCRIPTOR_DIM)))

    def test_vertical_step_edge_orientation_and_cells(self):
        data = np.zeros((20, 20))
        data[:, 10:] = 1.0
        grid = make_grid(20, 20)
        desc = extract_dense_values(GrayImage(data), grid, (0.6,))[0]
        hist = desc.reshape(4, 4, 8)  # (cell_y, cell_x, orientation)
        # theta = 0 splits equally between the two bins around it
        mass_outside_bins = hist[:, :, :3].sum() + hist[:, :, 5:].sum()
        assert mass_outside_bins == 0.0
        np.testing.assert_allclose(hist[:, :, 3], hist[:, :, 4])
        # only the two cell columns straddling the edge respond
        assert hist[:, 0, :].sum() == 0.0 and hist[:, 3, :].sum() == 0.0
        assert hist[:, 1, :].sum() > 0.0 and hist[:, 2, :].sum() > 0.0

    def test_two_scales_double_the_count(self):
        img = GrayImage(np.random.default_rng(0).random((44, 36)))
        grid = make_grid(36, 44)
        descs = extract_dense(img, grid, (0.6, 1.0))
        assert len(descs) == 2 * len(grid)
        assert descs[0].scale_index == 0
        assert descs[len(grid)].scale_index == 1

    def test_unit_norm_and_nonnegative(self):
        img = GrayImage(np.random.default_rng(1).random((44, 36)))
        grid = make_grid(36, 44)
        values = extract_dense_values(img, grid, (0.6, 1.0))
        norms = np.linalg.norm(values, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        assert values.min() >= 0.0
        # clipping happens before the final renormalization, so components can
        # exceed 0.2 only by the renormalization factor
        assert values.max() < 0.5

    def test_empty_scales_rejected(self):
        img = GrayImage(np.zeros((20, 20)))
        with pytest.raises(InvalidParameterError):
            extract_dense_values(img, make_grid(20, 20), ())

    def test_deterministic(self):
        img = GrayImage(np.random.default_rng(2).random((60, 40)))
        grid = make_grid(40, 60)
        a = extract_dense_values(img, grid)
        b = extract_dense_values(img, grid)
        np.testing.assert_array_equal(a, b)

    def test_translation_by_one_stride_shifts_blocks(self):
        rng = np.random.default_rng(3)
        big = _smooth_array(rng.random((80, 88)), 2.0)
        img_a = GrayImage(big[:, 0:80])
        img_b = GrayImage(big[:, 8:88])
        grid = make_grid(80, 80)
        va = extract_dense_values(img_a, grid, (0.6,))
        vb = extract_dense_values(img_b, grid, (0.6,))
        # block (gy, gx) of the shifted image matches block (gy, gx+1) of the
        # original, away from image borders
        for gy in range(2, grid.n_y - 2):
            for gx in range(2, grid.n_x - 3):
                a = va[gy * grid.n_x + (gx + 1)]
                b = vb[gy * grid.n_x + gx]
                np.testing.assert_allclose(a, b, atol=1e-10)


class TestPcaFit:
    def test_exact_subspace_recovery(self):
        rng = np.random.default_rng(4)
        basis = rng.standard_normal((2, DESCRIPTOR_DIM))
        coords = rng.standard_normal((300, 2))
        samples = coords @ basis
        model = pca_fit(samples, 2)
        recon = model.inverse_transform(model.transform(samples))
        np.testing.assert_allclose(recon, samples, atol=1e-8)

    def test_isotropic_spectrum_flat(self):
        rng = np.random.default_rng(5)
        samples = rng.standard_normal((30000, DESCRIPTOR_DIM))
        model = pca_fit(samples, 64)
        ratio = model.explained_variance[0] / model.explained_variance[-1]
        assert ratio < 1.5

    def test_basis_rows_orthonormal(self):
        rng = np.random.default_rng(6)
        model = pca_fit(rng.random((500, 32)), 8)
        gram = model.basis @ model.basis.T
        np.testing.assert_allclose(gram, np.eye(8), atol=1e-8)

    def test_explained_variance_non_increasing(self):
        rng = np.random.default_rng(7)
        model = pca_fit(rng.random((400, 16)) * np.arange(1, 17), 16)
        assert np.all(np.diff(model.explained_variance) <= 1e-12)

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(8)
        samples = rng.random((200, 10))
        a = pca_fit(samples, 4)
        b = pca_fit(samples, 4)
        np.testing.assert_array_equal(a.basis, b.basis)
        for row in a.basis:
            assert row[np.argmax(np.abs(row))] > 0

    def test_insufficient_samples_rejected(self):
        with pytest.raises(InvalidParameterError):
            pca_fit(np.zeros((10, 16)), 12)

    def test_reconstruction_error_non_increasing_in_dims(self):
        rng = np.random.default_rng(9)
        samples = rng.random((300, 12))
        errors = []
        for k in range(1, 9):
            model = pca_fit(samples, k)
            recon = model.inverse_transform(model.transform(samples))
            errors.append(np.linalg.norm(recon - samples))
        assert all(e2 <= e1 + 1e-9 for e1, e2 in zip(errors, errors[1:]))

    def test_serialization_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        model = pca_fit(rng.random((300, 24)), 8)
        path = tmp_path / "pca.bin"
        model.save(path)
        loaded = PcaModel.load(path)
        np.testing.assert_array_equal(loaded.mean, model.mean)
        np.testing.assert_array_equal(loaded.basis, model.basis)
        np.testing.assert_array_equal(loaded.explained_variance, model.explained_variance)
        assert loaded.fingerprint == model.fingerprint


class TestEmbed:
    def _model_and_grid(self):
        rng = np.random.default_rng(11)
        img = GrayImage(rng.random((150, 110)))
        grid = make_grid(110, 150)
        raw = extract_dense(img, grid, (0.6, 1.0))
        pca = pca_fit(extract_dense_values(img, grid, (0.6, 1.0)), 64)
        return img, grid, raw, pca

    def test_mean_descriptor_projects_to_zero(self):
        _, _, raw, pca = self._model_and_grid()
        from crossface.features import RawDescriptor

        desc = RawDescriptor(pca.mean.copy(), (3.0, -4.0), 0)
        out = embed(desc, pca, (110, 150))
        np.testing.assert_allclose(out.values[:64], 0.0, atol=1e-10)

    def test_center_block_position_is_origin(self):
        from crossface.features import RawDescriptor

        _, _, _, pca = self._model_and_grid()
        desc = RawDescriptor(np.zeros(DESCRIPTOR_DIM), (0.0, 0.0), 0)
        out = embed(desc, pca, (110, 150))
        assert out.values[64] == 0.0 and out.values[65] == 0.0

    def test_top_left_block_position_in_unit_box(self):
        img, grid, raw, pca = self._model_and_grid()
        out = embed(raw[0], pca, (110, 150))
        px, py = out.values[64], out.values[65]
        assert -1.0 < px < 0.0 and -1.0 < py < 0.0

    def test_all_positions_within_unit_box(self):
        img, grid, raw, pca = self._model_and_grid()
        dset = build_descriptor_set("img", "source", img, grid, pca)
        assert np.all(dset.values[:, 64:] >= -1.0)
        assert np.all(dset.values[:, 64:] <= 1.0)

    def test_embed_dim_is_66(self):
        img, grid, raw, pca = self._model_and_grid()
        out = embed(raw[0], pca, (110, 150))
        assert out.values.shape == (EMBED_DIM,)

    def test_batch_matches_per_descriptor_embed(self):
        img, grid, raw, pca = self._model_and_grid()
        dset = build_descriptor_set("img", "source", img, grid, pca)
        for idx in (0, 7, 203, 204, 407):
            single = embed(raw[idx], pca, (110, 150))
            np.testing.assert_allclose(dset.values[idx], single.values, atol=1e-12)

    def test_full_pipeline_bit_deterministic(self):
        img, grid, raw, pca = self._model_and_grid()
        a = build_descriptor_set("img", "source", img, grid, pca)
        b = build_descriptor_set("img", "source", img, grid, pca)
        np.testing.assert_array_equal(a.values, b.values)
