import numpy as np
import pytest

from disagg.data_prep import (
    NormalizationParams,
    PaddedDataset,
    PixelTable,
    build_pixel_tables,
    chunk_full_grid,
    fit_apply_normalization,
    load_dataset,
    pad_dataset,
    pad_to,
    prepare_dataset,
    save_dataset,
    subset_dataset,
)
from disagg.grid_io import Raster, RasterStack, RegionMask


def grid(values, nodata=-9999.0, cellsize=1.0):
    values = np.asarray(values, dtype=float)
    return Raster(ncols=values.shape[1], nrows=values.shape[0], xll=0.0, yll=0.0,
                  cellsize=cellsize, nodata=nodata, values=values)


def one_region_mask(shape, n_regions=1):
    return RegionMask(indices=np.zeros(shape, dtype=np.int32), n_regions=n_regions)


def table(values, pop=None, region_index=0):
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    n = values.shape[0]
    if pop is None:
        pop = np.ones(n)
    return PixelTable(
        region_index=region_index, region_id=f"r{region_index}",
        pixel_indices=np.arange(n), covariates=values,
        population=np.asarray(pop, dtype=float), xy=np.zeros((n, 2)),
    )


def identity_norm(n_channels):
    return NormalizationParams(cov_mean=np.zeros(n_channels), cov_sd=np.ones(n_channels),
                               xy_mean=np.zeros(2), xy_sd=np.ones(2))


class TestBuildPixelTables:
    def test_full_region(self):
        stack = RasterStack(names=("a",), layers=(grid([[1, 2], [3, 4]]),))
        tables = build_pixel_tables(stack, grid([[1, 1], [1, 1]]), one_region_mask((2, 2)))
        assert len(tables) == 1
        assert tables[0].n_pixels == 4

    def test_population_nodata_drops_pixel(self):
        stack = RasterStack(names=("a",), layers=(grid([[1, 2], [3, 4]]),))
        tables = build_pixel_tables(stack, grid([[1, -9999], [1, 1]]),
                                    one_region_mask((2, 2)))
        assert tables[0].n_pixels == 3
        assert 1 not in tables[0].pixel_indices

    def test_covariate_nodata_drops_pixel(self):
        stack = RasterStack(names=("a", "b"),
                            layers=(grid([[1, 2], [3, 4]]), grid([[1, 2], [-9999, 4]])))
        tables = build_pixel_tables(stack, grid([[1, 1], [1, 1]]), one_region_mask((2, 2)))
        assert tables[0].n_pixels == 3

    def test_negative_population_dropped(self):
        stack = RasterStack(names=("a",), layers=(grid([[1, 2], [3, 4]]),))
        tables = build_pixel_tables(stack, grid([[1, -5], [1, 1]]), one_region_mask((2, 2)))
        assert tables[0].n_pixels == 3

    def test_empty_region_excluded_and_logged(self, caplog):
        stack = RasterStack(names=("a",), layers=(grid([[1, 2], [3, 4]]),))
        indices = np.array([[0, 0], [0, 1]], dtype=np.int32)
        population = grid([[1, 1], [1, -9999]])  # region 1's only pixel is unusable
        with caplog.at_level("WARNING"):
            tables = build_pixel_tables(stack, population,
                                        RegionMask(indices=indices, n_regions=2))
        assert [t.region_index for t in tables] == [0]
        assert "region index 1 excluded" in caplog.text

    def test_all_regions_empty_is_error(self):
        stack = RasterStack(names=("a",), layers=(grid([[-9999.0]]),))
        with pytest.raises(ValueError, match="no usable pixels"):
            build_pixel_tables(stack, grid([[1.0]]), one_region_mask((1, 1)))

    def test_study_scale_shapes(self):
        """109 regions, largest 867 pixels, 4 covariates -> (109, 867, 4) tensors."""
        nrows, ncols = 109, 867
        rng = np.random.default_rng(0)
        layers = tuple(grid(rng.normal(size=(nrows, ncols))) for _ in range(4))
        stack = RasterStack(names=("c0", "c1", "c2", "c3"), layers=layers)
        population = grid(np.full((nrows, ncols), 100.0))
        mask = RegionMask(
            indices=np.repeat(np.arange(nrows, dtype=np.int32), ncols).reshape(nrows, ncols),
            n_regions=109,
        )
        tables = build_pixel_tables(stack, population, mask)
        assert len(tables) == 109
        assert max(t.n_pixels for t in tables) == 867
        tables, norm = fit_apply_normalization(tables)
        dataset = pad_dataset(tables, np.ones(109), norm)
        assert dataset.covariates.shape == (109, 867, 4)
        assert dataset.population.shape == (109, 867)


class TestNormalization:
    def test_three_point_channel(self):
        tables, params = fit_apply_normalization([table([1.0, 2.0, 3.0])])
        assert params.cov_mean[0] == 2.0
        assert params.cov_sd[0] == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-15)
        transformed = np.round(tables[0].covariates[:, 0], 4)
        assert transformed.tolist() == [-1.2247, 0.0, 1.2247]

    def test_constant_channel_centered_only(self):
        tables, params = fit_apply_normalization([table([5.0, 5.0])])
        assert params.cov_sd[0] == 0.0
        assert tables[0].covariates[:, 0].tolist() == [0.0, 0.0]

    def test_existing_params_applied_unchanged(self):
        params = NormalizationParams(cov_mean=[2.0], cov_sd=[1.0],
                                     xy_mean=[0.0, 0.0], xy_sd=[1.0, 1.0])
        tables, back = fit_apply_normalization([table([4.0])], existing=params)
        assert back is params
        assert tables[0].covariates[0, 0] == 2.0

    def test_refit_on_transformed_pixels_is_idempotent(self):
        raw = [table([1.0, 2.0, 5.0]), table([0.0, -2.0], region_index=1)]
        once, params = fit_apply_normalization(raw)
        again, _ = fit_apply_normalization(raw, existing=params)
        for a, b in zip(once, again):
            assert (a.covariates == b.covariates).all()
            assert (a.xy == b.xy).all()

    def test_empty_tables_rejected(self):
        with pytest.raises(ValueError, match="no pixel tables"):
            fit_apply_normalization([])


class TestPadDataset:
    def test_two_regions_padding(self):
        tables = [table([1.0, 2.0]), table([1.0, 2.0, 3.0, 4.0], region_index=1)]
        dataset = pad_dataset(tables, [5.0, 6.0], identity_norm(1))
        assert dataset.pmax == 4
        assert (dataset.covariates[0, 2:] == 0).all()
        assert (dataset.population[0, 2:] == 0).all()
        assert dataset.true_lengths.tolist() == [2, 4]

    def test_single_region_no_padding(self):
        dataset = pad_dataset([table([1.0, 2.0, 3.0])], [1.0], identity_norm(1))
        assert dataset.pmax == 3
        assert (dataset.population[0] > 0).all()

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            pad_dataset([table([1.0])], [1.0, 2.0], identity_norm(1))

    def test_negative_response_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            pad_dataset([table([1.0])], [-1.0], identity_norm(1))

    def test_pad_to_appends_zero_slots(self):
        dataset = pad_dataset([table([1.0, 2.0])], [1.0], identity_norm(1))
        wider = pad_to(dataset, 12)
        assert wider.pmax == 12
        assert wider.covariates.shape == (1, 12, 1)
        assert (wider.covariates[0, 2:] == 0).all()
        assert (wider.true_lengths == dataset.true_lengths).all()


class TestSubsetDataset:
    def test_refit_matches_fresh_build(self, small_problem):
        data, dataset = small_problem
        idx = np.array([0, 3, 7, 11])
        sub = subset_dataset(dataset, idx)
        # statistics recomputed over just those regions' pixels
        lengths = dataset.true_lengths[idx]
        raw = np.concatenate([
            dataset.covariates[r, :l] * dataset.norm.cov_divisor + dataset.norm.cov_mean
            for r, l in zip(idx, lengths)
        ])
        np.testing.assert_allclose(sub.norm.cov_mean, raw.mean(axis=0), rtol=1e-12)
        renorm = np.concatenate([sub.covariates[i, :l] for i, l in enumerate(lengths)])
        np.testing.assert_allclose(renorm.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(renorm.std(axis=0), 1.0, rtol=1e-12)

    def test_given_norm_applied_not_refit(self, small_problem):
        _, dataset = small_problem
        train = subset_dataset(dataset, np.arange(20))
        test = subset_dataset(dataset, np.arange(20, 25), norm=train.norm)
        assert test.norm is train.norm
        # held-out pixels are scaled by train statistics, so not exactly standard
        flat = np.concatenate([test.covariates[i, :l]
                               for i, l in enumerate(test.true_lengths)])
        assert abs(flat.mean()) > 1e-6

    def test_padding_stays_zero(self, small_problem):
        _, dataset = small_problem
        sub = subset_dataset(dataset, np.arange(5))
        pad = np.arange(sub.pmax)[None, :] >= sub.true_lengths[:, None]
        assert (sub.covariates[pad] == 0).all()
        assert (sub.xy[pad] == 0).all()

    def test_empty_subset_rejected(self, small_problem):
        _, dataset = small_problem
        with pytest.raises(ValueError, match="zero regions"):
            subset_dataset(dataset, [])


class TestChunkFullGrid:
    def make_stack(self, usable=10, shape=(3, 4)):
        values = np.arange(shape[0] * shape[1], dtype=float).reshape(shape)
        flat = values.ravel()
        flat[usable:] = -9999.0
        return RasterStack(names=("a",), layers=(grid(flat.reshape(shape)),))

    def test_ten_pixels_pmax_four(self):
        chunks = chunk_full_grid(self.make_stack(10), None, identity_norm(1), 4)
        assert chunks.n_chunks == 3
        assert (chunks.placement[-1] == -1).sum() == 2
        assert chunks.linear_indices().size == 10

    def test_exactly_divisible_no_padding(self):
        chunks = chunk_full_grid(self.make_stack(8), None, identity_norm(1), 4)
        assert chunks.n_chunks == 2
        assert (chunks.placement >= 0).all()

    def test_nodata_cells_absent(self):
        chunks = chunk_full_grid(self.make_stack(5), None, identity_norm(1), 4)
        assert set(chunks.linear_indices()) == set(range(5))

    def test_placement_is_bijection(self):
        for usable in (1, 5, 10, 12):
            chunks = chunk_full_grid(self.make_stack(usable), None, identity_norm(1), 4)
            idx = chunks.linear_indices()
            assert len(set(idx.tolist())) == idx.size == usable

    def test_normalization_applied(self):
        norm = NormalizationParams(cov_mean=[1.0], cov_sd=[2.0],
                                   xy_mean=[0.0, 0.0], xy_sd=[1.0, 1.0])
        chunks = chunk_full_grid(self.make_stack(10), None, norm, 4)
        first_cell_value = (0.0 - 1.0) / 2.0
        assert chunks.covariates[0, 0, 0] == first_cell_value

    def test_population_chunks_when_given(self):
        stack = self.make_stack(10)
        pop = grid(np.full((3, 4), 7.0))
        chunks = chunk_full_grid(stack, pop, identity_norm(1), 4)
        assert chunks.population.shape == (3, 4)
        assert (chunks.population[-1][chunks.placement[-1] == -1] == 0).all()


class TestSerialization:
    def test_round_trip_bit_exact(self, small_problem, tmp_path):
        _, dataset = small_problem
        save_dataset(dataset, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert (back.covariates == dataset.covariates).all()
        assert (back.population == dataset.population).all()
        assert (back.xy == dataset.xy).all()
        assert (back.response == dataset.response).all()
        assert back.region_ids == dataset.region_ids
        assert back.covariate_names == dataset.covariate_names
        assert (back.norm.cov_mean == dataset.norm.cov_mean).all()
        assert (back.norm.cov_sd == dataset.norm.cov_sd).all()
        assert back.pmax == dataset.pmax


class TestPrepareDataset:
    def test_misaligned_inputs_raise(self, small_problem):
        data, _ = small_problem
        shifted = Raster(
            ncols=data.population.ncols, nrows=data.population.nrows,
            xll=data.population.xll + 1.0, yll=data.population.yll,
            cellsize=data.population.cellsize, nodata=data.population.nodata,
            values=data.population.values,
        )
        with pytest.raises(ValueError, match="xll"):
            prepare_dataset(data.stack, shifted, data.regions)

    def test_region_ids_follow_region_set(self, small_problem):
        data, dataset = small_problem
        assert dataset.region_ids == data.regions.ids
        assert dataset.covariate_names == data.stack.names
