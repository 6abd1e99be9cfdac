import numpy as np
import pytest

from mnpfactor.data import (ChoiceDataset, apply_scaling, build_design_row,
                            build_design_tensor, choice_from_utilities,
                            choices_from_utilities, read_long_csv,
                            relabel_base_category, standardize_covariates,
                            take_observations, unscale_coefficients,
                            write_long_csv)


def make_dataset(n=6, n_alts=3, k_a=1, k_d=0, seed=0, intercept=True):
    rng = np.random.default_rng(seed)
    return ChoiceDataset(
        choices=rng.integers(0, n_alts, size=n),
        alt_covariates=rng.standard_normal((n, n_alts, k_a)),
        indiv_covariates=rng.standard_normal((n, k_d)) if k_d else None,
        include_intercept=intercept,
    )


class TestChoiceDataset:
    def test_shapes_and_counts(self):
        ds = make_dataset(n=10, n_alts=4, k_a=2, k_d=1)
        assert (ds.N, ds.J, ds.k_a, ds.k_d) == (10, 3, 2, 1)
        assert ds.K == 3 * 2 + 2

    def test_out_of_range_choice_rejected(self):
        with pytest.raises(ValueError):
            ChoiceDataset(choices=np.array([0, 3]),
                          alt_covariates=np.zeros((2, 3, 1)))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ChoiceDataset(choices=np.array([0, 1, 2]),
                          alt_covariates=np.zeros((2, 3, 1)))


class TestBuildDesignRow:
    def test_intercept_and_alt_covariate(self):
        ds = ChoiceDataset(
            choices=np.array([0]),
            alt_covariates=np.array([[[1.0], [2.0], [3.0]]]),
        )
        row = build_design_row(ds, 0)
        assert row.K == 3
        assert np.allclose(row.X, [[1, 0, 1], [0, 1, 2]])

    def test_binary_intercept_only(self):
        ds = ChoiceDataset(
            choices=np.array([1]),
            alt_covariates=np.zeros((1, 2, 0)),
        )
        row = build_design_row(ds, 0)
        assert row.X.shape == (1, 1)
        assert np.allclose(row.X, [[1.0]])

    def test_individual_covariate_kron_block(self):
        ds = ChoiceDataset(
            choices=np.array([0]),
            alt_covariates=np.zeros((1, 3, 0)),
            indiv_covariates=np.array([[5.0]]),
        )
        row = build_design_row(ds, 0)
        assert row.K == 4
        assert np.allclose(row.X, np.hstack([np.eye(2), 5.0 * np.eye(2)]))

    def test_column_count_constant_over_observations(self):
        ds = make_dataset(n=8, n_alts=4, k_a=2, k_d=2)
        for i in range(ds.N):
            assert build_design_row(ds, i).X.shape == (ds.J, ds.K)

    def test_tensor_matches_rows(self):
        ds = make_dataset(n=5, n_alts=4, k_a=2, k_d=1, seed=3)
        X = build_design_tensor(ds)
        for i in range(ds.N):
            assert np.allclose(X[i], build_design_row(ds, i).X)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            build_design_row(make_dataset(), 99)


class TestChoiceRule:
    def test_all_negative(self):
        assert choice_from_utilities(np.array([-1.0, -2.0])) == 0

    def test_argmax(self):
        assert choice_from_utilities(np.array([0.5, 2.0])) == 2

    def test_tie_lowest_index(self):
        assert choice_from_utilities(np.array([3.0, -1.0, 3.0])) == 1

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            z = rng.standard_normal(5)
            for c in (0.01, 2.0, 1000.0):
                assert choice_from_utilities(c * z) == choice_from_utilities(z)

    def test_shift_of_undifferenced_utilities(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            zt = rng.standard_normal(4)
            z = zt[1:] - zt[0]
            shifted = (zt + 3.7)[1:] - (zt + 3.7)[0]
            assert choice_from_utilities(shifted) == choice_from_utilities(z)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(6)
        Z = rng.standard_normal((40, 3))
        Z[:5] = -np.abs(Z[:5])
        batch = choices_from_utilities(Z)
        assert all(batch[i] == choice_from_utilities(Z[i]) for i in range(40))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            choice_from_utilities(np.array([np.nan, 1.0]))


class TestRelabel:
    def test_identity_when_base_unchanged(self):
        ds = make_dataset(seed=7)
        out = relabel_base_category(ds, 0)
        assert np.array_equal(out.choices, ds.choices)
        assert np.array_equal(out.alt_covariates, ds.alt_covariates)

    def test_swap_with_base(self):
        ds = ChoiceDataset(choices=np.array([0, 1, 2]),
                           alt_covariates=np.zeros((3, 3, 0)))
        out = relabel_base_category(ds, 2)
        # transposition 0 <-> 2: observed categories (0,1,2) become (2,1,0)
        assert np.array_equal(out.choices, [2, 1, 0])
        assert out.base_category == 2

    def test_involution(self):
        ds = make_dataset(n=12, n_alts=4, seed=8)
        twice = relabel_base_category(relabel_base_category(ds, 3), 3)
        assert np.array_equal(twice.choices, ds.choices)
        assert np.array_equal(twice.alt_covariates, ds.alt_covariates)
        assert twice.base_category == ds.base_category

    def test_covariate_rows_follow_labels(self):
        ds = make_dataset(n=5, n_alts=4, k_a=2, seed=9)
        out = relabel_base_category(ds, 2)
        assert np.array_equal(out.alt_covariates[:, 0], ds.alt_covariates[:, 2])
        assert np.array_equal(out.alt_covariates[:, 2], ds.alt_covariates[:, 0])
        assert np.array_equal(out.alt_covariates[:, 1], ds.alt_covariates[:, 1])
        # multiset of covariate rows is preserved
        assert np.allclose(np.sort(out.alt_covariates, axis=1),
                           np.sort(ds.alt_covariates, axis=1))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            relabel_base_category(make_dataset(), 5)


class TestStandardize:
    def test_unit_variance_after_scaling(self):
        ds = ChoiceDataset(
            choices=np.zeros(4, dtype=int),
            alt_covariates=np.arange(2.0, 26.0, 2.0).reshape(4, 3, 1),
        )
        scaled, record = standardize_covariates(ds)
        assert np.isclose(scaled.alt_covariates.reshape(-1).var(ddof=1), 1.0)
        assert record.alt_sd[0] > 0

    def test_unit_variance_column_unchanged(self):
        rng = np.random.default_rng(10)
        col = rng.standard_normal(30)
        col = (col - col.mean()) / col.std(ddof=1)
        ds = ChoiceDataset(choices=np.zeros(10, dtype=int),
                           alt_covariates=col.reshape(10, 3, 1))
        scaled, _ = standardize_covariates(ds)
        assert np.allclose(scaled.alt_covariates, ds.alt_covariates)

    def test_constant_column_rejected(self):
        ds = ChoiceDataset(choices=np.zeros(4, dtype=int),
                           alt_covariates=np.ones((4, 3, 1)))
        with pytest.raises(ValueError):
            standardize_covariates(ds)

    def test_indiv_columns_scaled(self):
        ds = make_dataset(n=40, k_d=2, seed=11)
        scaled, record = standardize_covariates(ds)
        assert np.allclose(scaled.indiv_covariates.var(axis=0, ddof=1), 1.0)
        assert record.indiv_sd.shape == (2,)

    def test_apply_scaling_reuses_record(self):
        train = make_dataset(n=30, seed=12)
        test = make_dataset(n=10, seed=13)
        _, record = standardize_covariates(train)
        scaled = apply_scaling(test, record)
        assert np.allclose(scaled.alt_covariates * record.alt_sd,
                           test.alt_covariates)

    def test_unscale_coefficients_layout(self):
        ds = make_dataset(n=30, n_alts=3, k_a=1, k_d=1, seed=14)
        _, record = standardize_covariates(ds)
        beta = np.ones(ds.K)
        back = unscale_coefficients(record, beta, ds)
        assert np.allclose(back[:2], 1.0)  # intercepts untouched
        assert np.allclose(back[2:4], 1.0 / record.indiv_sd[0])
        assert np.allclose(back[4], 1.0 / record.alt_sd[0])


class TestTakeObservations:
    def test_subset(self):
        ds = make_dataset(n=10, seed=15)
        sub = take_observations(ds, [1, 4, 7])
        assert sub.N == 3
        assert np.array_equal(sub.choices, ds.choices[[1, 4, 7]])


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        ds = make_dataset(n=12, n_alts=4, k_a=2, k_d=1, seed=16)
        alt_path = tmp_path / "alt.csv"
        indiv_path = tmp_path / "indiv.csv"
        write_long_csv(ds, alt_path, indiv_path)
        back = read_long_csv(alt_path, indiv_path)
        assert np.array_equal(back.choices, ds.choices)
        assert np.allclose(back.alt_covariates, ds.alt_covariates)
        assert np.allclose(back.indiv_covariates, ds.indiv_covariates)

    def test_missing_alt_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("obs_id,alt_id,chosen,p\n0,0,1,1.0\n0,2,0,2.0\n")
        with pytest.raises(ValueError):
            read_long_csv(path)

    def test_two_chosen_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("obs_id,alt_id,chosen,p\n0,0,1,1.0\n0,1,1,2.0\n")
        with pytest.raises(ValueError):
            read_long_csv(path)

    def test_no_header_fails(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ValueError):
            read_long_csv(path)
