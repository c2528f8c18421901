import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wclab.data import (DataError, Dataset, TeacherSpec, covariance_of_rows, empirical_covariance, load_csv,
                        subsample, synth_teacher, write_csv)


class TestDataset:
    def test_rejects_bad_labels(self):
        with pytest.raises(DataError, match="labels"):
            Dataset(np.zeros((2, 1)), np.array([0.0, 1.0]))

    def test_rejects_non_finite(self):
        with pytest.raises(DataError, match="non-finite"):
            Dataset(np.array([[np.nan]]), np.array([1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2)), np.ones(2))

    def test_arrays_are_read_only(self):
        ds = Dataset(np.zeros((2, 2)), np.ones(2))
        with pytest.raises(ValueError):
            ds.X[0, 0] = 1.0

    def test_replace_point_leaves_original(self):
        ds = Dataset(np.arange(6.0).reshape(3, 2), np.array([1.0, -1.0, 1.0]))
        new = ds.replace_point(1, [9.0, 9.0], 1.0)
        assert ds.X[1, 0] == 2.0 and ds.y[1] == -1.0
        np.testing.assert_array_equal(new.X[1], [9.0, 9.0])
        assert new.y[1] == 1.0

    def test_hash_changes_with_content(self):
        a = Dataset(np.zeros((2, 2)), np.ones(2))
        b = Dataset(np.zeros((2, 2)), np.array([1.0, -1.0]))
        assert a.content_hash() != b.content_hash()
        assert a.content_hash() == Dataset(np.zeros((2, 2)), np.ones(2)).content_hash()


class TestCsv:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        ds = Dataset(rng.standard_normal((7, 3)), np.where(rng.random(7) < 0.5, -1.0, 1.0))
        write_csv(ds, tmp_path / "d.csv", header=True)
        back = load_csv(tmp_path / "d.csv", has_header=True)
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.y, ds.y)

    def test_label_coding_maps_smaller_to_minus_one(self, tmp_path):
        (tmp_path / "a.csv").write_text("1.0,2\n3.0,7\n")
        ds = load_csv(tmp_path / "a.csv")
        np.testing.assert_array_equal(ds.y, [-1.0, 1.0])

    def test_string_labels_and_first_column(self, tmp_path):
        (tmp_path / "b.csv").write_text("yes,1.5\nno,2.5\n")
        ds = load_csv(tmp_path / "b.csv", label_column=0)
        np.testing.assert_array_equal(ds.y, [1.0, -1.0])
        np.testing.assert_array_equal(ds.X[:, 0], [1.5, 2.5])

    def test_bad_float_names_row(self, tmp_path):
        (tmp_path / "c.csv").write_text("1.0,1\nabc,-1\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv(tmp_path / "c.csv")

    def test_three_labels_rejected(self, tmp_path):
        (tmp_path / "e.csv").write_text("1,0\n2,1\n3,2\n")
        with pytest.raises(DataError, match="two"):
            load_csv(tmp_path / "e.csv")


class TestCovariance:
    def test_matches_numpy_oracle(self, rng):
        X = rng.standard_normal((40, 4))
        ds = Dataset(X, np.ones(40))
        cov = empirical_covariance(ds)
        oracle = X.T @ X / 40
        np.testing.assert_allclose(cov.sigma_hat, oracle, atol=1e-14)
        assert cov.spectral_norm == pytest.approx(np.linalg.norm(oracle, 2), rel=1e-12)
        assert cov.trace == pytest.approx(np.sum(X * X) / 40, rel=1e-12)

    def test_identity_rows(self):
        cov = covariance_of_rows(np.eye(3))
        assert cov.spectral_norm == pytest.approx(1 / 3)
        assert cov.trace == pytest.approx(1.0)

    @given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_spectral_norm_between_trace_over_d_and_trace(self, n, d, seed):
        X = np.random.default_rng(seed).standard_normal((n, d))
        cov = covariance_of_rows(X)
        assert cov.spectral_norm <= cov.trace * (1 + 1e-12)
        assert cov.spectral_norm >= cov.trace / d * (1 - 1e-12)


class TestTeacher:
    def test_frobenius_norm_target(self):
        td = synth_teacher(TeacherSpec(M_star=20, d=4, mu=0.3, seed=5, N_train=10, N_test=10))
        assert np.linalg.norm(td.teacher.A) == pytest.approx(20 ** 0.2, abs=1e-10)
        assert set(np.unique(td.teacher.v)) <= {-1.0, 1.0}

    def test_deterministic(self):
        spec = TeacherSpec(M_star=5, d=3, mu=0.5, seed=9, N_train=20, N_test=30, label_noise=True)
        a, b = synth_teacher(spec), synth_teacher(spec)
        assert a.train.content_hash() == b.train.content_hash()
        assert a.test.content_hash() == b.test.content_hash()

    def test_noise_free_labels_follow_teacher_sign(self):
        from wclab.model import forward

        td = synth_teacher(TeacherSpec(M_star=6, d=3, mu=0.0, seed=1, N_train=50, N_test=5))
        f = forward(td.teacher, td.train.X)
        np.testing.assert_array_equal(td.train.y, np.where(f >= 0, 1.0, -1.0))

    def test_mu_out_of_range(self):
        with pytest.raises(DataError, match="mu"):
            synth_teacher(TeacherSpec(M_star=5, d=2, mu=1.5))

    def test_subsample_is_sorted_subset(self, rng):
        ds = Dataset(np.arange(20.0).reshape(10, 2), np.ones(10))
        sub = subsample(ds, 4, seed=3)
        assert sub.n == 4
        assert np.all(np.diff(sub.X[:, 0]) > 0)
        assert sub.content_hash() == subsample(ds, 4, seed=3).content_hash()
