import math

import numpy as np
import pytest

from infomaxda.numerics import Rng
from infomaxda.synthdata import (DomainSpec, LabeledSet, UnlabeledSet, batch_indices, batch_iterator,
                                 gen_blob_shift, gen_correlated_gaussians, gen_two_moons, load_csv, rotate,
                                 save_csv)


class TestTwoMoons:
    def test_balanced_and_deterministic(self):
        a = gen_two_moons(101, 0.1, seed=3)
        assert np.bincount(a.y).tolist() == [51, 50]
        assert a.class_count == 2
        b = gen_two_moons(101, 0.1, seed=3)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_noise_free_points_on_arcs(self):
        d = gen_two_moons(4, 0.0, seed=0)
        upper, lower = d.x[d.y == 0], d.x[d.y == 1]
        np.testing.assert_allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-15)
        np.testing.assert_allclose(np.hypot(1.0 - lower[:, 0], 0.5 - lower[:, 1]), 1.0, atol=1e-15)
        assert np.all(upper[:, 1] >= 0) and np.all(lower[:, 1] <= 0.5)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            gen_two_moons(1)
        with pytest.raises(ValueError):
            gen_two_moons(10, noise=-0.1)


class TestRotate:
    def test_zero_and_full_turn(self):
        d = gen_two_moons(20, 0.1, seed=1)
        assert np.array_equal(rotate(d, 0).x, d.x)
        np.testing.assert_allclose(rotate(d, 360).x, d.x, atol=1e-14)

    def test_quarter_turn_counter_clockwise(self):
        d = LabeledSet(np.array([[1.0, 0.0]]), [0], 2)
        np.testing.assert_allclose(rotate(d, 90).x, [[0.0, 1.0]], atol=1e-15)

    def test_preserves_norms_and_labels(self):
        d = gen_two_moons(50, 0.2, seed=2)
        r = rotate(d, 45)
        np.testing.assert_allclose(np.linalg.norm(r.x, axis=1), np.linalg.norm(d.x, axis=1), rtol=1e-14)
        assert np.array_equal(r.y, d.y)

    def test_needs_two_dims(self):
        with pytest.raises(ValueError):
            rotate(UnlabeledSet(np.zeros((3, 3))), 10)


class TestBlobShift:
    def test_zero_shift_same_distribution(self):
        src, tgt = gen_blob_shift(400, 3, 4, [0, 0, 0], seed=5)
        assert np.array_equal(src.y, tgt.y)
        np.testing.assert_allclose(src.x.mean(0), tgt.x.mean(0), atol=0.25)

    def test_shift_moves_target_mean(self):
        src, tgt = gen_blob_shift(2000, 2, 2, [3.0, -1.0], seed=1)
        np.testing.assert_allclose(tgt.x.mean(0) - src.x.mean(0), [3.0, -1.0], atol=0.1)

    def test_validation(self):
        with pytest.raises(ValueError):
            gen_blob_shift(10, 2, 1, [0, 0])
        with pytest.raises(ValueError):
            gen_blob_shift(10, 2, 2, [0, 0, 0])


class TestCorrelatedGaussians:
    def test_sample_correlation(self):
        x, z = gen_correlated_gaussians(50_000, 2, 0.9, seed=0)
        for j in range(2):
            assert np.corrcoef(x[:, j], z[:, j])[0, 1] == pytest.approx(0.9, abs=0.01)
        assert z.std() == pytest.approx(1.0, abs=0.02)

    def test_rho_bounds(self):
        with pytest.raises(ValueError):
            gen_correlated_gaussians(10, 1, 1.0)


class TestDomainSpec:
    def test_build_moons_with_rotation(self):
        spec = DomainSpec("two_moons", {"n": 30, "noise": 0.1, "seed": 4, "rotation_deg": 30})
        assert np.array_equal(spec.build().x, rotate(gen_two_moons(30, 0.1, 4), 30).x)

    def test_missing_and_unknown(self):
        with pytest.raises(ValueError):
            DomainSpec("two_moons", {"n": 30})
        with pytest.raises(ValueError):
            DomainSpec("spirals", {})
        with pytest.raises(ValueError):
            DomainSpec("correlated_gaussian", {"n": 10, "dims": 1, "rho": 2.0, "seed": 0})


class TestCsv:
    def test_round_trip_labeled(self, tmp_path):
        d = gen_two_moons(25, 0.1, seed=9)
        save_csv(d, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert isinstance(back, LabeledSet)
        assert np.array_equal(back.x, d.x) and np.array_equal(back.y, d.y)

    def test_round_trip_unlabeled(self, tmp_path):
        d = UnlabeledSet(Rng(0).normal(9).reshape(3, 3))
        save_csv(d, tmp_path / "u.csv")
        back = load_csv(tmp_path / "u.csv")
        assert isinstance(back, UnlabeledSet) and np.array_equal(back.x, d.x)

    def test_malformed_value_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("f0,f1,label\n1.0,2.0,0\n1.0,oops,1\n")
        with pytest.raises(ValueError, match="line 3"):
            load_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("f0,f1\n1.0,2.0\n1.0\n")
        with pytest.raises(ValueError, match="line 3"):
            load_csv(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            load_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")

    def test_non_finite_value(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("f0\nnan\n")
        with pytest.raises(ValueError, match="line 2"):
            load_csv(p)


class TestBatching:
    def test_covers_every_row_once(self):
        batches = batch_indices(10, 4, Rng(0))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_drops_singleton_tail(self):
        batches = batch_indices(9, 4, Rng(0))
        assert [len(b) for b in batches] == [4, 4]

    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            batch_indices(10, 1, Rng(0))

    def test_iterator_keeps_labels_aligned(self):
        d = LabeledSet(np.arange(12.0).reshape(6, 2), [0, 1, 0, 1, 0, 1], 2)
        for batch in batch_iterator(d, 4, Rng(2)):
            assert np.array_equal(batch.y, (batch.x[:, 0] / 2).astype(int) % 2)

    def test_labeled_set_validation(self):
        with pytest.raises(ValueError):
            LabeledSet(np.zeros((2, 2)), [0, 2], 2)
        with pytest.raises(ValueError):
            LabeledSet(np.zeros((2, 2)), [0], 2)
