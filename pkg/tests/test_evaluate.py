import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catprior.errors import UsageError
from catprior.evaluate import (
    HISTOGRAM_COLUMNS, PROJECTION_COLUMNS, SCORE_COLUMNS, export_report, frame_pair_score, histogram_rows,
    latent_projection, min_max_ratio, read_csv, reconstruction_score, sample_frame_pool, score_rows,
    visit_entropy, visit_histogram,
)
from catprior.prior import KinematicLatentEnv, PriorNet


class TestReconstructionScore:
    def test_full_pool_scores_one(self, dataset):
        rep = reconstruction_score(dataset, dataset.all_frames)
        np.testing.assert_allclose(rep.scores, 1.0)
        assert rep.ratio == 1.0
        assert rep.counts.sum() == dataset.n_frames

    def test_brute_force_small(self, dataset, rng):
        ref = dataset.all_frames
        pool = ref[[3, 70]] + rng.normal(0, 0.05, (2, ref.shape[1]))
        J = dataset.model.n_joints
        rep = reconstruction_score(dataset, pool, chunk=1)
        for i in (0, 1, 100):
            brute = max(float(frame_pair_score(ref[i], p, J)) for p in pool)
            assert rep.scores[i] == pytest.approx(brute, abs=1e-12)

    def test_scores_in_unit_interval(self, dataset, rng):
        pool = dataset.all_frames[:5] + rng.normal(0, 1.0, (5, 24))
        rep = reconstruction_score(dataset, pool)
        assert np.all((rep.scores > 0) & (rep.scores <= 1))

    @settings(max_examples=15)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
    def test_monotone_in_pool_growth(self, dataset, n, extra, seed):
        rng = np.random.default_rng(seed)
        pool = dataset.all_frames[rng.integers(0, dataset.n_frames, n)] + rng.normal(0, 0.2, (n, 24))
        more = np.concatenate([pool, rng.normal(0, 0.5, (extra, 24))])
        a = reconstruction_score(dataset, pool).scores
        b = reconstruction_score(dataset, more).scores
        assert np.all(b >= a)

    def test_empty_pool(self, dataset):
        with pytest.raises(UsageError):
            reconstruction_score(dataset, np.zeros((0, 24)))

    def test_width_mismatch(self, dataset):
        with pytest.raises(UsageError):
            reconstruction_score(dataset, np.zeros((3, 10)))

    def test_score_rows_schema(self, dataset):
        rows = score_rows(dataset, reconstruction_score(dataset, dataset.all_frames[:4]))
        assert all(len(r) == len(SCORE_COLUMNS) for r in rows)
        assert len(rows) == dataset.n_frames


class TestVisits:
    def test_counts_bounded_and_deterministic(self, two_skill_dataset):
        prior = PriorNet.init(KinematicLatentEnv(two_skill_dataset, 1).obs_dim, 8, (8,), np.random.default_rng(0))

        def run():
            env = KinematicLatentEnv(two_skill_dataset, 4)
            return visit_histogram(prior, env, two_skill_dataset, 500, np.random.default_rng(1))

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)
        assert a.sum() <= 500
        assert a.sum() > 0

    def test_frame_pool(self, two_skill_dataset):
        env = KinematicLatentEnv(two_skill_dataset, 4)
        prior = PriorNet.init(env.obs_dim, 8, (8,), np.random.default_rng(0))
        pool = sample_frame_pool(prior, env, 37, np.random.default_rng(0))
        assert pool.shape == (37, 24)
        assert np.all(np.isfinite(pool))

    def test_entropy_and_ratio(self):
        assert visit_entropy([5, 5, 5, 5]) == pytest.approx(np.log(4))
        assert visit_entropy([0, 7]) == pytest.approx(0.0)
        assert visit_entropy([0, 0]) == 0.0
        assert min_max_ratio([2, 8, 4]) == pytest.approx(0.25)
        assert min_max_ratio([0, 0]) == 0.0

    def test_histogram_rows_sorted_by_before(self):
        rows = histogram_rows([3, 9, 3, 1], [4, 4, 4, 4])
        assert [r[1] for r in rows] == [1, 0, 2, 3]
        assert all(len(r) == len(HISTOGRAM_COLUMNS) for r in rows)


class TestProjection:
    def test_line_has_zero_second_coordinate(self, rng):
        t = rng.normal(size=30)
        x = np.outer(t, [1.0, 2.0, -0.5]) + 3.0
        p = latent_projection(x)
        assert p.rank == 1
        np.testing.assert_allclose(p.coords[:, 1], 0.0, atol=1e-9)

    def test_symmetric_pair(self):
        p = latent_projection(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        np.testing.assert_allclose(p.coords[0], -p.coords[1], atol=1e-12)

    def test_matches_independent_oracle(self, rng):
        x = rng.normal(size=(50, 4)) @ rng.normal(size=(4, 4))
        p = latent_projection(x)
        xc = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(xc, full_matrices=False)  # right singular vectors = covariance eigenvectors
        ref = xc @ vt[:2].T
        for i in range(2):
            s = np.sign(ref[:, i] @ p.coords[:, i])
            np.testing.assert_allclose(p.coords[:, i], s * ref[:, i], atol=1e-8)

    def test_sign_convention(self, rng):
        p = latent_projection(rng.normal(size=(20, 3)))
        for c in p.components:
            assert c[np.argmax(np.abs(c))] > 0

    def test_needs_two_vectors(self):
        with pytest.raises(UsageError):
            latent_projection(np.zeros((1, 3)))


class TestExport:
    def tables(self):
        return {"proj": (PROJECTION_COLUMNS, [[0, 0.5, -1.25], [1, 1e-17, 3.0]]),
                "hist": (HISTOGRAM_COLUMNS, histogram_rows([3, 1], [2, 2]))}

    def test_round_trip(self, tmp_path):
        export_report(self.tables(), tmp_path, "seed = 0\n", {"sim": 0})
        cols, rows = read_csv(tmp_path / "proj.csv")
        assert cols == PROJECTION_COLUMNS
        assert float(rows[1][1]) == 1e-17
        assert float(rows[0][2]) == -1.25

    def test_manifest_tracks_config(self, tmp_path):
        a = export_report(self.tables(), tmp_path / "a", "seed = 0\n", {"sim": 0}, {"prior": "abc"})
        b = export_report(self.tables(), tmp_path / "b", "seed = 0\n", {"sim": 0}, {"prior": "abc"})
        c = export_report(self.tables(), tmp_path / "c", "seed = 1\n", {"sim": 0}, {"prior": "abc"})
        assert a == b
        assert a["manifest.txt"] != c["manifest.txt"]
        assert a["proj.csv"] == c["proj.csv"]
        text = (tmp_path / "a" / "manifest.txt").read_text()
        assert "checkpoint.prior = abc" in text
        assert "seed.sim = 0" in text

    def test_row_width_checked(self, tmp_path):
        with pytest.raises(UsageError):
            export_report({"bad": (["a", "b"], [[1]])}, tmp_path, "", {})

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            export_report(self.tables(), os.path.join(blocker, "sub"), "", {})
