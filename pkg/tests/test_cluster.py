import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from stseg.cluster import (
    DBSCAN,
    MiniBatchKMeans,
    NOISE,
    dbscan_reference,
    lloyd_reference,
)


def blobs(rng, centers, n_per, scale=0.3):
    parts = [c + rng.normal(0, scale, size=(n_per, len(c))) for c in centers]
    return np.vstack(parts)


class TestKMeans:
    def test_objective_non_increasing_full_batch(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            x = rng.uniform(-5, 5, size=(400, 2))
            km = MiniBatchKMeans(n_clusters=5, n_iter=40, seed=seed).fit(x)
            h = km.objective_history_
            assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))

    def test_objective_non_increasing_normalized(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(300, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        km = MiniBatchKMeans(n_clusters=4, n_iter=40, normalize=True, seed=3).fit(x)
        h = km.objective_history_
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))
        assert np.allclose(np.linalg.norm(km.cluster_centers_, axis=1), 1.0)

    def test_recovers_separated_blobs(self):
        rng = np.random.default_rng(2)
        x = blobs(rng, [(-10, -10), (10, 10), (10, -10)], 100)
        km = MiniBatchKMeans(n_clusters=3, n_iter=50, seed=0).fit(x)
        # each blob ends up in its own cluster
        for start in (0, 100, 200):
            seg = km.labels_[start:start + 100]
            assert (seg == seg[0]).all()

    def test_close_to_multi_restart_lloyd(self):
        rng = np.random.default_rng(3)
        x = blobs(rng, [(-6, 0), (6, 0), (0, 7), (0, -7)], 80, scale=0.8)
        km = MiniBatchKMeans(n_clusters=4, n_iter=60, seed=1).fit(x)
        ref = lloyd_reference(x, 4, seed=0, n_init=200)
        assert km.inertia_ <= ref * 1.05

    def test_minibatch_mode_clusters_separated_data(self):
        rng = np.random.default_rng(4)
        x = blobs(rng, [(-20, 0), (20, 0)], 500, scale=0.5)
        km = MiniBatchKMeans(n_clusters=2, n_iter=60, batch_size=64, seed=2).fit(x)
        left = km.labels_[:500]
        right = km.labels_[500:]
        assert (left == left[0]).all() and (right == right[0]).all()
        assert left[0] != right[0]

    def test_empty_cluster_reseeded(self):
        # two far duplicated sites and k=3: one center must go empty and be
        # re-seeded from the farthest point rather than dying
        x = np.array([[0.0, 0.0]] * 50 + [[100.0, 0.0]] * 50 + [[200.0, 0.0]] * 2)
        km = MiniBatchKMeans(n_clusters=3, n_iter=30, seed=7).fit(x)
        assert len(np.unique(km.labels_)) == 3

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(200, 3))
        a = MiniBatchKMeans(n_clusters=4, n_iter=20, seed=9).fit(x)
        b = MiniBatchKMeans(n_clusters=4, n_iter=20, seed=9).fit(x)
        assert np.array_equal(a.labels_, b.labels_)
        assert np.array_equal(a.cluster_centers_, b.cluster_centers_)

    def test_predict_requires_fit(self):
        with pytest.raises(NotFittedError):
            MiniBatchKMeans().predict(np.zeros((3, 2)))

    def test_too_few_rows_raises(self):
        with pytest.raises(ValueError):
            MiniBatchKMeans(n_clusters=5).fit(np.zeros((3, 2)))

    def test_get_params_round_trip(self):
        km = MiniBatchKMeans(n_clusters=7, normalize=True, seed=11)
        params = km.get_params()
        assert params["n_clusters"] == 7 and params["normalize"]
        km2 = MiniBatchKMeans(**params)
        assert km2.seed == 11


class TestDbscan:
    def test_matches_reference_on_random_sets(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            n = int(rng.integers(40, 120))
            dim = int(rng.integers(2, 5))
            x = rng.uniform(-3, 3, size=(n, dim))
            eps = float(rng.uniform(0.5, 1.2))
            min_pts = int(rng.integers(3, 7))
            got = DBSCAN(eps=eps, min_pts=min_pts).fit_predict(x)
            ref = dbscan_reference(x, eps, min_pts)
            assert np.array_equal(got, ref), f"trial {trial} diverged"

    def test_blobs_and_noise(self):
        rng = np.random.default_rng(7)
        a = rng.normal((0, 0, 0), 0.2, size=(60, 3))
        b = rng.normal((10, 0, 0), 0.2, size=(60, 3))
        lone = np.array([[5.0, 5.0, 5.0]])
        labels = DBSCAN(eps=0.8, min_pts=5).fit_predict(np.vstack([a, b, lone]))
        assert labels[-1] == NOISE
        assert len(set(labels[:60])) == 1
        assert len(set(labels[60:120])) == 1
        assert labels[0] != labels[60]

    def test_cluster_ids_contiguous_from_zero(self):
        rng = np.random.default_rng(8)
        x = blobs(rng, [(0, 0), (6, 0), (12, 0)], 30, scale=0.2)
        labels = DBSCAN(eps=1.0, min_pts=4).fit_predict(x)
        ids = sorted(set(labels) - {NOISE})
        assert ids == list(range(len(ids)))
        assert len(ids) == 3

    def test_all_noise_when_sparse(self):
        x = np.arange(30, dtype=np.float64).reshape(-1, 3) * 100
        labels = DBSCAN(eps=0.5, min_pts=3).fit_predict(x)
        assert (labels == NOISE).all()

    def test_empty_input(self):
        labels = DBSCAN().fit_predict(np.zeros((0, 4)))
        assert labels.shape == (0,)

    def test_permutation_invariance_on_separated_blobs(self):
        rng = np.random.default_rng(9)
        x = blobs(rng, [(0, 0, 0), (8, 0, 0), (0, 8, 0)], 40, scale=0.25)
        base = DBSCAN(eps=1.0, min_pts=4).fit_predict(x)
        for _ in range(5):
            perm = rng.permutation(len(x))
            shuffled = DBSCAN(eps=1.0, min_pts=4).fit_predict(x[perm])
            # same partition after undoing the permutation
            remap = {}
            back = np.empty_like(shuffled)
            back[perm] = shuffled
            ok = True
            for i in range(len(x)):
                if base[i] == NOISE:
                    ok &= back[i] == NOISE
                else:
                    key = base[i]
                    remap.setdefault(key, back[i])
                    ok &= remap[key] == back[i]
            assert ok
