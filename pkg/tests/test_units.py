import numpy as np
import pytest

from jedssl.frontend import CorpusSpec, FrontendConfig, extract_features, frame_phone_labels, generate_synthetic_corpus, init_frontend_params
from jedssl.units import (
    KMeansModel,
    cluster_purity,
    kmeans_assign,
    kmeans_fit,
    load_kmeans,
    refit_from_model_layer,
    save_kmeans,
)

from oracles import brute_force_assign


@pytest.fixture
def blobs(rng):
    centers = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    return np.concatenate([c + rng.normal(0, 0.5, (40, 2)) for c in centers])


class TestFit:
    def test_inertia_non_increasing(self, rng):
        model = kmeans_fit(rng.normal(size=(300, 4)), 6, seed=3)
        h = np.array(model.inertia_history)
        assert np.all(np.diff(h) <= 1e-9 * h[:-1])

    def test_recovers_separated_blobs(self, blobs):
        model = kmeans_fit(blobs, 3, seed=0)
        ids = kmeans_assign(model, blobs)
        assert cluster_purity(ids, np.repeat([0, 1, 2], 40)) == 1.0

    def test_deterministic_per_seed(self, rng):
        x = rng.normal(size=(100, 3))
        np.testing.assert_array_equal(kmeans_fit(x, 4, seed=7).centroids, kmeans_fit(x, 4, seed=7).centroids)

    def test_accepts_list_of_utterances(self, blobs):
        a = kmeans_fit([blobs[:50], blobs[50:]], 3, seed=1)
        b = kmeans_fit(blobs, 3, seed=1)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_too_few_frames(self):
        with pytest.raises(ValueError, match="fewer than K"):
            kmeans_fit(np.zeros((2, 3)), 3)

    def test_duplicate_points_do_not_leave_empty_clusters(self):
        x = np.repeat(np.eye(2), 10, axis=0)
        model = kmeans_fit(x, 4, seed=0)
        assert np.isfinite(model.centroids).all()


class TestAssign:
    def test_matches_brute_force(self, rng):
        x = rng.normal(size=(60, 3))
        model = KMeansModel(centroids=rng.normal(size=(5, 3)).astype(np.float32))
        np.testing.assert_array_equal(kmeans_assign(model, x), brute_force_assign(x, model.centroids))

    def test_ties_go_to_lowest_index(self):
        model = KMeansModel(centroids=np.array([[1.0], [-1.0], [1.0]], dtype=np.float32))
        np.testing.assert_array_equal(kmeans_assign(model, np.array([[0.0], [1.0]])), [0, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dim 2"):
            kmeans_assign(KMeansModel(centroids=np.zeros((3, 2), np.float32)), np.zeros((4, 3)))


def test_persistence_roundtrip(rng, tmp_path):
    x = rng.normal(size=(50, 3))
    model = kmeans_fit(x, 4, seed=2)
    save_kmeans(model, tmp_path / "km")
    back = load_kmeans(tmp_path / "km")
    np.testing.assert_array_equal(back.centroids, model.centroids)
    np.testing.assert_array_equal(kmeans_assign(back, x), kmeans_assign(model, x))


def test_purity_on_synthetic_phones():
    cfg = FrontendConfig()
    corpus = generate_synthetic_corpus(CorpusSpec(n_utterances=4, seed=11))
    feats = [f.frames for f in extract_features(corpus, init_frontend_params(cfg, np.random.default_rng(0)), cfg)]
    model = kmeans_fit(feats, 3, seed=0)
    ids = np.concatenate([kmeans_assign(model, f) for f in feats])
    labels = np.concatenate([frame_phone_labels(u, cfg) for u in corpus])
    assert cluster_purity(ids, labels) > 0.8


def test_refit_layer_bounds(rng):
    with pytest.raises(ValueError):
        refit_from_model_layer(lambda u, i: rng.normal(size=(5, 2)), 3, 2, [0], k=2)
    model = refit_from_model_layer(lambda u, i: rng.normal(size=(10, 2)) + i, 1, 2, [0, 1], k=2)
    assert model.k == 2
