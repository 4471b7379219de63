import itertools

import numpy as np
import pytest

from cri import degrade
from cri.cluster import (
    CentroidSet,
    ClusterConfig,
    build_centroids,
    centroid_distances,
    kmeans,
    sample_latents,
    select_centroid,
)
from cri.perception import feature_distance

PLANAR = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])


def brute_force_two_means(x):
    best = (np.inf, None)
    for labels in itertools.product((0, 1), repeat=len(x)):
        labels = np.array(labels)
        if labels.min() == labels.max():
            continue
        cents = np.stack([x[labels == j].mean(0) for j in (0, 1)])
        sse = sum(np.sum((x[labels == j] - cents[j]) ** 2) for j in (0, 1))
        if sse < best[0]:
            best = (sse, cents)
    return best


def sort_rows(a):
    return a[np.lexsort(a.T[::-1])]


def test_planar_fixture_recovers_optimal_centers():
    sse, cents = brute_force_two_means(PLANAR)
    assert np.allclose(sort_rows(cents), [[0, 0.5], [10, 0.5]])
    for seed in range(5):
        cs = kmeans(PLANAR, ClusterConfig(M=4, N=2, seed=seed))
        np.testing.assert_allclose(sort_rows(cs.centers), sort_rows(cents), atol=1e-6)
        assert cs.inertia == pytest.approx(sse, abs=1e-9)


def test_single_cluster_is_sample_mean(rng):
    x = rng.standard_normal((500, 7)) * 3 + 1
    cs = kmeans(x, ClusterConfig(M=500, N=1))
    np.testing.assert_allclose(cs.centers[0], x.mean(0), atol=1e-9)


def test_n_equals_m_gives_zero_inertia(rng):
    x = rng.standard_normal((12, 3))
    cs = kmeans(x, ClusterConfig(M=12, N=12))
    assert cs.inertia == 0.0
    assert sorted(cs.cluster_sizes) == [1] * 12
    np.testing.assert_allclose(sort_rows(cs.centers), sort_rows(x))


def test_m_less_than_n_raises(rng):
    with pytest.raises(ValueError):
        kmeans(rng.standard_normal((3, 2)), ClusterConfig(M=3, N=4))
    with pytest.raises(ValueError):
        ClusterConfig(M=3, N=4).validate()


def test_inertia_non_increasing_and_sizes(gen):
    x = sample_latents(gen, 0, 3000, 0)
    cs = kmeans(x, ClusterConfig(M=3000, N=10))
    hist = np.array(cs.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * hist[0])
    assert cs.inertia <= cs.seeding_inertia
    assert cs.cluster_sizes.sum() == 3000
    assert np.all(np.isfinite(cs.centers))


def test_deterministic(gen):
    x = sample_latents(gen, 1, 1000, 4)
    a, b = kmeans(x, ClusterConfig(M=1000, N=5, seed=3)), kmeans(x, ClusterConfig(M=1000, N=5, seed=3))
    assert np.array_equal(a.centers, b.centers)


def test_sample_latents_contract(gen):
    assert sample_latents(gen, 0, 0, 0).shape == (0, gen.layout.d_w)
    assert np.array_equal(sample_latents(gen, 2, 50, 9), sample_latents(gen, 2, 50, 9))


def test_mode_recovery_five_seeds():
    from cri.generator import ToyGenerator

    for seed in range(5):
        g = ToyGenerator(seed=seed)
        for c in range(g.layout.classes):
            cs = kmeans(sample_latents(g, c, 10000, seed), ClusterConfig(N=g.layout.modes, seed=seed))
            truth = g.true_mode_means(c)
            d = np.linalg.norm(truth[:, None] - truth[None], axis=-1)
            dmin = d[~np.eye(len(truth), dtype=bool)].min()
            err = np.linalg.norm(cs.centers[:, None] - truth[None], axis=-1).min(axis=0)
            assert err.max() < 0.05 * dmin, (seed, c)


@pytest.fixture(scope="module")
def centroids(gen):
    return build_centroids(gen, 1, ClusterConfig(M=2000, N=6, seed=2))


def test_select_exact_center_image(centroids, fx):
    k, center, dists = select_centroid(centroids.center_images[2], centroids, fx)
    assert k == 2 and dists[2] == 0.0
    np.testing.assert_array_equal(center, centroids.centers[2])


def test_select_matches_exhaustive_table(centroids, fx, gen, rng):
    for i in range(10):
        img = gen.synthesize(gen.mapping(gen.sample_z(1, 300 + i), 1)[0])
        k, _, dists = select_centroid(img, centroids, fx)
        feats = fx.features(img)
        table = [feature_distance(feats, fx.features(ci)) for ci in centroids.center_images]
        assert k == int(np.argmin(table))
        np.testing.assert_allclose(dists, table, rtol=1e-12)


def test_tie_goes_to_lowest_index(centroids, fx):
    cs = centroids.permuted([3, 0, 3, 1, 2, 4, 5])
    k, _, _ = select_centroid(centroids.center_images[3], cs, fx)
    assert k == 0


def test_selection_permutation_invariant(centroids, fx, gen):
    img = gen.synthesize(gen.mapping(gen.sample_z(1, 77), 1)[0])
    k, _, _ = select_centroid(img, centroids, fx)
    order = np.array([5, 2, 4, 0, 1, 3])
    k2, _, _ = select_centroid(img, centroids.permuted(order), fx)
    assert order[k2] == k


def test_select_returns_replicated_latent(centroids, fx, gen):
    k, w, _ = select_centroid(centroids.center_images[0], centroids, fx, generator=gen)
    assert w.shape == (gen.layout.layers, gen.layout.d_w)


def test_degraded_input_and_degrade_centers(centroids, fx):
    spec = degrade.spec_for_task("sr", 32, scale=4)
    low = degrade.apply(spec, centroids.center_images[4])
    d_raw = centroid_distances(low, centroids, fx, spec)
    d_deg = centroid_distances(low, centroids, fx, spec, degrade_centers=True)
    assert d_deg[4] == 0.0 and int(np.argmin(d_raw)) == 4
    assert not np.allclose(d_raw, d_deg)


def test_empty_set_raises(fx):
    cs = CentroidSet(np.empty((0, 32)), 0.0, np.empty(0, dtype=int))
    with pytest.raises(ValueError):
        select_centroid(np.zeros((32, 32, 3)), cs, fx)


def test_save_load_roundtrip(centroids, gen, tmp_path):
    path = centroids.save(tmp_path)
    assert path.name == "centroids_g0_c1_M2000_N6_s2.json"
    cs = CentroidSet.load(path, gen)
    assert np.array_equal(cs.centers, centroids.centers)
    assert cs.key == centroids.key and cs.inertia == centroids.inertia
    for a, b in zip(cs.center_images, centroids.center_images):
        assert np.array_equal(a, b)
