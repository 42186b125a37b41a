import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from candyman.atlas import (ArchSpec, ChartFitConfig, DegenerateDirection, build_knn_graph, check_atlas,
                            expand_clusters, fit_chart, fit_whitener, kmeans, load_atlas, save_atlas, transition)
from candyman.neuralnet import TrainConfig
from candyman.systems import gen_circle


def brute_knn_edges(X, K):
    n = len(X)
    edges = set()
    for i in range(n):
        d = [(float(((X[i] - X[j]) ** 2).sum()), j) for j in range(n) if j != i]
        for _, j in sorted(d)[:K]:
            edges.add((min(i, j), max(i, j)))
    return edges


def line_config(latent_dim=1, ambient=2, epochs=1500):
    return ChartFitConfig(latent_dim, ArchSpec([ambient, 16, 8, latent_dim]), ArchSpec([latent_dim, 8, 16, ambient]),
                          TrainConfig(epochs=epochs, lr_init=0.01))


# -- k-means ----------------------------------------------------------------


def test_kmeans_single_cluster():
    X = np.random.default_rng(0).normal(size=(30, 3))
    labels, centroids = kmeans(X, 1)
    assert np.all(labels == 0)
    assert np.allclose(centroids[0], X.mean(axis=0), atol=1e-14)


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(1)
    truth = np.repeat([0, 1], 25)
    X = np.where(truth[:, None] == 0, -10.0, 10.0) + 0.1 * rng.normal(size=(50, 2))
    labels, _ = kmeans(X, 2, seed=3)
    assert np.all(labels == truth) or np.all(labels == 1 - truth)


def test_kmeans_circle_gives_contiguous_arcs():
    labels, _ = kmeans(gen_circle().points, 3, seed=0)
    runs = np.count_nonzero(labels != np.roll(labels, 1))
    assert sorted(set(labels.tolist())) == [0, 1, 2]
    assert runs == 3


def test_kmeans_inertia_non_increasing():
    X = np.random.default_rng(2).normal(size=(200, 2))
    history = []
    kmeans(X, 5, seed=0, history=history)
    assert len(history) > 1
    # history restarts for every initialisation; each run must be monotone on its own
    runs, cur = [], [history[0]]
    for v in history[1:]:
        if v > cur[-1] + 1e-9:
            runs.append(cur)
            cur = [v]
        else:
            cur.append(v)
    runs.append(cur)
    assert all(np.all(np.diff(r) <= 1e-12) for r in runs)


def test_kmeans_deterministic():
    X = np.random.default_rng(3).normal(size=(100, 3))
    a, b = kmeans(X, 4, seed=9), kmeans(X, 4, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# -- kNN graph -----------------------------------------------------------------


def test_knn_collinear_symmetrised():
    g = build_knn_graph(np.array([[0.0], [1.0], [2.0]]), 1)
    assert g.adjacency[1].tolist() == [0, 2]


def test_knn_circle_is_cycle():
    g = build_knn_graph(gen_circle().points, 2)
    n = 40
    assert g.edges() == {(min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)}


def test_knn_matches_brute_force():
    X = np.random.default_rng(4).normal(size=(50, 3))
    for K in (1, 3, 5):
        assert build_knn_graph(X, K).edges() == brute_knn_edges(X, K)


def test_knn_no_self_loops_with_duplicates():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    g = build_knn_graph(X, 1)
    assert all(i not in nb for i, nb in enumerate(g.adjacency))
    assert 1 in g.adjacency[0]


# -- expansion --------------------------------------------------------------


def cycle_graph(n):
    from candyman.atlas import KnnGraph
    return KnnGraph([np.array(sorted({(i - 1) % n, (i + 1) % n})) for i in range(n)], 1)


def test_expand_zero_rounds():
    doms = expand_clusters(np.array([0, 0, 0, 1, 1, 1]), cycle_graph(6), 0)
    assert all(b.size == 0 for _, b in doms)


def test_expand_cycle_of_six():
    doms = expand_clusters(np.array([0, 0, 0, 1, 1, 1]), cycle_graph(6), 1)
    assert doms[0][1].tolist() == [3, 5]
    assert doms[1][1].tolist() == [0, 2]


def test_expand_circle_two_rounds():
    X = gen_circle().points
    labels, _ = kmeans(X, 3, seed=0)
    doms = expand_clusters(labels, build_knn_graph(X, 2), 2)
    for interior, border in doms:
        assert border.size == 4
        assert np.intersect1d(interior, border).size == 0


@given(st.integers(0, 4), st.integers(2, 5), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_expansion_invariants(rounds, k, seed):
    X = np.random.default_rng(seed).normal(size=(60, 2))
    labels, _ = kmeans(X, k, seed=seed, n_init=1)
    g = build_knn_graph(X, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        doms = expand_clusters(labels, g, rounds, k)
        bigger = expand_clusters(labels, g, rounds + 1, k)
    interiors = np.concatenate([i for i, _ in doms])
    assert sorted(interiors.tolist()) == list(range(60))
    for (i, b), (_, b2) in zip(doms, bigger):
        assert np.intersect1d(i, b).size == 0
        assert set(b.tolist()) <= set(b2.tolist())


def test_swallowed_cluster_warns():
    labels = np.array([0, 0, 0, 0, 1])
    with pytest.warns(UserWarning):
        expand_clusters(labels, cycle_graph(5), 1)


# -- whitening --------------------------------------------------------------


def test_whitener_on_white_data():
    # centred, orthogonalised columns: sample covariance exactly diag(1, 0.98)
    Z = np.random.default_rng(5).normal(size=(500, 2))
    q, _ = np.linalg.qr(Z - Z.mean(axis=0))
    Z = q * np.sqrt(500) * np.sqrt([1.0, 0.98])
    w = fit_whitener(Z)
    assert np.allclose(np.abs(w.rotation), np.eye(2), atol=1e-8)
    assert np.allclose(w.scales, [1.0, np.sqrt(0.98)], rtol=1e-10)


def test_whitener_decorrelates():
    rng = np.random.default_rng(6)
    A = np.array([[3.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.2, -0.4, 0.1]])
    Z = rng.normal(size=(1000, 3)) @ A.T + [1, 2, 3]
    W = fit_whitener(Z).apply(Z)
    assert np.abs(np.cov(W.T, bias=True) - np.eye(3)).max() < 0.1


def test_whitener_degenerate():
    t = np.linspace(0, 1, 20)
    with pytest.raises(DegenerateDirection):
        fit_whitener(np.c_[t, 2 * t])


def test_whitener_round_trip():
    rng = np.random.default_rng(7)
    w = fit_whitener(rng.normal(size=(50, 3)) * [1, 4, 0.2])
    assert np.allclose(w.rotation.T @ w.rotation, np.eye(3), atol=1e-10)
    v = rng.normal(size=(30, 3))
    assert np.allclose(w.invert(w.apply(v)), v, atol=1e-10)


# -- charts -----------------------------------------------------------------


def test_chart_on_line_segment():
    t = np.linspace(-1, 1, 30)
    X = np.c_[t, 0.5 * t + 0.2]
    chart = fit_chart(X, 0, np.arange(30), [], line_config(), seed=0)
    assert float(((chart.reconstruct(X) - X) ** 2).mean()) < 1e-4


def test_chart_without_bottleneck():
    X = np.random.default_rng(8).uniform(-1, 1, size=(30, 2))
    chart = fit_chart(X, 0, np.arange(30), [], line_config(latent_dim=2, epochs=3000), seed=0)
    assert float(((chart.reconstruct(X) - X) ** 2).mean()) < 1e-3


def test_chart_rejects_overlapping_sets():
    with pytest.raises(ValueError):
        fit_chart(np.zeros((5, 2)), 0, [0, 1], [1, 2], line_config(epochs=0))


# -- trained circle atlas -----------------------------------------------------


def test_circle_atlas_partition_and_coverage(circle_model):
    check_atlas(circle_model.atlas)


def test_self_transition_bounded_by_reconstruction(circle_model):
    atlas = circle_model.atlas
    for c, chart in enumerate(atlas.charts):
        X = atlas.points[chart.members]
        z = chart.encode(X)
        err = np.linalg.norm(chart.reconstruct(X) - X, axis=1).max()
        zz = transition(atlas, c, c, z)
        assert np.linalg.norm(chart.decode(zz) - chart.decode(z), axis=1).max() <= 2 * err + 1e-12


def test_overlap_round_trip_and_triangle_inequality(circle_model):
    atlas = circle_model.atlas
    scale = np.sqrt(atlas.reconstruction_errors().max())
    for a in range(len(atlas)):
        for b in range(len(atlas)):
            if a == b:
                continue
            both = np.intersect1d(atlas.charts[a].members, atlas.charts[b].members)
            if both.size == 0:
                continue
            P = atlas.points[both]
            ra, rb = atlas.charts[a].reconstruct(P), atlas.charts[b].reconstruct(P)
            lhs = np.linalg.norm(ra - rb, axis=1)
            rhs = np.linalg.norm(ra - P, axis=1) + np.linalg.norm(rb - P, axis=1)
            assert np.all(lhs <= rhs + 1e-12)
            za = atlas.charts[a].encode(P)
            back = transition(atlas, b, a, transition(atlas, a, b, za))
            assert np.linalg.norm(atlas.charts[a].decode(back) - atlas.charts[a].decode(za), axis=1).max() <= 4 * scale


def test_atlas_save_load_round_trip(circle_model, tmp_path):
    atlas = circle_model.atlas
    save_atlas(atlas, tmp_path / "atlas")
    back = load_atlas(tmp_path / "atlas")
    assert len(back) == len(atlas)
    X = atlas.points
    for c1, c2 in zip(atlas.charts, back.charts):
        assert np.array_equal(c1.interior, c2.interior) and np.array_equal(c1.border, c2.border)
        assert np.array_equal(c1.encode(X), c2.encode(X))
