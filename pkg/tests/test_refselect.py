import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbstat.corevol import Volume
from bbstat.refselect import (
    ExemplarSelector, SimilarityMatrix, affinity_propagation, select_queries,
    similarity_matrix,
)
from oracles import ap_messages, best_two_medoids


def test_identical_images_zero_similarity():
    v = Volume(np.ones((3, 3, 1, 2)))
    s = similarity_matrix([v, v]).s
    assert s[0, 1] == 0 and s[1, 0] == 0


def test_single_voxel_similarity():
    s = similarity_matrix([np.array([1.0]), np.array([3.0])]).s
    assert s[0, 1] == -4


def test_similarity_brute_force():
    rng = np.random.default_rng(0)
    imgs = [rng.normal(size=(4, 3, 1, 2)) for _ in range(3)]
    s = similarity_matrix(imgs, preference=-1.0).s
    for i in range(3):
        for j in range(3):
            if i == j:
                assert s[i, j] == -1.0
            else:
                want = -sum(float((imgs[i][idx] - imgs[j][idx]) ** 2)
                            for idx in np.ndindex(imgs[i].shape))
                assert s[i, j] == pytest.approx(want, rel=1e-12)


def test_single_item():
    res = affinity_propagation(SimilarityMatrix(np.zeros((1, 1)), 0.0))
    assert res.exemplar_indices == [0]


def test_two_clouds():
    rng = np.random.default_rng(1)
    pts = np.vstack([rng.normal(0, 0.1, (10, 2)), rng.normal(10, 0.1, (10, 2))])
    res = affinity_propagation(similarity_matrix(list(pts)))
    assert len(res.exemplar_indices) == 2
    ex = sorted(res.exemplar_indices)
    assert ex[0] < 10 <= ex[1]
    assert np.all(res.assignment[:10] == ex[0]) and np.all(res.assignment[10:] == ex[1])
    # same partition as the exhaustive 2-medoid solution, at near-optimal cost
    def cost(medoids):
        return sum(min(float(((p - pts[m]) ** 2).sum()) for m in medoids) for p in pts)

    best = best_two_medoids(pts.tolist())
    brute = np.argmin([((pts - pts[m]) ** 2).sum(1) for m in best], axis=0)
    ours = np.array([0 if a == ex[0] else 1 for a in res.assignment])
    assert np.array_equal(brute, ours) or np.array_equal(brute, 1 - ours)
    assert cost(ex) <= 1.01 * cost(best)


def test_high_preference_every_item_is_exemplar():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(4, 3))
    sim = similarity_matrix(list(pts))
    high = sim.with_preference(float(sim.s[~np.eye(4, dtype=bool)].max()) + 100.0)
    res = affinity_propagation(high, damping=0.5, max_iter=200)
    assert res.exemplar_indices == [0, 1, 2, 3]
    assert ap_messages(high.s.tolist(), 0.5, 200) == [0, 1, 2, 3]


def test_small_group_returns_all_members():
    rng = np.random.default_rng(3)
    imgs = [Volume(rng.normal(size=(4, 4, 1, 1))) for _ in range(5)]
    q1, q2 = select_queries([1, 1, 1, 2, 2], imgs)
    assert q1 == [0, 1, 2] and q2 == [3, 4]


def test_identical_group_single_exemplar():
    v = Volume(np.ones((4, 4, 1, 1)))
    rng = np.random.default_rng(4)
    others = [Volume(rng.normal(size=(4, 4, 1, 1))) for _ in range(2)]
    q1, _ = select_queries([1] * 10 + [2, 2], [v] * 10 + others)
    assert len(q1) == 1


def test_template_families():
    rng = np.random.default_rng(5)
    templates = rng.normal(0, 10, size=(6, 8, 8, 1, 1))
    imgs, fam = [], []
    for i in range(50):
        k = i % 6
        imgs.append(Volume(templates[k] + rng.normal(0, 0.2, templates[k].shape)))
        fam.append(k)
    q1, _ = select_queries([1] * 50 + [2, 2], imgs + imgs[:2])
    assert len(q1) == 6
    assert sorted(fam[i] for i in q1) == list(range(6))


def test_explicit_queries_override():
    rng = np.random.default_rng(6)
    imgs = [Volume(rng.normal(size=(3, 3, 1, 1))) for _ in range(12)]
    q1, q2 = select_queries([1] * 10 + [2, 2], imgs, explicit={1: [2, 5]})
    assert q1 == [2, 5] and q2 == [10, 11]


def test_estimator_interface():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(0, 0.1, (6, 3)), rng.normal(5, 0.1, (6, 3))])
    est = ExemplarSelector().fit(X)
    assert len(est.exemplar_indices_) == 2
    assert len(set(est.labels_[:6])) == 1 and len(set(est.labels_[6:])) == 1
    np.testing.assert_array_equal(est.predict(X), est.labels_)
    assert est.get_params()["damping"] == 0.9


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_every_item_assigned_to_an_exemplar(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 2))
    res = affinity_propagation(similarity_matrix(list(pts)))
    assert set(res.assignment.tolist()) <= set(res.exemplar_indices)
    for e in res.exemplar_indices:
        assert res.assignment[e] == e
