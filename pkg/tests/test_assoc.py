import numpy as np
import pytest
from scipy.spatial import cKDTree

from patchassoc.assoc import (
    Association,
    AssociationSet,
    EvalReport,
    PoseError,
    association_points,
    associate,
    best_matches,
    build_mean_index,
    estimate_transform_ransac,
    evaluate,
    kabsch,
    ransac_min_inliers,
    volumetric_downsample,
)
from patchassoc.geometry import view_features
from patchassoc.matching import compare_rdl, order_view
from patchassoc.rangeio import cloud_from_image
from patchassoc.segment import decompose
from patchassoc.synth import render_depth, relative_transform, workspace_scene
from patchassoc.transform import RigidTransform, axis_angle, look_at


def _patches(rng, n, spread=2.0):
    c = rng.uniform(-spread, spread, (n, 3))
    nrm = rng.normal(size=(n, 3))
    return c, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def _view(c, n, ids=None):
    return order_view(view_features(c, n, ids=ids))


@pytest.fixture(scope="module")
def overlapping_views():
    rng = np.random.default_rng(11)
    c, n = _patches(rng, 90)
    ia = np.sort(rng.choice(90, 70, replace=False))
    ib = np.sort(rng.choice(90, 70, replace=False))
    T = RigidTransform.random(rng, 3.0)
    va = _view(c[ia], n[ia], ia)
    vb = _view(T.apply(c[ib]), T.apply_vectors(n[ib]), ib)
    return va, vb


def test_index_self_query(rng):
    c, n = _patches(rng, 40)
    v = _view(c, n)
    idx = build_mean_index(v)
    assert np.array_equal(idx.query(v.raw_means, 1).ravel(), np.arange(40))
    full = idx.query(v.raw_means[:3], 40)
    assert all(sorted(row) == list(range(40)) for row in full)


def test_index_exact_knn(rng):
    c, n = _patches(rng, 60)
    v = _view(c, n)
    idx = build_mean_index(v)
    q = v.raw_means + rng.normal(size=v.raw_means.shape) * 0.05
    got = idx.query(q, 5)
    ref = cKDTree(v.means).query(q / v.scale, 5)[1]
    np.testing.assert_array_equal(got, ref)


def test_self_association_is_identity(rng):
    c, n = _patches(rng, 50)
    v = _view(c, n, np.arange(100, 150))
    A = associate(v, v, lam=0.5)
    assert len(A) == 50
    assert all(a.mu == a.mu_prime and a.d_hat == 0 for a in A)


def test_disjoint_views_saturate(rng):
    ca, na = _patches(rng, 40, spread=0.3)
    cb, nb = _patches(rng, 40, spread=0.3)
    cb = cb * 30  # no neighbor distance in b comes within r_dev of one in a
    va, vb = _view(ca, na), _view(cb, nb)
    _, best, d = best_matches(va, vb, None)
    assert np.all(d / (va.k + vb.k) == 1.0)
    assert len(associate(va, vb, C=None, lam=0.99)) == 0


def test_d_hat_bounds_and_normalization(overlapping_views):
    va, vb = overlapping_views
    A = associate(va, vb, lam=1.0)
    for a in A:
        assert 0 <= a.d_hat <= 1
        assert a.d_hat == pytest.approx(a.d_rdl / (va.k + vb.k))
    assert len({a.mu for a in A}) == len(A)
    assert A.params["k_a"] == va.k and A.params["C"] == 75


def test_gating_monotone(overlapping_views):
    va, vb = overlapping_views
    sets = [{(a.mu, a.mu_prime) for a in associate(va, vb, lam=l)} for l in (0.2, 0.4, 0.65, 0.8, 1.0)]
    for lo, hi in zip(sets, sets[1:]):
        assert lo <= hi


def test_pruned_versus_exhaustive(overlapping_views):
    va, vb = overlapping_views
    _, _, ex = best_matches(va, vb, None)
    # exhaustive reference by direct comparison
    ref = np.array([min(compare_rdl(va.features[i], vb.features[j]) for j in range(len(vb.ids)))
                    for i in range(len(va.ids))])
    np.testing.assert_array_equal(ex, ref)
    for C in (1, 5, 20):
        _, _, d = best_matches(va, vb, C)
        assert np.all(d >= ex)


def test_correct_associations_on_overlap(overlapping_views):
    va, vb = overlapping_views
    A = associate(va, vb, lam=0.65)
    assert len(A) > 20
    assert np.mean([a.mu == a.mu_prime for a in A]) > 0.95


def test_mutual_filter_subset(overlapping_views):
    va, vb = overlapping_views
    one = {(a.mu, a.mu_prime) for a in associate(va, vb)}
    both = {(a.mu, a.mu_prime) for a in associate(va, vb, mutual=True)}
    assert both <= one


def test_parameter_validation(overlapping_views):
    va, vb = overlapping_views
    with pytest.raises(ValueError):
        associate(va, vb, lam=1.5)
    with pytest.raises(ValueError):
        associate(va, vb, C=0)


def test_downsampled_queries(overlapping_views):
    va, vb = overlapping_views
    rng = np.random.default_rng(0)
    c = rng.uniform(0, 1, (200, 3))
    keep = volumetric_downsample(c, 0.25)
    keys = np.floor(c[keep] / 0.25)
    assert len(np.unique(keys, axis=0)) == len(keep) == len(np.unique(np.floor(c / 0.25), axis=0))
    A = associate(va, vb, queries=[0, 3, 5])
    assert {a.mu for a in A} <= set(va.ids[[0, 3, 5]].tolist())


def test_association_text_round_trip():
    A = AssociationSet([Association(3, 7, 12.0, 0.1), Association(4, 2, 0.0, 0.0)])
    B = AssociationSet.from_text(A.to_text())
    assert [(a.mu, a.mu_prime, a.d_rdl) for a in B] == [(3, 7, 12.0), (4, 2, 0.0)]


def test_kabsch_identity_and_random(rng):
    p = rng.normal(size=(10, 3))
    T = kabsch(p, p)
    np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-12)
    for _ in range(100):
        T = RigidTransform.random(rng, 10.0)
        p = rng.uniform(-2, 2, (20, 3))
        E = kabsch(p, T.apply(p)).inverse() @ T
        assert E.angle() <= 1e-9 and np.linalg.norm(E.translation) <= 1e-9


def test_kabsch_degenerate():
    with pytest.raises(ValueError):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(ValueError):
        kabsch(line, line)


def test_ransac_all_inliers(rng):
    T = RigidTransform.random(rng, 3.0)
    p = rng.uniform(-2, 2, (40, 3))
    r = estimate_transform_ransac(p, T.apply(p))
    assert not r.failure and r.inliers.all()
    e = evaluate(r.transform, T)
    assert e.rotation_deg < 1e-6 and e.translation < 1e-9


def test_ransac_half_outliers(rng):
    T = RigidTransform.random(rng, 3.0)
    p = rng.uniform(-2, 2, (100, 3))
    q = T.apply(p) + rng.normal(scale=0.005, size=p.shape)
    bad = rng.random(100) < 0.5
    q[bad] = rng.uniform(-4, 4, (bad.sum(), 3))
    r = estimate_transform_ransac(p, q, iterations=200, seed=3)
    e = evaluate(r.transform, T)
    spacing = np.mean(cKDTree(p).query(p, 2)[0][:, 1])
    assert not r.failure
    assert e.rotation_deg < 2 and e.translation < 2 * spacing
    assert np.array_equal(r.inliers[~bad], np.ones((~bad).sum(), bool))
    r2 = estimate_transform_ransac(p, q, iterations=200, seed=3)
    assert np.array_equal(r.inliers, r2.inliers)
    np.testing.assert_array_equal(r.transform.matrix(), r2.transform.matrix())


def test_ransac_failure_rules(rng):
    p = rng.normal(size=(2, 3))
    assert estimate_transform_ransac(p, p).failure
    q = rng.uniform(-5, 5, (60, 3))
    r = estimate_transform_ransac(rng.uniform(-5, 5, (60, 3)), q)
    assert r.failure
    assert ransac_min_inliers(10) == 6 and ransac_min_inliers(200) == 20


def test_evaluate_examples(rng):
    T = RigidTransform.random(rng, 2.0)
    e = evaluate(T, T)
    assert e.translation == pytest.approx(0, abs=1e-12) and e.rotation_deg == pytest.approx(0, abs=1e-6)
    rolled = T @ RigidTransform(axis_angle([0, 0, 1], np.deg2rad(1.0)), np.zeros(3))
    assert abs(evaluate(rolled, T).rotation_deg - 1.0) <= 1e-9


def test_rmse_aggregation(rng):
    rep = EvalReport()
    errs = [PoseError(*rng.uniform(0, 1, 2)) for _ in range(7)]
    for e in errs:
        rep.add(e, False)
    rep.add(None, True)
    t = np.array([e.translation for e in errs])
    r = np.array([e.rotation_deg for e in errs])
    assert rep.translation_rmse == pytest.approx(np.sqrt(np.mean(t ** 2)), rel=1e-12)
    assert rep.rotation_rmse == pytest.approx(np.sqrt(np.mean(r ** 2)), rel=1e-12)
    assert rep.fail_rate == pytest.approx(1 / 8)


def test_end_to_end_rigid_invariance(small_K):
    rng = np.random.default_rng(5)
    scene = workspace_scene(rng)
    pa = look_at([2.4, -1.2, 1.9], [0, 0, 0.2])
    move = RigidTransform(axis_angle([0.2, 0.1, 1.0], np.pi), [0.05, -0.03, 0.02])
    pb = pa @ move
    decs, views = [], []
    for p in (pa, pb):
        dec = decompose(cloud_from_image(render_depth(scene, small_K, p), small_K))
        decs.append(dec)
        views.append(order_view(view_features(dec.centroids, dec.normals, dec.ids)))
    A = associate(*views)
    r = estimate_transform_ransac(*association_points(A, *decs))
    assert not r.failure
    e = evaluate(r.transform, relative_transform(pa, pb))
    spacing = np.mean(cKDTree(decs[0].centroids).query(decs[0].centroids, 2)[0][:, 1])
    assert e.rotation_deg < 2.0
    assert e.translation < 2 * spacing
