import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchassoc.geometry import FeatureSet, feature_set, view_features
from patchassoc.matching import (
    EditCosts,
    MatchTolerances,
    compare_rdl,
    match_features,
    order_sequence,
    order_view,
    rdl_oracle,
)
from patchassoc.selftest import run_selftest
from patchassoc.transform import RigidTransform

EXACT = MatchTolerances(0.5, 0.5)  # on integer symbols: equality


def sym(s):
    """Feature rows encoding a symbol string in component 0."""
    q = np.zeros((len(s), 7))
    q[:, 0] = [ord(c) for c in s]
    return q


def _fs(features, neighbors=None):
    features = np.asarray(features, dtype=float)
    nb = np.arange(len(features)) if neighbors is None else np.asarray(neighbors)
    return FeatureSet(0, nb, features, features.mean(0), np.ones(7))


def test_order_distinct_first_bins():
    f = np.zeros((2, 7))
    f[:, 0] = [0.80, 0.50]
    seq = order_sequence(_fs(f))
    assert seq.features[:, 0].tolist() == [0.50, 0.80]


def test_order_falls_through_to_second_component():
    f = np.zeros((2, 7))
    f[:, 0] = [0.501, 0.509]
    f[:, 1] = [0.3, -0.3]
    seq = order_sequence(_fs(f))
    assert seq.features[:, 1].tolist() == [-0.3, 0.3]


def test_order_permutation_invariant(rng):
    c = rng.uniform(-1, 1, (40, 3))
    n = rng.normal(size=(40, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    base = feature_set(0, c, n, np.arange(1, 40))
    ref = order_sequence(base)
    for _ in range(1000):
        p = rng.permutation(len(base))
        seq = order_sequence(_fs(base.features[p], base.neighbors[p]))
        assert seq.features.tobytes() == ref.features.tobytes()
        assert seq.neighbors.tobytes() == ref.neighbors.tobytes()


def test_order_view_agrees_with_order_sequence(rng):
    c = rng.uniform(-1, 1, (25, 3))
    n = rng.normal(size=(25, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    v = view_features(c, n)
    ov = order_view(v)
    for i in range(25):
        seq = order_sequence(v.feature_set(i))
        np.testing.assert_array_equal(ov.ids[ov.neighbors[i]], seq.neighbors)


def test_order_view_ties_on_lattice():
    # a regular grid of parallel normals produces many exactly equal features
    c = np.stack(np.meshgrid(range(5), range(5), range(2)), -1).reshape(-1, 3).astype(float)
    v = view_features(c, np.tile([0.0, 0.0, 1.0], (len(c), 1)))
    ov = order_view(v)
    for i in range(len(c)):
        np.testing.assert_array_equal(ov.ids[ov.neighbors[i]], order_sequence(v.feature_set(i)).neighbors)


def test_match_examples():
    q = np.array([0, 1, 0, 1, 0, np.pi / 2, np.pi / 2])
    p = np.array([0.03, 1, 0, 1.02, 0.05, np.pi / 2 + 0.05, np.pi / 2 - 0.02])
    assert match_features(q, q)
    assert match_features(q, p, MatchTolerances(0.04, 0.1745))
    assert not match_features(q, p, MatchTolerances(0.02, 0.1745))


def test_literal_layout_vector():
    t = MatchTolerances(0.04, 0.2, layout="literal")
    np.testing.assert_allclose(t.vector(), [0.2, 0.2, 0.2, 0.04, 0.04, 0.04, 0.04])
    with pytest.raises(ValueError):
        MatchTolerances(0.04, 0.2, layout="other")
    with pytest.raises(ValueError):
        MatchTolerances(0.0, 0.2)


def test_costs_validation():
    with pytest.raises(ValueError):
        EditCosts(insert=0)
    with pytest.raises(ValueError):
        EditCosts(transpose=-1)


def test_footnote_example():
    unit = EditCosts(1, 1, 1, 1)
    assert compare_rdl(sym("ABCD"), sym("BAC"), unit, EXACT) == 2
    lev = EditCosts(1, 1, 1, np.inf)
    assert compare_rdl(sym("ABCD"), sym("BAC"), lev, EXACT) == 3


def test_default_costs_example():
    assert compare_rdl(sym("ABCD"), sym("BAC"), EditCosts(), EXACT) == 1
    assert rdl_oracle("ABCD", "BAC", EditCosts(), lambda x, y: x == y) == 1


def test_trivial_cases():
    assert compare_rdl(sym("ABCA"), sym("ABCA"), EditCosts(), EXACT) == 0
    assert compare_rdl(sym(""), sym("ABC"), EditCosts(insert=2), EXACT) == 6
    assert compare_rdl(sym("ABC"), sym(""), EditCosts(delete=3), EXACT) == 9
    assert compare_rdl(sym("A"), sym("B"), EditCosts(), EXACT) == 2


costs_st = st.builds(
    EditCosts,
    st.sampled_from([1.0, 2.0]),
    st.sampled_from([1.0, 2.0]),
    st.sampled_from([1.0, 1.5, np.inf]),
    st.sampled_from([0.0, 0.5, 1.0]),
)
word = st.text("ABCD", max_size=8)


@settings(max_examples=10_000, deadline=None)
@given(word, word, costs_st)
def test_oracle_equivalence(a, b, costs):
    assert compare_rdl(sym(a), sym(b), costs, EXACT) == rdl_oracle(a, b, costs, lambda x, y: x == y)


@settings(max_examples=500, deadline=None)
@given(st.text("ABC", max_size=20), st.text("ABC", max_size=20), costs_st)
def test_symmetry_and_bounds(a, b, costs):
    costs = EditCosts(1.0, 1.0, costs.replace, costs.transpose)
    d = compare_rdl(sym(a), sym(b), costs, EXACT)
    assert d == compare_rdl(sym(b), sym(a), costs, EXACT)
    assert 0 <= d <= len(a) + len(b)
    if a == b:
        assert d == 0
    elif d == 0:
        # only free transpositions can make different strings equivalent
        assert costs.transpose == 0 and sorted(a) == sorted(b)


@settings(max_examples=500, deadline=None)
@given(st.text("ABCD", max_size=15), st.text("ABCD", max_size=15), st.floats(0, 12))
def test_budget_exact_when_within(a, b, budget):
    full = compare_rdl(sym(a), sym(b))
    got = compare_rdl(sym(a), sym(b), budget=budget)
    if full <= budget:
        assert got == full
    else:
        assert got > budget


def test_tolerance_monotone(rng):
    for _ in range(300):
        a = rng.normal(size=(int(rng.integers(1, 15)), 7)) * 0.1
        b = a[rng.permutation(len(a))][: int(rng.integers(1, len(a) + 1))] + rng.normal(size=(1, 7)) * 0.03
        lo = MatchTolerances(0.02, 0.05)
        hi = MatchTolerances(0.04, 0.1)
        assert compare_rdl(a, b, tol=hi) <= compare_rdl(a, b, tol=lo)


def test_ordering_consistency_two_views(rng):
    """Common neighbors of corresponding patches keep their relative order."""
    n = 120
    c = rng.uniform(-2, 2, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    ia = np.sort(rng.choice(n, 100, replace=False))
    ib = np.sort(rng.choice(n, 100, replace=False))
    T = RigidTransform.random(rng, 3.0)
    va = order_view(view_features(c[ia], nrm[ia], ids=ia))
    vb = order_view(view_features(T.apply(c[ib]), T.apply_vectors(nrm[ib]), ids=ib))
    pos_b = {int(g): i for i, g in enumerate(ib)}
    aligned = total = 0
    for i, g in enumerate(ia):
        if g not in pos_b:
            continue
        j = pos_b[int(g)]
        sa = va.ids[va.neighbors[i]]
        sb = vb.ids[vb.neighbors[j]]
        common = np.intersect1d(sa, sb)
        ra = sa[np.isin(sa, common)].astype(float)
        rb = sb[np.isin(sb, common)].astype(float)
        qa = np.zeros((len(ra), 7))
        qb = np.zeros((len(rb), 7))
        qa[:, 0], qb[:, 0] = ra, rb
        d = compare_rdl(qa, qb, EditCosts(), EXACT)
        aligned += len(common) - d / 2
        total += len(common)
    assert aligned / total >= 0.9


def test_selftest_passes(capsys):
    assert run_selftest(cases=200, seed=1) == 0
    assert capsys.readouterr().out.count("PASS") == 3
