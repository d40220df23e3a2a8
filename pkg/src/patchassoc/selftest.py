"""Quick oracle checks runnable from an installed package."""

from __future__ import annotations

import numpy as np

from .assoc import kabsch
from .geometry import view_features
from .matching import EditCosts, MatchTolerances, compare_rdl, order_view, rdl_oracle
from .transform import RigidTransform


def check_rdl_oracle(cases: int, rng) -> tuple[bool, str]:
    tol = MatchTolerances(0.5, 0.5)
    bad = 0
    for _ in range(cases):
        a = rng.integers(0, 5, (rng.integers(0, 8), 7)).astype(float)
        b = rng.integers(0, 5, (rng.integers(0, 8), 7)).astype(float)
        a[:, 1:] = b[:, 1:] = 0.0
        costs = EditCosts(1.0, 1.0, float(rng.choice([1.0, np.inf])), float(rng.choice([0.0, 1.0])))
        got = compare_rdl(a, b, costs, tol)
        want = rdl_oracle([tuple(r) for r in a], [tuple(r) for r in b], costs, lambda x, y: x[0] == y[0])
        bad += got != want
    return bad == 0, f"{bad} mismatches in {cases} pairs"


def check_invariance(cases: int, rng) -> tuple[bool, str]:
    worst = 0.0
    reordered = 0
    for _ in range(cases):
        n = int(rng.integers(10, 60))
        c = rng.uniform(-3, 3, (n, 3))
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        T = RigidTransform.random(rng, 5.0)
        v0 = view_features(c, nrm)
        v1 = view_features(T.apply(c), T.apply_vectors(nrm))
        worst = max(worst, float(np.abs(v0.features - v1.features).max()))
        reordered += not np.array_equal(order_view(v0).neighbors, order_view(v1).neighbors)
    ok = worst <= 1e-6 and reordered == 0
    return ok, f"max component change {worst:.2e}, {reordered} reordered sequences"


def check_kabsch(cases: int, rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(cases):
        T = RigidTransform.random(rng, 10.0)
        p = rng.uniform(-2, 2, (int(rng.integers(3, 50)), 3))
        E = kabsch(p, T.apply(p)).inverse() @ T
        worst = max(worst, E.angle(), float(np.linalg.norm(E.translation)))
    return worst <= 1e-9, f"worst residual {worst:.2e}"


def run_selftest(cases: int = 300, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    checks = [
        ("rdl_vs_oracle", check_rdl_oracle(cases, rng)),
        ("feature_invariance", check_invariance(max(1, cases // 30), rng)),
        ("kabsch_recovery", check_kabsch(cases, rng)),
    ]
    for name, (ok, detail) in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, (ok, _) in checks) else 1
