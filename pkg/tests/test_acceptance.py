"""Acceptance criteria, one PASS/FAIL line each.

Run under pytest (``pytest tests/test_acceptance.py -v -s``) or directly
(``python3 tests/test_acceptance.py``).  Criteria 5-8 share one set of
rendered and processed scene pairs, computed on first use.
"""

from __future__ import annotations

import resource
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from patchassoc.assoc import (
    associate,
    association_points,
    association_precision,
    best_matches,
    build_mean_index,
    estimate_transform_ransac,
    evaluate,
)
from patchassoc.cli import load_config, run_pair
from patchassoc.geometry import view_features
from patchassoc.matching import EditCosts, MatchTolerances, compare_rdl, order_view, rdl_oracle
from patchassoc.rangeio import CameraIntrinsics, cloud_from_image
from patchassoc.segment import decompose
from patchassoc.synth import NoiseModel, random_view_pair, relative_transform, render_depth, workspace_scene
from patchassoc.transform import RigidTransform

SEEDS = range(10)
LAMBDAS = (0.2, 0.4, 0.65, 0.8)
NOISE_SIGMA = 0.005
# depth smoothing and a wider normal window for the noisy sensor
NOISY_NORMALS = {"radius_px": 4, "smooth_px": 6}

RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {title}: {detail}", flush=True)


# shared scene pairs ----------------------------------------------------------

class Pair:
    def __init__(self, seed: int, sigma: float = 0.0):
        K = CameraIntrinsics()
        rng = np.random.default_rng(seed)
        scene = workspace_scene(rng)
        pa, pb, self.overlap = random_view_pair(scene, K, rng)
        self.truth = relative_transform(pa, pb)
        self.roll = float(np.degrees(self.truth.angle()))
        self.baseline = float(np.linalg.norm(pa.translation - pb.translation))
        nkw = NOISY_NORMALS if sigma else {}
        self.decs, self.views = [], []
        for i, pose in enumerate((pa, pb)):
            img = render_depth(scene, K, pose, NoiseModel(sigma) if sigma else None, seed=1000 * seed + i)
            dec = decompose(cloud_from_image(img, K, **nkw))
            self.decs.append(dec)
            self.views.append(order_view(view_features(dec.centroids, dec.normals, dec.ids)))
        self.assoc = associate(*self.views)
        self.ransac = estimate_transform_ransac(*association_points(self.assoc, *self.decs))
        self.error = evaluate(self.ransac.transform, self.truth) if self.ransac.transform else None
        self.precision = association_precision(self.assoc, *self.decs)


@lru_cache(maxsize=None)
def clean_pair(seed: int) -> Pair:
    return Pair(seed)


@lru_cache(maxsize=None)
def noisy_pair(seed: int) -> Pair:
    return Pair(seed, NOISE_SIGMA)


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _symbols(s) -> np.ndarray:
    q = np.zeros((len(s), 7))
    q[:, 0] = s
    return q


# criteria -------------------------------------------------------------------

def criterion_1():
    rng = np.random.default_rng(101)
    worst_d = worst_a = 0.0
    reordered = checked = 0
    for _ in range(100):
        n = int(rng.integers(50, 801))
        c = rng.uniform(-3, 3, (n, 3))
        nrm = _unit(rng, n)
        ref = order_view(view_features(c, nrm))
        for _ in range(20):
            T = RigidTransform.random(rng, 10.0)
            v = order_view(view_features(T.apply(c), T.apply_vectors(nrm)))
            diff = np.abs(v.features - ref.features)
            worst_d = max(worst_d, float(diff[..., :4].max()))
            worst_a = max(worst_a, float(diff[..., 4:].max()))
            reordered += not np.array_equal(v.neighbors, ref.neighbors)
            checked += 1
    ok = worst_d <= 1e-6 and worst_a <= 1e-6 and reordered == 0
    return ok, (f"{checked} transformed decompositions, max distance change {worst_d:.1e} m, "
                f"max angle change {worst_a:.1e} rad, {reordered} reordered sequences")


def criterion_2():
    rng = np.random.default_rng(202)
    tol = MatchTolerances(0.5, 0.5)
    bad = 0
    for _ in range(10_000):
        alpha = int(rng.integers(1, 7))
        a = rng.integers(0, alpha, int(rng.integers(0, 9)))
        b = rng.integers(0, alpha, int(rng.integers(0, 9)))
        costs = EditCosts(float(rng.choice([1.0, 2.0])), float(rng.choice([1.0, 2.0])),
                          float(rng.choice([1.0, np.inf])), float(rng.choice([0.0, 1.0])))
        want = rdl_oracle(tuple(a), tuple(b), costs, lambda x, y: x == y)
        bad += compare_rdl(_symbols(a), _symbols(b), costs, tol) != want
    word = lambda s: _symbols([ord(ch) for ch in s])
    lev = compare_rdl(word("ABCD"), word("BAC"), EditCosts(1, 1, 1, np.inf), tol)
    rdl = compare_rdl(word("ABCD"), word("BAC"), EditCosts(1, 1, 1, 1), tol)
    ok = bad == 0 and lev == 3 and rdl == 2
    return ok, f"{bad} mismatches in 10000 pairs; ABCD/BAC Levenshtein {lev:g}, restricted-DL {rdl:g}"


def criterion_3():
    rng = np.random.default_rng(303)
    asym = out = 0
    dmin, dmax = 1.0, 0.0
    for _ in range(1000):
        c = rng.uniform(-1, 1, (int(rng.integers(5, 40)), 3))
        v = order_view(view_features(c, _unit(rng, len(c))))
        i, j = rng.integers(0, len(c), 2)
        a = v.features[i]
        # second sequence: a perturbed, partly dropped copy or an unrelated one
        if rng.random() < 0.5:
            keep = rng.random(len(a)) < 0.8
            b = a[keep] + rng.normal(scale=0.02, size=(keep.sum(), 7))
        else:
            b = v.features[j]
        d_ab, d_ba = compare_rdl(a, b), compare_rdl(b, a)
        asym += d_ab != d_ba
        out += not (0 <= d_ab <= len(a) + len(b))
        if len(a) + len(b):
            dh = d_ab / (len(a) + len(b))
            dmin, dmax = min(dmin, dh), max(dmax, dh)
    # d_hat of every association emitted on the scene pairs
    for s in SEEDS:
        for p in clean_pair(s).assoc:
            dmin, dmax = min(dmin, p.d_hat), max(dmax, p.d_hat)
    ok = asym == 0 and out == 0 and 0 <= dmin and dmax <= 1
    return ok, f"{asym} asymmetric, {out} out of bounds in 1000 pairs; d_hat range [{dmin:.3f}, {dmax:.3f}]"


def criterion_4():
    K = CameraIntrinsics()
    rng = np.random.default_rng(404)
    scene = workspace_scene(rng)
    pa, _, _ = random_view_pair(scene, K, rng)
    dec = decompose(cloud_from_image(render_depth(scene, K, pa), K))
    v = order_view(view_features(dec.centroids, dec.normals, dec.ids))
    A = associate(v, v)
    exact = sum(p.mu == p.mu_prime and p.d_hat == 0 for p in A)
    r = estimate_transform_ransac(*association_points(A, dec, dec))
    e = evaluate(r.transform, RigidTransform.identity())
    ok = exact == len(dec) and e.rotation_deg <= np.degrees(1e-9) and e.translation <= 1e-9
    return ok, (f"{exact}/{len(dec)} patches self-associated at d_hat 0; "
                f"transform error {e.translation:.1e} m, {np.radians(e.rotation_deg):.1e} rad")


def _recovery_summary(pairs, min_prec, max_deg, max_m):
    fails = sum(p.ransac.failure for p in pairs)
    prec = [p.precision for p in pairs]
    errs = [p.error for p in pairs if not p.ransac.failure]
    bad_pose = sum(e.rotation_deg > max_deg or e.translation > max_m for e in errs)
    low = sum(not (x >= min_prec) for x in prec)
    worst_r = max((e.rotation_deg for e in errs), default=float("nan"))
    worst_t = max((e.translation for e in errs), default=float("nan"))
    text = (f"precision min {np.nanmin(prec):.3f} (pairs below {min_prec}: {low}), "
            f"worst error {worst_r:.2f} deg / {worst_t:.3f} m, failures {fails}/{len(pairs)}")
    return fails, low, bad_pose, text


def criterion_5():
    pairs = [clean_pair(s) for s in SEEDS]
    setup_ok = all(0.6 <= p.overlap <= 0.8 and p.baseline >= 1.0 for p in pairs)
    fails, low, bad_pose, text = _recovery_summary(pairs, 0.85, 2.0, 0.10)
    rolls = ", ".join(f"{p.roll:.0f}" for p in pairs)
    ok = setup_ok and fails == 0 and low == 0 and bad_pose == 0
    return ok, f"{text}; relative rotations [{rolls}] deg"


def criterion_6():
    pairs = [noisy_pair(s) for s in SEEDS]
    fails, low, bad_pose, text = _recovery_summary(pairs, 0.70, 5.0, 0.15)
    # a pose outside tolerance counts toward the failure allowance
    ok = fails + bad_pose <= 2 and low == 0
    return ok, f"{text}, out of tolerance {bad_pose}"


def _first_hit_rank(pair: Pair, exhaustive: np.ndarray) -> np.ndarray:
    """Position in the mean-space candidate list of the first candidate
    reaching the exhaustive minimum distance."""
    va, vb = pair.views
    nb = len(vb.ids)
    order = build_mean_index(vb, va).query(va.raw_means, nb)
    ranks = np.empty(len(va.ids), dtype=int)
    for q in range(len(va.ids)):
        for pos, c in enumerate(order[q]):
            if compare_rdl(va.features[q], vb.features[c], budget=exhaustive[q]) <= exhaustive[q]:
                ranks[q] = pos
                break
    return ranks


def criterion_7():
    Cs = (25, 50, 75, 100)
    recalls = []
    consistent = True
    for s in SEEDS:
        p = clean_pair(s)
        va, vb = p.views
        _, _, ex = best_matches(va, vb, None)
        ranks = _first_hit_rank(p, ex)
        r = [float(np.mean(ranks < C)) for C in Cs] + [float(np.mean(ranks < len(vb.ids)))]
        _, _, d75 = best_matches(va, vb, 75)
        consistent &= bool(np.array_equal(d75 == ex, ranks < 75))
        recalls.append(r)
    R = np.array(recalls)
    mono = bool(np.all(np.diff(R, axis=1) >= 0))
    full = bool(np.all(R[:, -1] == 1.0))
    gain = R[:, 2] - R[:, 0]
    mean = R.mean(axis=0)
    ok = mono and full and consistent and bool(np.all(gain >= 0.10))
    return ok, (f"mean recall C=25/50/75/100/|S'|: {' / '.join(f'{x:.3f}' for x in mean)}; "
                f"C75-C25 gain min {gain.min():.3f}; pruned search agrees with ranks: {consistent}")


def criterion_8():
    violations = 0
    sizes = []
    for s in SEEDS:
        p = clean_pair(s)
        sets = [{(a.mu, a.mu_prime) for a in associate(*p.views, lam=l)} for l in LAMBDAS]
        violations += sum(not lo <= hi for lo, hi in zip(sets, sets[1:]))
        sizes.append([len(x) for x in sets])
    mean = np.mean(sizes, axis=0)
    return violations == 0, (f"{violations} nesting violations over {len(SEEDS)} pairs; mean set sizes "
                             + " / ".join(f"{l}:{m:.0f}" for l, m in zip(LAMBDAS, mean)))


def criterion_9():
    rng = np.random.default_rng(909)
    disagree = within = 0
    for _ in range(1000):
        c = rng.uniform(-1, 1, (int(rng.integers(5, 60)), 3))
        v = order_view(view_features(c, _unit(rng, len(c))))
        a = v.features[0]
        b = a[rng.random(len(a)) < 0.7] + rng.normal(scale=0.03, size=(1, 7))
        full = compare_rdl(a, b)
        budget = float(rng.uniform(0, len(a) + len(b)))
        got = compare_rdl(a, b, budget=budget)
        if full <= budget:
            within += 1
            disagree += got != full
        else:
            disagree += not got > budget
    return disagree == 0, f"{disagree} disagreements in 1000 pairs ({within} within budget)"


def criterion_10():
    import numba

    cfg = load_config(None, {"input.scene_seed": 0, "segment.target_area": 0.0125, "threads": 8})
    run_pair(load_config(None, {"intrinsics.width": 64, "intrinsics.height": 48, "intrinsics.cx": 31.5,
                                "intrinsics.cy": 23.5, "segment.min_points": 5}))  # JIT warm-up
    t0 = time.perf_counter()
    res = run_pair(cfg)
    elapsed = time.perf_counter() - t0
    n = (res.report["views"]["a"]["patches"], res.report["views"]["b"]["patches"])

    # a full table for two 20000-long sequences would need ~3.2 GB
    rng = np.random.default_rng(1010)
    a = rng.normal(size=(20_000, 7))
    b = rng.normal(size=(20_000, 7))
    before = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    compare_rdl(a, b)
    grown_mb = (resource.getrusage(resource.RUSAGE_SELF).ru_maxrss - before) / 1024

    threads = numba.config.NUMBA_NUM_THREADS
    ok = elapsed <= 60 and grown_mb < 100 and min(n) >= 600
    return ok, (f"pair with {n[0]}/{n[1]} patches took {elapsed:.1f} s on {threads} hardware thread(s) "
                f"(limit 60 s on 8); 20000x20000 comparison grew peak memory by {grown_mb:.1f} MB")


CRITERIA = {
    1: ("invariance suite", criterion_1),
    2: ("RDL oracle equivalence", criterion_2),
    3: ("symmetry and bounds", criterion_3),
    4: ("self-association identity", criterion_4),
    5: ("wide-baseline synthetic recovery", criterion_5),
    6: ("noise robustness", criterion_6),
    7: ("pruning trend", criterion_7),
    8: ("gating monotonicity", criterion_8),
    9: ("early-termination soundness", criterion_9),
    10: ("performance envelope", criterion_10),
}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    title, fn = CRITERIA[n]
    ok, detail = fn()
    with capsys.disabled():
        print()
        report(n, title, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    t0 = time.time()
    for n, (title, fn) in CRITERIA.items():
        report(n, title, *fn())
    print(f"{sum(ok for ok, _ in RESULTS.values())}/{len(RESULTS)} criteria passed "
          f"in {time.time() - t0:.0f} s")
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
