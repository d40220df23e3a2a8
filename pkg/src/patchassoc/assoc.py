"""Cross-view patch association, rigid transform estimation and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .geometry import ViewFeatures, mean_scale
from .matching import EditCosts, MatchTolerances, rdl_kernel
from .transform import RigidTransform, rotation_angle

DEFAULT_C = 75
DEFAULT_LAMBDA = 0.65
LAMBDA_PRESETS = (0.65, 0.8)


@dataclass(frozen=True)
class Association:
    mu: int
    mu_prime: int
    d_rdl: float
    d_hat: float


@dataclass(frozen=True)
class AssociationSet:
    pairs: list[Association]
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def as_dict(self) -> dict[int, Association]:
        return {a.mu: a for a in self.pairs}

    def to_text(self) -> str:
        lines = ["# mu mu_prime d_rdl d_hat"]
        lines += [f"{a.mu} {a.mu_prime} {a.d_rdl:.6g} {a.d_hat:.6f}" for a in self.pairs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> AssociationSet:
        pairs = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            mu, mp, d, dh = line.split()
            pairs.append(Association(int(mu), int(mp), float(d), float(dh)))
        return cls(pairs)


class MeanIndex:
    """Exact k-nearest-neighbor queries over normalized feature-set means."""

    def __init__(self, means: np.ndarray, scale=None):
        means = np.asarray(means, dtype=float)
        if len(means) == 0:
            raise ValueError("cannot index an empty view")
        self.scale = np.ones(means.shape[1]) if scale is None else np.asarray(scale, dtype=float)
        self.means = means / self.scale
        self.tree = cKDTree(self.means)

    def __len__(self):
        return len(self.means)

    def query(self, q: np.ndarray, C: int) -> np.ndarray:
        """Candidate indices for each row of ``q``, nearest first.

        Distance ties are broken by index so that candidate lists for
        growing ``C`` are nested.
        """
        q = np.atleast_2d(q) / self.scale
        C = min(C, len(self))
        # over-fetch slightly so equal distances at the cut can be ordered by index
        kk = min(len(self), C + 8)
        d, idx = self.tree.query(q, k=kk)
        d = d.reshape(len(q), kk)
        idx = idx.reshape(len(q), kk)
        order = np.lexsort((idx, d))
        return np.take_along_axis(idx, order, axis=1)[:, :C]


def pair_scale(view_a: ViewFeatures, view_b: ViewFeatures) -> np.ndarray:
    """Per-component spread of the raw means pooled over both views."""
    return mean_scale(np.vstack([view_a.raw_means, view_b.raw_means]))


def build_mean_index(view: ViewFeatures, other: ViewFeatures | None = None) -> MeanIndex:
    """Index over the raw means of ``view``.

    Queries and index share one scale: pooled with ``other`` when given,
    otherwise the view's own.
    """
    scale = view.scale if other is None else pair_scale(view, other)
    return MeanIndex(view.raw_means, scale)


@numba.njit(parallel=True, cache=True)
def _best_matches(seq_a, seq_b, queries, cands, tol, ins, dele, rep, trans, gate_budget, prune):
    nq = queries.shape[0]
    best = np.full(nq, -1, dtype=np.int64)
    best_d = np.full(nq, np.inf)
    for qi in numba.prange(nq):
        mu = queries[qi]
        bd = np.inf
        bi = -1
        for ci in range(cands.shape[1]):
            c = cands[qi, ci]
            if c < 0:
                break
            budget = gate_budget
            if prune and bd < budget:
                budget = bd
            d = rdl_kernel(seq_a[mu], seq_b[c], tol, ins, dele, rep, trans, budget)
            if d < bd:
                bd = d
                bi = c
        best[qi] = bi
        best_d[qi] = bd
    return best, best_d


def best_matches(view_a: ViewFeatures, view_b: ViewFeatures, C: int | None = DEFAULT_C,
                 costs: EditCosts = EditCosts(), tol: MatchTolerances = MatchTolerances(),
                 budget: float = np.inf, queries=None, index: MeanIndex | None = None):
    """Argmin of the edit distance over the ``C`` mean-space candidates per query.

    ``C=None`` compares against the whole of view b.  Returns
    ``(queries, best_index, best_distance)``; distances above ``budget`` are
    lower bounds only.
    """
    nb = len(view_b.ids)
    queries = np.arange(len(view_a.ids)) if queries is None else np.asarray(queries, dtype=np.int64)
    if C is None or C >= nb:
        C = nb
    index = index or build_mean_index(view_b, view_a)
    cands = index.query(view_a.raw_means[queries], C).astype(np.int64) if len(queries) else np.zeros((0, C), np.int64)
    best, best_d = _best_matches(
        np.ascontiguousarray(view_a.features), np.ascontiguousarray(view_b.features),
        queries, cands, tol.vector(), costs.insert, costs.delete, costs.replace, costs.transpose,
        float(budget), True,
    )
    return queries, best, best_d


def volumetric_downsample(centroids: np.ndarray, voxel: float = 0.25) -> np.ndarray:
    """One patch per occupied voxel: the one nearest the voxel's centroid mean."""
    keys = np.floor(centroids / voxel).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    out = []
    for v in range(inv.max() + 1):
        members = np.flatnonzero(inv == v)
        c = centroids[members].mean(axis=0)
        out.append(members[np.argmin(np.linalg.norm(centroids[members] - c, axis=1))])
    return np.sort(np.array(out, dtype=np.int64))


def associate(view_a: ViewFeatures, view_b: ViewFeatures, C: int | None = DEFAULT_C,
              lam: float = DEFAULT_LAMBDA, costs: EditCosts = EditCosts(),
              tol: MatchTolerances = MatchTolerances(), queries=None,
              mutual: bool = False) -> AssociationSet:
    """Gated best associations from view a to view b.

    Each query patch keeps its lowest-distance candidate when the normalized
    distance ``d_rdl / (k_a + k_b)`` is at most ``lam``.
    """
    if not 0 <= lam <= 1:
        raise ValueError("gating value must lie in [0, 1]")
    if C is not None and C < 1:
        raise ValueError("query count C must be at least 1")
    norm = view_a.k + view_b.k
    q, best, best_d = best_matches(view_a, view_b, C, costs, tol, lam * norm, queries)
    keep = (best >= 0) & (best_d <= lam * norm)
    if mutual and keep.any():
        back_q, back_best, _ = best_matches(view_b, view_a, C, costs, tol, lam * norm,
                                            np.unique(best[keep]))
        back = dict(zip(back_q.tolist(), back_best.tolist()))
        keep &= np.array([back.get(int(b), -1) == int(m) for m, b in zip(q, best)])
    pairs = [
        Association(int(view_a.ids[m]), int(view_b.ids[b]), float(d), float(d / norm))
        for m, b, d, k in zip(q, best, best_d, keep) if k
    ]
    params = {"C": C, "lambda": lam, "k_a": view_a.k, "k_b": view_b.k,
              "costs": vars(costs), "tolerances": vars(tol), "mutual": mutual}
    return AssociationSet(pairs, params)


# transform estimation -----------------------------------------------------

def kabsch(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform with ``dst ~ R @ src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("expected matching (n, 3) point arrays")
    if len(src) < 3:
        raise ValueError("need at least 3 correspondences")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    A = src - cs
    B = dst - cd
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise ValueError("degenerate (collinear) correspondences")
    H = (A * w[:, None]).T @ B
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # re-orthonormalize against rounding before the strict constructor check
    u2, _, vt2 = np.linalg.svd(R)
    R = u2 @ vt2
    return RigidTransform(R, cd - R @ cs)


@dataclass(frozen=True)
class RansacResult:
    transform: RigidTransform | None
    inliers: np.ndarray
    failure: bool
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def ransac_min_inliers(n: int) -> int:
    return max(6, int(np.ceil(0.1 * n)))


def estimate_transform_ransac(src, dst, inlier_thresh: float = 0.05, iterations: int = 500,
                              seed: int = 0) -> RansacResult:
    """3-point RANSAC over centroid correspondences with a final inlier refit.

    Best hypothesis: most inliers, then lower summed inlier residual, then
    the earlier iteration.  Fails when fewer than ``max(6, 10%)`` of the
    correspondences are inliers.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    none = np.zeros(n, dtype=bool)
    if n < 3:
        return RansacResult(None, none, True, 0)
    rng = np.random.default_rng(seed)
    best_key = (-1, 0.0)
    best_inl = none
    for _ in range(iterations):
        idx = rng.choice(n, 3, replace=False)
        try:
            T = kabsch(src[idx], dst[idx])
        except ValueError:
            continue
        res = np.linalg.norm(T.apply(src) - dst, axis=1)
        inl = res < inlier_thresh
        key = (int(inl.sum()), -float(res[inl].sum()))
        if key > best_key:
            best_key, best_inl = key, inl
    if best_key[0] < 3:
        return RansacResult(None, best_inl, True, iterations)
    inl = best_inl
    T = kabsch(src[inl], dst[inl])
    # one re-selection pass with the refit model
    res = np.linalg.norm(T.apply(src) - dst, axis=1)
    inl2 = res < inlier_thresh
    if inl2.sum() >= inl.sum():
        try:
            T = kabsch(src[inl2], dst[inl2])
            inl = inl2
        except ValueError:
            pass
    failure = int(inl.sum()) < ransac_min_inliers(n)
    return RansacResult(T, inl, failure, iterations)


def association_points(assoc: AssociationSet, dec_a, dec_b):
    """Centroid correspondences ``(src, dst)`` for an association set."""
    ca = {s.id: s.centroid for s in dec_a.superpixels}
    cb = {s.id: s.centroid for s in dec_b.superpixels}
    src = np.array([ca[a.mu] for a in assoc]).reshape(-1, 3)
    dst = np.array([cb[a.mu_prime] for a in assoc]).reshape(-1, 3)
    return src, dst


# evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class PoseError:
    translation: float
    rotation_deg: float


def evaluate(estimate: RigidTransform, truth: RigidTransform) -> PoseError:
    """Relative pose error of ``truth^-1 @ estimate``."""
    E = truth.inverse() @ estimate
    return PoseError(float(np.linalg.norm(E.translation)), float(np.degrees(rotation_angle(E.rotation))))


@dataclass
class EvalReport:
    errors: list = field(default_factory=list)
    failures: int = 0
    precisions: list = field(default_factory=list)
    recalls: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def add(self, error: PoseError | None, failure: bool):
        if failure or error is None:
            self.failures += 1
        else:
            self.errors.append(error)

    @property
    def n_pairs(self) -> int:
        return len(self.errors) + self.failures

    @property
    def translation_rmse(self) -> float:
        t = np.array([e.translation for e in self.errors])
        return float(np.sqrt(np.mean(t ** 2))) if len(t) else float("nan")

    @property
    def rotation_rmse(self) -> float:
        r = np.array([e.rotation_deg for e in self.errors])
        return float(np.sqrt(np.mean(r ** 2))) if len(r) else float("nan")

    @property
    def fail_rate(self) -> float:
        return self.failures / self.n_pairs if self.n_pairs else 0.0

    def summary(self) -> dict:
        return {
            "pairs": self.n_pairs,
            "failures": self.failures,
            "fail_rate": self.fail_rate,
            "translation_rmse_m": self.translation_rmse,
            "rotation_rmse_deg": self.rotation_rmse,
        }


def association_precision(assoc: AssociationSet, dec_a, dec_b) -> float:
    """Fraction of associations whose patches share the majority surface id."""
    if len(assoc) == 0:
        return float("nan")
    sa = {s.id: s.majority_surface_id for s in dec_a.superpixels}
    sb = {s.id: s.majority_surface_id for s in dec_b.superpixels}
    ok = [sa[a.mu] == sb[a.mu_prime] and sa[a.mu] >= 0 for a in assoc]
    return float(np.mean(ok))
