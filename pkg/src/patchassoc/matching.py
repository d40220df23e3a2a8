"""Feature ordering and restricted Damerau-Levenshtein sequence comparison."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .geometry import E_THETA, FeatureSet, ViewFeatures

E_R = 0.02
R_DEV = 0.04
THETA_DEV = np.deg2rad(10.0)


@dataclass(frozen=True)
class EditCosts:
    insert: float = 1.0
    delete: float = 1.0
    replace: float = np.inf
    transpose: float = 0.0

    def __post_init__(self):
        if not (self.insert > 0 and self.delete > 0):
            raise ValueError("insert and delete costs must be positive")
        if self.replace < 0 or self.transpose < 0:
            raise ValueError("edit costs must be non-negative")


@dataclass(frozen=True)
class MatchTolerances:
    r_dev: float = R_DEV
    theta_dev: float = THETA_DEV
    # "feature": distances on components 1-4, angles on 5-7 (feature layout).
    # "literal": angles on 1-3, distances on 4-7.
    layout: str = "feature"

    def __post_init__(self):
        if self.r_dev <= 0 or self.theta_dev <= 0:
            raise ValueError("match tolerances must be positive")
        if self.layout not in ("feature", "literal"):
            raise ValueError(f"unknown tolerance layout {self.layout!r}")

    def vector(self) -> np.ndarray:
        r, t = self.r_dev, self.theta_dev
        if self.layout == "literal":
            return np.array([t, t, t, r, r, r, r])
        return np.array([r, r, r, r, t, t, t])


@dataclass(frozen=True)
class FeatureSequence:
    owner: int
    neighbors: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.neighbors)


def _sort_keys(features: np.ndarray, e_r: float, e_theta: float) -> list[np.ndarray]:
    """Keys for :func:`numpy.lexsort`, most significant first."""
    tol = np.array([e_r] * 4 + [e_theta] * 3)
    bins = np.floor(features / tol).astype(np.int64)
    keys = [bins[..., c] for c in range(7)]
    keys += [features[..., c] for c in range(7)]
    keys.append(features[..., 3])
    return keys


def order_sequence(fs: FeatureSet, e_r: float = E_R, e_theta: float = E_THETA) -> FeatureSequence:
    """Sort a feature set into its sequence.

    Components are compared on tolerance bins first (``e_r`` for the
    distance-valued components, ``e_theta`` for angles), lexicographically;
    full-precision values then ``|r|`` break remaining ties.
    """
    if len(fs) == 0:
        raise ValueError("empty feature set")
    keys = _sort_keys(fs.features, e_r, e_theta) + [np.asarray(fs.neighbors)]
    order = np.lexsort(keys[::-1])
    return FeatureSequence(fs.owner, np.asarray(fs.neighbors)[order], fs.features[order])


@numba.njit(cache=True, inline="always")
def _row_less(bins, feats, nb, r, i, j):
    for c in range(7):
        if bins[r, i, c] != bins[r, j, c]:
            return bins[r, i, c] < bins[r, j, c]
    for c in range(7):
        if feats[r, i, c] != feats[r, j, c]:
            return feats[r, i, c] < feats[r, j, c]
    if nb[r, i] != nb[r, j]:
        return nb[r, i] < nb[r, j]
    return i < j


@numba.njit(cache=True, parallel=True)
def _order_rows(bins, feats, nb):
    # bottom-up merge sort of each row, same key order as order_sequence
    n, k = nb.shape
    out = np.empty((n, k), np.int64)
    for r in numba.prange(n):
        src = np.arange(k)
        dst = np.empty(k, np.int64)
        width = 1
        while width < k:
            for lo in range(0, k, 2 * width):
                mid = min(lo + width, k)
                hi = min(lo + 2 * width, k)
                a, b, t = lo, mid, lo
                while a < mid and b < hi:
                    if _row_less(bins, feats, nb, r, src[b], src[a]):
                        dst[t] = src[b]
                        b += 1
                    else:
                        dst[t] = src[a]
                        a += 1
                    t += 1
                while a < mid:
                    dst[t] = src[a]
                    a += 1
                    t += 1
                while b < hi:
                    dst[t] = src[b]
                    b += 1
                    t += 1
            src, dst = dst, src
            width *= 2
        out[r] = src
    return out


def order_view(view: ViewFeatures, e_r: float = E_R, e_theta: float = E_THETA) -> ViewFeatures:
    """Every feature set of a view sorted at once; rows keep their owners."""
    tol = np.array([e_r] * 4 + [e_theta] * 3)
    feats = np.ascontiguousarray(view.features, dtype=np.float64)
    bins = np.floor(feats / tol).astype(np.int64)
    order = _order_rows(bins, feats, np.ascontiguousarray(view.ids[view.neighbors], dtype=np.int64))
    return ViewFeatures(
        view.ids,
        np.take_along_axis(view.neighbors, order, axis=1),
        np.take_along_axis(view.features, order[..., None], axis=1),
        view.raw_means,
        view.scale,
    )


def match_features(qa, qb, tol: MatchTolerances = MatchTolerances()) -> bool:
    return bool(np.all(np.abs(np.asarray(qa) - np.asarray(qb)) <= tol.vector()))


_CHECK_ORDER = np.array([3, 0, 1, 2, 4, 5, 6])


@numba.njit(cache=True, inline="always")
def _match(a, i, b, j, tol):
    # |r| first: it is the most selective component
    for k in range(_CHECK_ORDER.shape[0]):
        c = _CHECK_ORDER[k]
        if abs(a[i, c] - b[j, c]) > tol[c]:
            return False
    return True


@numba.njit(cache=True)
def rdl_kernel(a, b, tol, ins, dele, rep, trans, budget):
    """Optimal-string-alignment distance between feature arrays ``a`` and ``b``.

    Consuming an element of ``a`` costs ``dele``; of ``b`` costs ``ins``.
    Keeps three cost rows and two match rows over the shorter sequence.
    Returns a lower bound greater than ``budget`` as soon as no completion
    can stay within it.
    """
    if a.shape[0] < b.shape[0]:
        a, b = b, a
        ins, dele = dele, ins
    la = a.shape[0]
    lb = b.shape[0]
    prev2 = np.empty(lb + 1)
    prev = np.empty(lb + 1)
    cur = np.empty(lb + 1)
    # mcur[j]: a[i-1] ~ b[j-1] for the row being filled, mprev for row i-1
    mcur = np.zeros(lb + 1, dtype=np.bool_)
    mprev = np.zeros(lb + 1, dtype=np.bool_)
    check = budget < np.inf
    prev_bound = np.inf
    for j in range(lb + 1):
        prev[j] = j * ins
        x = prev[j] + ((la - (lb - j)) * dele if la > lb - j else (lb - j - la) * ins)
        if x < prev_bound:
            prev_bound = x
    for i in range(1, la + 1):
        cur[0] = i * dele
        for j in range(1, lb + 1):
            v = prev[j] + dele
            x = cur[j - 1] + ins
            if x < v:
                v = x
            m = _match(a, i - 1, b, j - 1, tol)
            mcur[j] = m
            x = prev[j - 1] if m else prev[j - 1] + rep
            if x < v:
                v = x
            # cross pairs: a[i-1] ~ b[j-2] and a[i-2] ~ b[j-1]
            if j > 1 and i > 1 and mcur[j - 1] and mprev[j]:
                x = prev2[j - 2] + trans
                if x < v:
                    v = x
            cur[j] = v
        if check:
            # any alignment must still even out the remaining length difference
            bound = np.inf
            ra = la - i
            for j in range(lb + 1):
                rb = lb - j
                x = cur[j] + ((ra - rb) * dele if ra > rb else (rb - ra) * ins)
                if x < bound:
                    bound = x
            # a transposition may jump from row i-1 straight to row i+1
            low = bound if bound < prev_bound else prev_bound
            if low > budget:
                return low
            prev_bound = bound
        prev2, prev, cur = prev, cur, prev2
        mprev, mcur = mcur, mprev
    return prev[lb]


def _as_rows(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x.reshape(-1, 7) if x.size == 0 else x.reshape(len(x), -1)


def compare_rdl(a, b, costs: EditCosts = EditCosts(), tol: MatchTolerances = MatchTolerances(),
                budget: float | None = None) -> float:
    """Restricted Damerau-Levenshtein distance between two feature sequences.

    With ``budget`` set, the result is exact whenever it is ``<= budget``;
    otherwise some value ``> budget`` is returned early.
    """
    fa = _as_rows(getattr(a, "features", a))
    fb = _as_rows(getattr(b, "features", b))
    tv = tol.vector() if isinstance(tol, MatchTolerances) else np.asarray(tol, dtype=np.float64)
    return float(rdl_kernel(fa, fb, tv, costs.insert, costs.delete, costs.replace,
                            costs.transpose, np.inf if budget is None else float(budget)))


ORACLE_MAX_LEN = 10


def rdl_oracle(a, b, costs: EditCosts, match) -> float:
    """Top-down memoized recursion over all restricted-DL edit scripts.

    Used to verify :func:`compare_rdl`; ``match(x, y)`` decides element
    equivalence.
    """
    if len(a) > ORACLE_MAX_LEN or len(b) > ORACLE_MAX_LEN:
        raise ValueError(f"oracle limited to sequences of length <= {ORACLE_MAX_LEN}")

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return (len(b) - j) * costs.insert
        if j == len(b):
            return (len(a) - i) * costs.delete
        options = [
            costs.delete + go(i + 1, j),
            costs.insert + go(i, j + 1),
            (0.0 if match(a[i], b[j]) else costs.replace) + go(i + 1, j + 1),
        ]
        if i + 1 < len(a) and j + 1 < len(b) and match(a[i], b[j + 1]) and match(a[i + 1], b[j]):
            options.append(costs.transpose + go(i + 2, j + 2))
        return min(options)

    return float(go(0, 0))
