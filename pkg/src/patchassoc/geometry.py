"""Rigid-motion invariant relative features between surface patches.

For a patch ``mu`` with normal ``n_mu`` and a neighbor ``alpha`` displaced by
``r = l_alpha - l_mu`` the feature vector is::

    q = [|r| sgn_e(n_alpha.u), |r| sgn_e(n_alpha.v), |r| sgn_e(n_alpha.w),
         |r|, angle(n_mu, n_alpha), angle(r, n_mu), angle(r, n_alpha)]

where ``(u, v, w)`` is the orthonormal frame built from ``r`` and ``n_mu``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

E_THETA = 5 * np.pi / 180
N_FEATURES = 7


@dataclass(frozen=True)
class LocalFrame:
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class RelFeature:
    q: np.ndarray
    alpha_id: int


@dataclass(frozen=True)
class FeatureSet:
    """Unordered features of one patch's neighborhood.

    ``mean`` is the component-wise average of the features divided by
    ``scale`` (the view-wide standard deviation of the raw means).
    """

    owner: int
    neighbors: np.ndarray
    features: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def __len__(self):
        return len(self.neighbors)


def _is_degenerate(cos_r_mu, e_theta):
    # colinear n_mu and r: angle(r, n_mu) outside [e, pi - e]
    return np.abs(cos_r_mu) > np.cos(e_theta)


def _sgn_e(dot, e_theta):
    # zero inside the band of half-width e_theta around 90 degrees
    return np.where(np.abs(dot) < np.sin(e_theta), 0.0, np.sign(dot))


def local_frame(n_mu, r, e_theta: float = E_THETA) -> LocalFrame:
    n_mu = np.asarray(n_mu, dtype=float)
    r = np.asarray(r, dtype=float)
    d = np.linalg.norm(r)
    if d == 0:
        raise ValueError("zero-length displacement: patches coincide")
    u = r / d
    c = float(np.clip(n_mu @ u, -1.0, 1.0))
    v = n_mu - c * u
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        # exactly colinear: any vector perpendicular to u completes the frame
        helper = np.eye(3)[np.argmin(np.abs(u))]
        v = helper - (helper @ u) * u
        nv = np.linalg.norm(v)
    v = v / nv
    w = np.cross(u, v)
    w /= np.linalg.norm(w)
    return LocalFrame(u, v, w, bool(_is_degenerate(c, e_theta)))


def relative_feature(centroid_mu, normal_mu, centroid_alpha, normal_alpha,
                     e_theta: float = E_THETA, alpha_id: int = -1) -> RelFeature:
    q = pairwise_features(
        np.asarray(centroid_mu, float)[None], np.asarray(normal_mu, float)[None],
        np.asarray(centroid_alpha, float)[None], np.asarray(normal_alpha, float)[None],
        e_theta,
    )[0, 0]
    return RelFeature(q, alpha_id)


def pairwise_features(c_mu, n_mu, c_alpha, n_alpha, e_theta: float = E_THETA) -> np.ndarray:
    """Features for every (mu, alpha) combination: shape ``(M, A, 7)``.

    Pairs whose centroids coincide produce NaN rows; callers exclude them.
    """
    r = c_alpha[None, :, :] - c_mu[:, None, :]
    dist = np.linalg.norm(r, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = r / dist[..., None]
    nm = np.broadcast_to(n_mu[:, None, :], r.shape)
    na = np.broadcast_to(n_alpha[None, :, :], r.shape)
    cos_rmu = np.clip(np.einsum("mak,mak->ma", u, nm), -1.0, 1.0)
    v = nm - cos_rmu[..., None] * u
    nv = np.linalg.norm(v, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = v / nv[..., None]
    w = np.cross(u, v)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = w / np.linalg.norm(w, axis=2)[..., None]
    degenerate = _is_degenerate(cos_rmu, e_theta) | ~(nv > 1e-12)

    q = np.empty(r.shape[:2] + (N_FEATURES,))
    for k, basis in enumerate((u, v, w)):
        dot = np.einsum("mak,mak->ma", na, basis)
        q[..., k] = dist * _sgn_e(dot, e_theta)
        q[..., k][degenerate] = 0.0
    q[..., 3] = dist
    q[..., 4] = np.arccos(np.clip(np.einsum("mak,mak->ma", nm, na), -1.0, 1.0))
    q[..., 5] = np.arccos(cos_rmu)
    q[..., 6] = np.arccos(np.clip(np.einsum("mak,mak->ma", u, na), -1.0, 1.0))
    q[dist == 0] = np.nan
    return q


def neighborhoods(centroids: np.ndarray, k: int | None = None) -> np.ndarray:
    """Indices of the ``k`` nearest other patches for every patch.

    ``k=None`` selects full neighborhoods (all other patches).  Ties in
    distance are broken by patch index.
    """
    n = len(centroids)
    if k is None or k >= n - 1:
        k = n - 1
    d = np.linalg.norm(centroids[:, None] - centroids[None], axis=2)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order


@dataclass(frozen=True)
class ViewFeatures:
    """Feature sets of every patch in one view, stored densely.

    ``features[i, j]`` is the feature of neighbor ``neighbors[i, j]`` relative
    to patch ``i``; all neighborhoods in a view share the size ``k``.
    """

    ids: np.ndarray
    neighbors: np.ndarray
    features: np.ndarray
    raw_means: np.ndarray
    scale: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def means(self) -> np.ndarray:
        return self.raw_means / self.scale

    def feature_set(self, i: int) -> FeatureSet:
        return FeatureSet(int(self.ids[i]), self.ids[self.neighbors[i]], self.features[i],
                          self.means[i], self.scale)


def mean_scale(raw_means: np.ndarray) -> np.ndarray:
    s = raw_means.std(axis=0) if len(raw_means) > 1 else np.ones(N_FEATURES)
    return np.where(s > 1e-12, s, 1.0)


def view_features(centroids, normals, ids=None, k: int | None = None,
                  e_theta: float = E_THETA, chunk: int = 256) -> ViewFeatures:
    centroids = np.asarray(centroids, dtype=float)
    normals = np.asarray(normals, dtype=float)
    n = len(centroids)
    if n < 2:
        raise ValueError("need at least two patches to form neighborhoods")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    nb = neighborhoods(centroids, k)
    feats = np.empty(nb.shape + (N_FEATURES,))
    for s in range(0, n, chunk):
        rows = slice(s, min(n, s + chunk))
        full = pairwise_features(centroids[rows], normals[rows], centroids, normals, e_theta)
        feats[rows] = np.take_along_axis(full, nb[rows][..., None], axis=1)
    if np.isnan(feats).any():
        raise ValueError("coincident patch centroids")
    raw = feats.mean(axis=1)
    return ViewFeatures(ids, nb, feats, raw, mean_scale(raw))


def feature_set(mu: int, centroids, normals, neighborhood, e_theta: float = E_THETA,
                scale=None) -> FeatureSet:
    """Feature set of patch ``mu`` over the given neighbor indices."""
    neighborhood = np.asarray(neighborhood, dtype=int)
    if len(neighborhood) == 0:
        raise ValueError("empty neighborhood")
    if (neighborhood == mu).any():
        raise ValueError("a patch is not its own neighbor")
    centroids = np.asarray(centroids, dtype=float)
    normals = np.asarray(normals, dtype=float)
    q = pairwise_features(centroids[mu:mu + 1], normals[mu:mu + 1],
                          centroids[neighborhood], normals[neighborhood], e_theta)[0]
    if np.isnan(q).any():
        raise ValueError("coincident patch centroids")
    scale = np.ones(N_FEATURES) if scale is None else np.asarray(scale, dtype=float)
    return FeatureSet(mu, neighborhood, q, q.mean(axis=0) / scale, scale)
