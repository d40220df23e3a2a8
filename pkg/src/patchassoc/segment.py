"""Depth superpixels: smooth components split into patches of similar area.

Pipeline: edge-respecting connected components over the pixel grid,
area-weighted K-means inside each component (farthest-point seeding),
splitting of disconnected clusters, then agglomeration of undersized
patches and left-over pixels into adjacent patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .rangeio import OrganizedCloud, pixel_rays

log = logging.getLogger(__name__)

ANGLE_THRESH = np.deg2rad(20.0)
DEPTH_GAP = 0.03
CURVATURE_THRESH = 0.05
MIN_POINTS = 40
TARGET_AREA = 0.035
KMEANS_ITERS = 15
KMEANS_TOL = 1e-4


@dataclass(frozen=True)
class Superpixel:
    id: int
    pixels: np.ndarray  # flat indices into the H*W grid
    centroid: np.ndarray
    normal: np.ndarray
    area: float
    component_id: int
    majority_surface_id: int = -1

    def __len__(self):
        return len(self.pixels)


@dataclass(frozen=True)
class Decomposition:
    superpixels: list[Superpixel]
    labels: np.ndarray  # H x W, -1 where unlabeled
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.superpixels)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([s.centroid for s in self.superpixels]).reshape(-1, 3)

    @property
    def normals(self) -> np.ndarray:
        return np.array([s.normal for s in self.superpixels]).reshape(-1, 3)

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.superpixels], dtype=np.int64)

    @property
    def surface_ids(self) -> np.ndarray:
        return np.array([s.majority_surface_id for s in self.superpixels], dtype=np.int64)


@dataclass(frozen=True)
class SegmentParams:
    angle_thresh: float = ANGLE_THRESH
    depth_gap: float = DEPTH_GAP
    curvature_thresh: float = CURVATURE_THRESH
    min_points: int = MIN_POINTS
    target_area: float = TARGET_AREA
    kmeans_iters: int = KMEANS_ITERS
    kmeans_tol: float = KMEANS_TOL
    seed: int = 0


def _grid_edges(H: int, W: int):
    """Flat index pairs of all horizontal and vertical 4-neighbors."""
    idx = np.arange(H * W).reshape(H, W)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return a, b


def _components(n: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    g = coo_matrix((np.ones(len(a), dtype=np.int8), (a, b)), shape=(n, n))
    return connected_components(g, directed=False)[1]


def _spatial_edges(cloud: OrganizedCloud, depth_gap: float):
    """4-neighbor pairs that are both valid and 3D-adjacent."""
    H, W = cloud.shape
    a, b = _grid_edges(H, W)
    valid = cloud.valid.ravel()
    P = cloud.points.reshape(-1, 3)
    keep = valid[a] & valid[b]
    a, b = a[keep], b[keep]
    z = 0.5 * (P[a, 2] + P[b, 2])
    close = np.linalg.norm(P[a] - P[b], axis=1) < depth_gap * z
    return a[close], b[close]


def split_components(cloud: OrganizedCloud, angle_thresh: float = ANGLE_THRESH,
                     depth_gap: float = DEPTH_GAP, curvature_thresh: float = CURVATURE_THRESH) -> np.ndarray:
    """Label grid of smooth, edge-respecting components (-1: not labeled).

    Two 4-adjacent pixels are joined when their normals differ by less than
    ``angle_thresh``, their 3D distance is below ``depth_gap`` scaled by depth
    in meters, and neither exceeds ``curvature_thresh``.
    """
    H, W = cloud.shape
    a, b = _spatial_edges(cloud, depth_gap)
    N = cloud.normals.reshape(-1, 3)
    smooth = (cloud.curvature.ravel() <= curvature_thresh) & cloud.valid.ravel()
    keep = smooth[a] & smooth[b] & (np.einsum("ij,ij->i", N[a], N[b]) > np.cos(angle_thresh))
    comp = _components(H * W, a[keep], b[keep])
    # dense relabel of smooth pixels in first-pixel order
    out = np.full(H * W, -1, dtype=np.int64)
    pix = np.flatnonzero(smooth)
    if len(pix):
        _, first, inv = np.unique(comp[pix], return_index=True, return_inverse=True)
        out[pix] = np.argsort(np.argsort(first))[inv.ravel()]
    return out.reshape(H, W)


def pixel_areas(cloud: OrganizedCloud) -> np.ndarray:
    """Surface area covered by each pixel, corrected for surface slant."""
    K = cloud.intrinsics
    z = cloud.depth
    rays = pixel_rays(K)
    ray_len = np.linalg.norm(rays, axis=2)
    cos = np.abs(np.einsum("hwk,hwk->hw", rays, cloud.normals)) / ray_len
    # fronto-parallel footprint (z/fx)(z/fy), reprojected along the ray onto the surface
    area = (z / K.fx) * (z / K.fy) / ray_len / np.maximum(cos, 0.2)
    return np.where(cloud.valid, area, 0.0)


def farthest_point_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` points spread by farthest-point sampling."""
    n = len(points)
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = rng.integers(n)
    dist = np.linalg.norm(points - points[seeds[0]], axis=1)
    for i in range(1, k):
        seeds[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[seeds[i]], axis=1))
    return seeds


def weighted_kmeans(points, weights, k, rng, iters=KMEANS_ITERS, tol=KMEANS_TOL):
    centers = points[farthest_point_seeds(points, k, rng)]
    assign = np.zeros(len(points), dtype=np.int64)
    for _ in range(iters):
        assign = cKDTree(centers).query(points)[1]
        wsum = np.bincount(assign, weights=weights, minlength=k)
        new = np.stack([np.bincount(assign, weights=weights * points[:, c], minlength=k) for c in range(3)], axis=1)
        empty = wsum <= 0
        new[~empty] /= wsum[~empty, None]
        new[empty] = centers[empty]
        shift = np.linalg.norm(new - centers, axis=1).max()
        centers = new
        if shift < tol:
            break
    return cKDTree(centers).query(points)[1]


def _relabel_connected(labels: np.ndarray, cloud: OrganizedCloud, depth_gap: float) -> np.ndarray:
    """Split every label into its 4-connected (and 3D-adjacent) parts."""
    H, W = labels.shape
    lab = labels.ravel()
    a, b = _spatial_edges(cloud, depth_gap)
    keep = (lab[a] == lab[b]) & (lab[a] >= 0)
    comp = _components(H * W, a[keep], b[keep])
    comp = np.where(lab >= 0, comp, -1)
    uniq, inv = np.unique(comp, return_inverse=True)
    out = inv.ravel() - (1 if uniq[0] < 0 else 0)
    return out.reshape(H, W)


class _PatchStats:
    def __init__(self, labels, points, normals, weights):
        self.update(labels, points, normals, weights)

    def update(self, labels, points, normals, weights):
        lab = labels.ravel()
        m = lab >= 0
        n = lab.max() + 1 if m.any() else 0
        l = lab[m]
        self.count = np.bincount(l, minlength=n)
        cnt = np.maximum(self.count, 1)[:, None]
        P = points.reshape(-1, 3)[m]
        Nn = normals.reshape(-1, 3)[m]
        self.centroid = np.stack([np.bincount(l, P[:, c], n) for c in range(3)], 1) / cnt
        nsum = np.stack([np.bincount(l, Nn[:, c], n) for c in range(3)], 1).astype(float)
        norm = np.linalg.norm(nsum, axis=1, keepdims=True)
        self.normal = np.divide(nsum, norm, out=np.zeros(nsum.shape), where=norm > 0)
        self.area = np.bincount(l, weights.ravel()[m], n)


def _grow(labels, cloud, params, stats, use_normals: bool, max_iter: int = 500) -> np.ndarray:
    """Attach unlabeled valid pixels to adjacent patches, one ring per pass.

    A pixel joins the adjacent patch with the nearest centroid; with
    ``use_normals`` only patches whose mean normal is within the angle
    threshold of the pixel normal qualify.
    """
    H, W = labels.shape
    lab = labels.ravel().copy()
    a, b = _spatial_edges(cloud, params.depth_gap)
    a, b = np.concatenate([a, b]), np.concatenate([b, a])  # directed: a receives from b
    P = cloud.points.reshape(-1, 3)
    N = cloud.normals.reshape(-1, 3)
    cos_t = np.cos(params.angle_thresh)
    for _ in range(max_iter):
        cand = (lab[a] < 0) & (lab[b] >= 0)
        if not cand.any():
            break
        ca, cl = a[cand], lab[b[cand]]
        ok = np.ones(len(ca), dtype=bool)
        if use_normals:
            ok = np.einsum("ij,ij->i", N[ca], stats.normal[cl]) > cos_t
        if not ok.any():
            break
        ca, cl = ca[ok], cl[ok]
        d = np.linalg.norm(P[ca] - stats.centroid[cl], axis=1)
        order = np.lexsort((cl, d, ca))
        ca, cl = ca[order], cl[order]
        first = np.ones(len(ca), dtype=bool)
        first[1:] = ca[1:] != ca[:-1]
        lab[ca[first]] = cl[first]
    return lab.reshape(H, W)


def _contract_small(labels, cloud, params, stats, weights) -> np.ndarray:
    """Merge patches below ``min_points`` into an adjacent patch.

    Merging is edge contraction on the patch adjacency graph: the partner
    is the adjacent patch with a compatible mean normal and the nearest
    centroid.  Patches without such a partner are dissolved into
    unlabeled pixels.
    """
    lab = labels.ravel().copy()
    a, b = _spatial_edges(cloud, params.depth_gap)
    cos_t = np.cos(params.angle_thresh)
    small = np.flatnonzero((stats.count > 0) & (stats.count < params.min_points))
    if len(small) == 0:
        return labels
    la, lb = lab[a], lab[b]
    m = (la >= 0) & (lb >= 0) & (la != lb)
    pairs = np.unique(np.sort(np.stack([la[m], lb[m]], 1), axis=1), axis=0)
    adj: dict[int, set] = {}
    for p, q in pairs:
        adj.setdefault(int(p), set()).add(int(q))
        adj.setdefault(int(q), set()).add(int(p))
    parent = np.arange(len(stats.count))
    count = stats.count.astype(float).copy()
    centroid = stats.centroid.copy()
    nsum = stats.normal * stats.count[:, None]

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s in small[np.argsort(stats.count[small], kind="stable")]:
        r = find(s)
        if count[r] >= params.min_points:
            continue
        nr = nsum[r] / max(np.linalg.norm(nsum[r]), 1e-12)
        best, best_d = -1, np.inf
        for q in sorted({find(x) for x in adj.get(int(s), ())} - {r}):
            nq = nsum[q] / max(np.linalg.norm(nsum[q]), 1e-12)
            if nr @ nq <= cos_t:
                continue
            d = np.linalg.norm(centroid[r] - centroid[q])
            if d < best_d:
                best, best_d = q, d
        if best < 0:
            continue
        parent[r] = best
        tot = count[r] + count[best]
        centroid[best] = (centroid[r] * count[r] + centroid[best] * count[best]) / tot
        count[best] = tot
        nsum[best] += nsum[r]
        adj.setdefault(best, set()).update(adj.get(int(r), ()))
    roots = np.array([find(x) for x in range(len(parent))])
    out = np.where(lab >= 0, roots[np.maximum(lab, 0)], -1)
    # roots still undersized are dissolved for pixel-level growth
    sizes = np.bincount(out[out >= 0], minlength=len(parent))
    out[(out >= 0) & (sizes[np.maximum(out, 0)] < params.min_points)] = -1
    return out.reshape(labels.shape)


def decompose(cloud: OrganizedCloud, params: SegmentParams = SegmentParams(),
              components: np.ndarray | None = None) -> Decomposition:
    if cloud.normals is None:
        raise ValueError("cloud has no normals; run estimate_normals first")
    rng = np.random.default_rng(params.seed)
    H, W = cloud.shape
    if components is None:
        components = split_components(cloud, params.angle_thresh, params.depth_gap, params.curvature_thresh)
    weights = pixel_areas(cloud)
    comp = components.ravel()
    P = cloud.points.reshape(-1, 3)
    w = weights.ravel()

    labels = np.full(H * W, -1, dtype=np.int64)
    next_label = 0
    order = np.argsort(comp, kind="stable")
    bounds = np.searchsorted(comp[order], np.arange(comp.max() + 2)) if comp.max() >= 0 else [0]
    for c in range(comp.max() + 1):
        pix = order[bounds[c]:bounds[c + 1]]
        if len(pix) < params.min_points:
            continue
        k = int(np.ceil(w[pix].sum() / params.target_area))
        k = max(1, min(k, len(pix) // params.min_points if len(pix) >= params.min_points else 1))
        if k == 1:
            labels[pix] = next_label
        else:
            labels[pix] = next_label + weighted_kmeans(P[pix], w[pix], k, rng, params.kmeans_iters, params.kmeans_tol)
        next_label += k
    labels = _relabel_connected(labels.reshape(H, W), cloud, params.depth_gap)
    stats = _PatchStats(labels, cloud.points, cloud.normals, weights)
    labels = _contract_small(labels, cloud, params, stats, weights)
    labels = _relabel_connected(labels, cloud, params.depth_gap)
    stats.update(labels, cloud.points, cloud.normals, weights)
    labels = _grow(labels, cloud, params, stats, use_normals=True)
    labels = _grow(labels, cloud, params, stats, use_normals=False)
    labels = _relabel_connected(labels, cloud, params.depth_gap)
    return _finalize(labels, cloud, components, weights, params)


def _finalize(labels, cloud, components, weights, params) -> Decomposition:
    H, W = labels.shape
    if not (labels >= 0).any():
        return Decomposition([], np.full((H, W), -1, dtype=np.int64), {"seed": params.seed, "n_patches": 0})
    lab = labels.ravel()
    sizes = np.bincount(lab[lab >= 0]) if (lab >= 0).any() else np.zeros(0, int)
    keep = sizes >= params.min_points
    lab = np.where((lab >= 0) & keep[np.maximum(lab, 0)], lab, -1)
    # ids in order of each patch's first pixel, for determinism
    valid_pix = np.flatnonzero(lab >= 0)
    old = lab[valid_pix]
    uniq, first = np.unique(old, return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    remap = np.full(lab.max() + 1 if len(uniq) else 0, -1, dtype=np.int64)
    remap[uniq] = rank
    out = np.full(H * W, -1, dtype=np.int64)
    out[valid_pix] = remap[old]

    P = cloud.points.reshape(-1, 3)
    N = cloud.normals.reshape(-1, 3)
    comp = components.ravel()
    w = weights.ravel()
    sid = None if cloud.surface_id is None else cloud.surface_id.ravel()
    order = np.argsort(out, kind="stable")
    sorted_lab = out[order]
    starts = np.searchsorted(sorted_lab, np.arange(len(uniq) + 1))
    sps = []
    for i in range(len(uniq)):
        pix = np.sort(order[starts[i]:starts[i + 1]])
        nsum = N[pix].sum(axis=0)
        cc = comp[pix]
        cc = cc[cc >= 0]
        comp_id = int(np.bincount(cc).argmax()) if len(cc) else -1
        maj = -1
        if sid is not None:
            s = sid[pix]
            s = s[s >= 0]
            if len(s):
                vals, cnts = np.unique(s, return_counts=True)
                maj = int(vals[np.argmax(cnts)])
        sps.append(Superpixel(
            id=i, pixels=pix, centroid=P[pix].mean(axis=0), normal=nsum / np.linalg.norm(nsum),
            area=float(w[pix].sum()), component_id=comp_id, majority_surface_id=maj,
        ))
    meta = {"seed": params.seed, "n_patches": len(sps)}
    return Decomposition(sps, out.reshape(H, W), meta)
