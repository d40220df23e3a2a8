"""Range image loading, pinhole back-projection and point normal estimation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numba
import numpy as np
from PIL import Image

RAW_MAGIC = b"RIF1"
RAW_ID_MAGIC = b"RII1"

DEFAULT_Z_MIN = 0.3
DEFAULT_Z_MAX = 8.0


class RangeIOError(Exception):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics for an image resampled by ``factor`` (0.5 halves the size)."""
        w, h = int(round(self.width * factor)), int(round(self.height * factor))
        return replace(
            self,
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=w,
            height=h,
        )


@dataclass(frozen=True)
class RangeImage:
    depth: np.ndarray
    surface_id: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be a 2D grid")
        d = np.where(np.isfinite(d), d, 0.0)
        if (d < 0).any():
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "depth", d)
        if self.surface_id is not None:
            sid = np.asarray(self.surface_id, dtype=np.int32)
            if sid.shape != d.shape:
                raise ValueError("surface_id grid must match depth grid")
            object.__setattr__(self, "surface_id", sid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True)
class OrganizedCloud:
    """Per-pixel geometry on the image lattice.

    ``normals`` and ``curvature`` stay ``None`` until :func:`estimate_normals`
    has run.  Invalid pixels hold zeros and must be masked with ``valid``.
    """

    points: np.ndarray
    valid: np.ndarray
    intrinsics: CameraIntrinsics
    normals: np.ndarray | None = None
    curvature: np.ndarray | None = None
    surface_id: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def depth(self) -> np.ndarray:
        return self.points[..., 2]


def load_range_image(path, format: str = "png16", depth_scale: float = 5000.0) -> RangeImage:
    """Read a depth image; stored values are divided by ``depth_scale``."""
    path = Path(path)
    if not path.is_file():
        raise RangeIOError(f"depth file not found: {path}")
    if format in ("png16", "pgm"):
        try:
            with Image.open(path) as im:
                arr = np.array(im)
        except Exception as exc:  # PIL raises several unrelated types
            raise RangeIOError(f"cannot decode {path} as {format}: {exc}") from exc
        if arr.ndim != 2:
            raise RangeIOError(f"{path}: expected a single-channel image, got shape {arr.shape}")
        if arr.dtype not in (np.uint16, np.int32, np.uint8):
            raise RangeIOError(f"{path}: unsupported pixel type {arr.dtype}")
        depth = arr.astype(np.float64) / depth_scale
    elif format == "raw-f32":
        depth = read_raw(path, RAW_MAGIC, np.float32).astype(np.float64) / depth_scale
    else:
        raise RangeIOError(f"unknown depth format {format!r}")
    depth[~np.isfinite(depth)] = 0.0
    if (depth < 0).any():
        raise RangeIOError(f"{path}: negative depth values")
    return RangeImage(depth)


def save_png16(path, depth_m: np.ndarray, depth_scale: float = 5000.0) -> None:
    stored = np.round(np.nan_to_num(depth_m) * depth_scale)
    if stored.max(initial=0) > 65535:
        raise RangeIOError("depth exceeds 16-bit range at this depth_scale")
    Image.fromarray(stored.astype(np.uint16)).save(path)


def write_raw(path, grid: np.ndarray, magic: bytes = RAW_MAGIC) -> None:
    h, w = grid.shape
    dtype = np.float32 if magic == RAW_MAGIC else np.int32
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(grid, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_raw(path, magic: bytes = RAW_MAGIC, dtype=np.float32) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise RangeIOError(f"{path}: bad raw header")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + w * h * 4
    if len(data) != expected:
        raise RangeIOError(f"{path}: expected {expected} bytes for {w}x{h}, got {len(data)}")
    return np.frombuffer(data[12:], dtype=np.dtype(dtype).newbyteorder("<")).reshape(h, w).copy()


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """Unnormalized viewing rays ``[(u-cx)/fx, (v-cy)/fy, 1]`` per pixel."""
    u = (np.arange(K.width) - K.cx) / K.fx
    v = (np.arange(K.height) - K.cy) / K.fy
    rays = np.empty((K.height, K.width, 3))
    rays[..., 0] = u[None, :]
    rays[..., 1] = v[:, None]
    rays[..., 2] = 1.0
    return rays


def backproject(img: RangeImage, K: CameraIntrinsics, z_min: float = DEFAULT_Z_MIN,
                z_max: float = DEFAULT_Z_MAX) -> OrganizedCloud:
    if img.shape != (K.height, K.width):
        raise ValueError(f"image is {img.shape[1]}x{img.shape[0]} but intrinsics are {K.width}x{K.height}")
    z = img.depth
    valid = (z > 0) & (z >= z_min) & (z <= z_max)
    points = pixel_rays(K) * np.where(valid, z, 0.0)[..., None]
    return OrganizedCloud(points=points, valid=valid, intrinsics=K, surface_id=img.surface_id)


def project(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points to ``(u, v, z)``."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    return np.stack([p[..., 0] / z * K.fx + K.cx, p[..., 1] / z * K.fy + K.cy, z], axis=-1)


def _shift(a: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """``out[y, x] = a[y + dy, x + dx]`` with out-of-range cells set to ``fill``."""
    out = np.full_like(a, fill)
    H, W = a.shape[:2]
    ys, yd = (slice(dy, H), slice(0, H - dy)) if dy >= 0 else (slice(0, H + dy), slice(-dy, H))
    xs, xd = (slice(dx, W), slice(0, W - dx)) if dx >= 0 else (slice(0, W + dx), slice(-dx, W))
    out[yd, xd] = a[ys, xs]
    return out


MIN_NORMAL_NEIGHBORS = 5


def estimate_normals(cloud: OrganizedCloud, radius_px: int = 2,
                     max_depth_gap: float = 0.05) -> OrganizedCloud:
    """Windowed PCA normals and surface variation.

    A neighbor inside the ``(2r+1)^2`` window is used when it is valid and its
    depth differs from the center by less than ``max_depth_gap`` scaled by the
    center depth in meters.  Pixels with fewer than five usable neighbors are
    invalidated.
    """
    P = cloud.points
    valid = cloud.valid
    z = P[..., 2]
    gap = max_depth_gap * z
    H, W = valid.shape
    n = np.zeros((H, W))
    s = np.zeros((H, W, 3))
    ss = np.zeros((H, W, 6))
    iu = ([0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2])
    for dy in range(-radius_px, radius_px + 1):
        for dx in range(-radius_px, radius_px + 1):
            if dy == 0 and dx == 0:
                continue
            vq = _shift(valid, dy, dx, False)
            d = _shift(P, dy, dx, 0.0) - P  # centered on the pixel for conditioning
            m = vq & valid & (np.abs(d[..., 2]) < gap)
            d[~m] = 0.0
            n += m
            s += d
            ss += d[..., iu[0]] * d[..., iu[1]]
    # the center itself contributes a zero offset
    cnt = n + 1.0
    ok = valid & (n >= MIN_NORMAL_NEIGHBORS)
    mean = s[ok] / cnt[ok, None]
    m2 = ss[ok] / cnt[ok, None]
    C = np.empty((mean.shape[0], 3, 3))
    for k, (a, b) in enumerate(zip(*iu)):
        C[:, a, b] = C[:, b, a] = m2[:, k] - mean[:, a] * mean[:, b]
    evals, evecs = np.linalg.eigh(C)
    evals = np.clip(evals, 0.0, None)
    normal = evecs[:, :, 0]
    p = P[ok]
    flip = np.einsum("ij,ij->i", normal, p) > 0
    normal[flip] *= -1
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    tot = evals.sum(axis=1)
    curv = np.divide(evals[:, 0], tot, out=np.zeros_like(tot), where=tot > 0)

    normals = np.zeros((H, W, 3))
    normals[ok] = normal
    curvature = np.zeros((H, W))
    curvature[ok] = curv
    return replace(cloud, valid=ok, normals=normals, curvature=curvature)


@numba.njit(parallel=True, cache=True)
def _inverse_depth_fit(z, valid, xt, yt, r, gap):
    H, W = z.shape
    out = z.copy()
    for i in numba.prange(H):
        for j in range(W):
            if not valid[i, j]:
                continue
            zc = z[i, j]
            g = gap * zc
            A = np.zeros((3, 3))
            rhs = np.zeros(3)
            n = 0
            for a in range(max(0, i - r), min(H, i + r + 1)):
                for b in range(max(0, j - r), min(W, j + r + 1)):
                    if not valid[a, b] or abs(z[a, b] - zc) >= g:
                        continue
                    dx = xt[b] - xt[j]
                    dy = yt[a] - yt[i]
                    w = 1.0 / z[a, b]
                    A[0, 0] += 1.0
                    A[0, 1] += dx
                    A[0, 2] += dy
                    A[1, 1] += dx * dx
                    A[1, 2] += dx * dy
                    A[2, 2] += dy * dy
                    rhs[0] += w
                    rhs[1] += w * dx
                    rhs[2] += w * dy
                    n += 1
            if n < 6:
                continue
            A[1, 0] = A[0, 1]
            A[2, 0] = A[0, 2]
            A[2, 1] = A[1, 2]
            if abs(np.linalg.det(A)) < 1e-30:
                continue
            c = np.linalg.solve(A, rhs)
            if c[0] > 0:
                out[i, j] = 1.0 / c[0]
    return out


def smooth_depth(cloud: OrganizedCloud, radius_px: int, max_depth_gap: float = 0.05) -> OrganizedCloud:
    """Denoise depth by a local plane fit in inverse depth.

    Over a plane, 1/z is affine in the normalized image coordinates, so the
    fit reproduces noiseless planar regions exactly; neighbors failing the
    relative depth-gap test against the center are left out.  Points move
    along their rays; validity is unchanged.
    """
    if radius_px <= 0:
        return cloud
    K = cloud.intrinsics
    xt = (np.arange(K.width) - K.cx) / K.fx
    yt = (np.arange(K.height) - K.cy) / K.fy
    z = np.where(cloud.valid, cloud.points[..., 2], 0.0)
    z = _inverse_depth_fit(z, cloud.valid, xt, yt, int(radius_px), float(max_depth_gap))
    pts = np.where(cloud.valid[..., None], pixel_rays(K) * z[..., None], 0.0)
    return replace(cloud, points=pts)


def cloud_from_image(img: RangeImage, K: CameraIntrinsics, radius_px: int = 2,
                     max_depth_gap: float = 0.05, z_min: float = DEFAULT_Z_MIN,
                     z_max: float = DEFAULT_Z_MAX, smooth_px: int = 0) -> OrganizedCloud:
    cloud = smooth_depth(backproject(img, K, z_min, z_max), smooth_px, max_depth_gap)
    return estimate_normals(cloud, radius_px, max_depth_gap)
