"""Ray-cast parametric scenes into range images with per-face ground truth.

Every primitive carries one surface id per face so that a patch
association can be judged correct when both patches lie on the same
physical face.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .rangeio import CameraIntrinsics, RangeImage, pixel_rays
from .transform import RigidTransform, axis_angle, look_at

Pose = RigidTransform

_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    """Finite rectangle in the local xy-plane, normal along local +z."""

    pose: RigidTransform
    size: tuple[float, float]
    surface_id: int

    @property
    def surface_ids(self):
        return (self.surface_id,)

    def intersect(self, o, d):
        t = np.full(d.shape[0], np.inf)
        face = np.zeros(d.shape[0], dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = -o[2] / d[:, 2]
        x = o[0] + tt * d[:, 0]
        y = o[1] + tt * d[:, 1]
        hit = (tt > _EPS) & (np.abs(x) <= self.size[0] / 2) & (np.abs(y) <= self.size[1] / 2)
        t[hit] = tt[hit]
        return t, face


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in its local frame; faces ordered -x,+x,-y,+y,-z,+z."""

    pose: RigidTransform
    size: tuple[float, float, float]
    surface_ids: tuple[int, ...]

    def intersect(self, o, d):
        half = np.asarray(self.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        # rays parallel to a slab and outside it never hit
        par = d == 0
        outside = np.abs(o) > half
        t1 = np.where(par, np.where(outside, np.inf, -np.inf), t1)
        t2 = np.where(par, np.inf, t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        axis = np.argmax(tmin, axis=1)
        tnear = tmin.max(axis=1)
        tfar = tmax.min(axis=1)
        hit = (tnear <= tfar) & (tnear > _EPS)
        rows = np.arange(len(axis))
        enters_positive_face = t1[rows, axis] >= t2[rows, axis]
        face = 2 * axis + enters_positive_face
        t = np.where(hit, tnear, np.inf)
        return t, face


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder along local z; faces: side, bottom (-z), top (+z)."""

    pose: RigidTransform
    radius: float
    height: float
    surface_ids: tuple[int, int, int]

    def intersect(self, o, d):
        n = d.shape[0]
        best = np.full(n, np.inf)
        face = np.zeros(n, dtype=np.int64)
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1])
        c = o[0] ** 2 + o[1] ** 2 - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for root in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                zz = o[2] + root * d[:, 2]
                h = ok & (root > _EPS) & (np.abs(zz) <= self.height / 2) & (root < best)
                best[h] = root[h]
                face[h] = 0
            for k, zc in ((1, -self.height / 2), (2, self.height / 2)):
                tt = (zc - o[2]) / d[:, 2]
                x = o[0] + tt * d[:, 0]
                y = o[1] + tt * d[:, 1]
                h = (tt > _EPS) & (x * x + y * y <= self.radius ** 2) & (tt < best)
                best[h] = tt[h]
                face[h] = k
        return best, face


@dataclass(frozen=True)
class Sphere:
    pose: RigidTransform
    radius: float
    surface_id: int

    @property
    def surface_ids(self):
        return (self.surface_id,)

    def intersect(self, o, d):
        a = np.einsum("ij,ij->i", d, d)
        b = 2 * d @ o
        c = o @ o - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        return np.where(ok, t, np.inf), np.zeros(d.shape[0], dtype=np.int64)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    clip_min: tuple[float, float, float] | None = None
    clip_max: tuple[float, float, float] | None = None

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene has no primitives")
        ids = [s for p in self.primitives for s in p.surface_ids]
        if len(ids) != len(set(ids)):
            raise ValueError("surface ids must be unique across the scene")
        for p in self.primitives:
            dims = getattr(p, "size", None) or (getattr(p, "radius", 1.0), getattr(p, "height", 1.0))
            if min(dims) <= 0:
                raise ValueError("primitive extents must be positive")

    def surface_ids(self) -> list[int]:
        return [s for p in self.primitives for s in p.surface_ids]


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma_at_1m: float = 0.0
    quadratic: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.depth_sigma_at_1m < 0 or not 0 <= self.dropout_rate <= 1:
            raise ValueError("invalid noise parameters")


def render_depth(scene: SceneSpec, K: CameraIntrinsics, pose: RigidTransform,
                 noise: NoiseModel | None = None, seed: int = 0) -> RangeImage:
    """Z-depth image and surface-id grid of ``scene`` seen from camera ``pose``.

    ``pose`` maps camera coordinates to world coordinates.
    """
    rays = pixel_rays(K).reshape(-1, 3)
    n = rays.shape[0]
    depth = np.full(n, np.inf)
    sid = np.full(n, -1, dtype=np.int32)
    dirs_w = pose.apply_vectors(rays)
    for prim in scene.primitives:
        inv = prim.pose.inverse()
        o = inv.apply(pose.translation)
        d = inv.apply_vectors(dirs_w)
        # the ray parameter equals camera z-depth because rays have unit z
        t, face = prim.intersect(o, d)
        closer = t < depth
        depth[closer] = t[closer]
        sid[closer] = np.asarray(prim.surface_ids, dtype=np.int32)[face[closer]]
    hit = np.isfinite(depth)
    if scene.clip_min is not None:
        pts = pose.translation + dirs_w * np.where(hit, depth, 0.0)[:, None]
        inside = np.all((pts >= scene.clip_min) & (pts <= scene.clip_max), axis=1)
        hit &= inside
    depth = np.where(hit, depth, 0.0)
    sid[~hit] = -1
    if noise is not None:
        rng = np.random.default_rng(seed)
        if noise.depth_sigma_at_1m > 0:
            scale = depth ** 2 if noise.quadratic else np.ones_like(depth)
            depth = depth + rng.normal(size=n) * noise.depth_sigma_at_1m * scale
            depth[~hit] = 0.0
            depth = np.clip(depth, 0.0, None)
        if noise.dropout_rate > 0:
            drop = rng.random(n) < noise.dropout_rate
            depth[drop] = 0.0
            sid[drop] = -1
    return RangeImage(depth.reshape(K.height, K.width), sid.reshape(K.height, K.width))


def relative_transform(pose_a: RigidTransform, pose_b: RigidTransform) -> RigidTransform:
    """Transform mapping camera-a coordinates to camera-b coordinates."""
    return pose_b.inverse() @ pose_a


def surface_point_error(scene: SceneSpec, points_world: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Distance of each world point from the analytic surface of its face id."""
    out = np.full(len(points_world), np.inf)
    for prim in scene.primitives:
        local = prim.pose.inverse().apply(points_world)
        for k, s in enumerate(prim.surface_ids):
            m = ids == s
            if not m.any():
                continue
            p = local[m]
            if isinstance(prim, Plane):
                e = np.abs(p[:, 2])
            elif isinstance(prim, Box):
                axis, sign = divmod(k, 2)
                e = np.abs(p[:, axis] - (sign * 2 - 1) * prim.size[axis] / 2)
            elif isinstance(prim, Cylinder):
                if k == 0:
                    e = np.abs(np.hypot(p[:, 0], p[:, 1]) - prim.radius)
                else:
                    e = np.abs(p[:, 2] - (-1 if k == 1 else 1) * prim.height / 2)
            else:
                e = np.abs(np.linalg.norm(p, axis=1) - prim.radius)
            out[m] = e
    return out


# declarative scene files ---------------------------------------------------

def _pose_from(d: dict) -> RigidTransform:
    R = np.eye(3)
    if "rotation" in d:
        R = np.asarray(d["rotation"], dtype=float)
    elif "axis_angle_deg" in d:
        ax = d["axis_angle_deg"]
        R = axis_angle(ax[:3], np.deg2rad(ax[3]))
    elif "quaternion" in d:
        return RigidTransform.from_quaternion(d.get("translation", [0, 0, 0]), d["quaternion"])
    return RigidTransform(R, d.get("translation", [0, 0, 0]))


def pose_from_dict(d: dict) -> RigidTransform:
    """Camera pose from ``{eye, target, up?, roll_deg?}`` or an explicit transform."""
    if "eye" in d:
        return look_at(d["eye"], d["target"], d.get("up", (0, 0, 1)), np.deg2rad(d.get("roll_deg", 0.0)))
    return _pose_from(d)


def scene_from_dict(d: dict) -> SceneSpec:
    prims = []
    for p in d["primitives"]:
        kind = p["type"]
        pose = _pose_from(p)
        if kind == "plane":
            prims.append(Plane(pose, tuple(p["size"]), int(p["id"])))
        elif kind == "box":
            prims.append(Box(pose, tuple(p["size"]), tuple(int(i) for i in p["ids"])))
        elif kind == "cylinder":
            prims.append(Cylinder(pose, float(p["radius"]), float(p["height"]), tuple(int(i) for i in p["ids"])))
        elif kind == "sphere":
            prims.append(Sphere(pose, float(p["radius"]), int(p["id"])))
        else:
            raise ValueError(f"unknown primitive type {kind!r}")
    clip = d.get("clip")
    return SceneSpec(tuple(prims), *(tuple(clip["min"]), tuple(clip["max"])) if clip else (None, None))


def scene_to_dict(scene: SceneSpec) -> dict:
    """Inverse of :func:`scene_from_dict`, poses as explicit rotations."""
    prims = []
    for p in scene.primitives:
        d = {"rotation": p.pose.rotation.tolist(), "translation": p.pose.translation.tolist()}
        if isinstance(p, Plane):
            d.update(type="plane", size=[float(x) for x in p.size], id=int(p.surface_id))
        elif isinstance(p, Box):
            d.update(type="box", size=[float(x) for x in p.size], ids=[int(i) for i in p.surface_ids])
        elif isinstance(p, Cylinder):
            d.update(type="cylinder", radius=float(p.radius), height=float(p.height),
                     ids=[int(i) for i in p.surface_ids])
        else:
            d.update(type="sphere", radius=float(p.radius), id=int(p.surface_id))
        prims.append(d)
    out = {"primitives": prims}
    if scene.clip_min is not None:
        out["clip"] = {"min": [float(x) for x in scene.clip_min], "max": [float(x) for x in scene.clip_max]}
    return out


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        return scene_from_dict(yaml.safe_load(f))


# procedural scenes for tests and benchmarks ------------------------------

@dataclass
class _Ids:
    next: int = 0
    taken: list = field(default_factory=list)

    def take(self, n=1):
        out = tuple(range(self.next, self.next + n))
        self.next += n
        return out


def random_room_scene(rng: np.random.Generator, room=(6.0, 5.0, 2.6), n_objects: int = 9) -> SceneSpec:
    """A walled room with randomly placed boxes, cylinders and spheres.

    World frame: z up, floor at z = 0, room centered on the origin.
    """
    ids = _Ids()
    L, W, Hh = room
    prims = [
        Plane(RigidTransform.identity(), (L, W), ids.take()[0]),
        Plane(RigidTransform(axis_angle([1, 0, 0], np.pi / 2), [0, W / 2, Hh / 2]), (L, Hh), ids.take()[0]),
        Plane(RigidTransform(axis_angle([1, 0, 0], -np.pi / 2), [0, -W / 2, Hh / 2]), (L, Hh), ids.take()[0]),
        Plane(RigidTransform(axis_angle([0, 1, 0], np.pi / 2), [L / 2, 0, Hh / 2]), (Hh, W), ids.take()[0]),
        Plane(RigidTransform(axis_angle([0, 1, 0], -np.pi / 2), [-L / 2, 0, Hh / 2]), (Hh, W), ids.take()[0]),
    ]
    placed = []
    attempts = 0
    while len(placed) < n_objects and attempts < 500:
        attempts += 1
        kind = rng.choice(["box", "box", "box", "cylinder", "sphere"])
        xy = rng.uniform([-L / 2 + 0.6, -W / 2 + 0.6], [L / 2 - 0.6, W / 2 - 0.6])
        if kind == "box":
            size = rng.uniform([0.3, 0.3, 0.25], [1.1, 0.9, 1.3])
            rad = 0.5 * np.hypot(size[0], size[1])
        elif kind == "cylinder":
            r, h = rng.uniform(0.15, 0.4), rng.uniform(0.3, 1.2)
            rad = r
        else:
            r = rng.uniform(0.2, 0.45)
            rad = r
        if any(np.hypot(*(xy - q)) < rad + qr + 0.15 for q, qr in placed):
            continue
        placed.append((xy, rad))
        yaw = axis_angle([0, 0, 1], rng.uniform(0, np.pi))
        if kind == "box":
            prims.append(Box(RigidTransform(yaw, [xy[0], xy[1], size[2] / 2]), tuple(size), ids.take(6)))
        elif kind == "cylinder":
            prims.append(Cylinder(RigidTransform(yaw, [xy[0], xy[1], h / 2]), r, h, ids.take(3)))
        else:
            prims.append(Sphere(RigidTransform(np.eye(3), [xy[0], xy[1], r]), r, ids.take()[0]))
    return SceneSpec(tuple(prims))


def view_overlap(scene: SceneSpec, K: CameraIntrinsics, pose_a: RigidTransform,
                 pose_b: RigidTransform, tol: float = 0.02) -> float:
    """Surface-area fraction of view a that is also visible in view b."""
    from .rangeio import backproject, project

    if K.width > 160:
        K = K.scaled(160 / K.width)
    ia = render_depth(scene, K, pose_a)
    ib = render_depth(scene, K, pose_b)
    ca = backproject(ia, K, 0.0, np.inf)
    z = ca.points[ca.valid][:, 2]
    if len(z) == 0:
        return 0.0
    # per-pixel footprint grows with z^2; slant is ignored at this resolution
    w = z ** 2
    pts = relative_transform(pose_a, pose_b).apply(ca.points[ca.valid])
    uvz = project(pts, K)
    u = np.round(uvz[:, 0]).astype(int)
    v = np.round(uvz[:, 1]).astype(int)
    inside = (uvz[:, 2] > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    seen = np.zeros(len(pts), dtype=bool)
    zb = ib.depth[v[inside], u[inside]]
    seen[inside] = (zb > 0) & (np.abs(zb - uvz[inside, 2]) < tol * np.maximum(zb, 1.0))
    return float(w[seen].sum() / w.sum())


def workspace_scene(rng: np.random.Generator, n_objects: int = 16, extent: float = 3.0,
                    walls: bool = False, margin: float = 0.4) -> SceneSpec:
    """Cluttered floor area: randomly posed boxes, cylinders and spheres.

    World frame: z up, a square platform at z = 0 centered on the origin,
    clutter within ``extent`` meters of its middle.  With ``walls`` two partial
    walls close off one corner.
    """
    ids = _Ids()
    prims = [Plane(RigidTransform.identity(), (extent + 2 * margin,) * 2, ids.take()[0])]
    if walls:
        d = extent * 0.9
        prims.append(Plane(RigidTransform(axis_angle([1, 0, 0], np.pi / 2), [0, d, 1.0]),
                           (2 * d, 2.0), ids.take()[0]))
        prims.append(Plane(RigidTransform(axis_angle([0, 1, 0], -np.pi / 2), [-d, 0, 1.0]),
                           (2.0, 2 * d), ids.take()[0]))
    placed = []
    attempts = 0
    half = extent / 2
    while len(placed) < n_objects and attempts < 1000:
        attempts += 1
        kind = rng.choice(["box", "box", "box", "cylinder", "sphere"])
        xy = rng.uniform(-half, half, 2)
        if kind == "box":
            size = rng.uniform([0.2, 0.2, 0.15], [0.9, 0.7, 0.9])
            rad = 0.5 * np.hypot(size[0], size[1])
        elif kind == "cylinder":
            r, h = rng.uniform(0.1, 0.3), rng.uniform(0.2, 0.9)
            rad = r
        else:
            r = rng.uniform(0.12, 0.35)
            rad = r
        if any(np.hypot(*(xy - q)) < rad + qr + 0.1 for q, qr in placed):
            continue
        placed.append((xy, rad))
        yaw = axis_angle([0, 0, 1], rng.uniform(0, np.pi))
        if kind == "box":
            prims.append(Box(RigidTransform(yaw, [xy[0], xy[1], size[2] / 2]), tuple(size), ids.take(6)))
        elif kind == "cylinder":
            prims.append(Cylinder(RigidTransform(yaw, [xy[0], xy[1], h / 2]), r, h, ids.take(3)))
        else:
            prims.append(Sphere(RigidTransform(np.eye(3), [xy[0], xy[1], r]), r, ids.take()[0]))
    return SceneSpec(tuple(prims))


def random_view_pair(scene: SceneSpec, K: CameraIntrinsics, rng: np.random.Generator,
                     roll_deg: float = 180.0, min_baseline: float = 1.0,
                     overlap=(0.6, 0.8), max_tries: int = 400):
    """Two cameras looking down at the scene center from different azimuths.

    The second camera is rolled by ``roll_deg`` about its optical axis.
    Poses are resampled until the area overlap, taken as the smaller of the
    two directions, falls inside ``overlap``.
    Returns ``(pose_a, pose_b, overlap_fraction)``.
    """
    for _ in range(max_tries):
        target = np.array([*rng.uniform(-0.4, 0.4, 2), 0.2])
        az = rng.uniform(0, 2 * np.pi)
        daz = rng.uniform(np.deg2rad(20), np.deg2rad(75)) * rng.choice([-1, 1])
        eyes = []
        for a in (az, az + daz):
            dist = rng.uniform(2.0, 3.0)
            eyes.append(np.array([dist * np.cos(a), dist * np.sin(a), rng.uniform(1.4, 2.3)]))
        if np.linalg.norm(eyes[0] - eyes[1]) < min_baseline:
            continue
        tb = target + np.r_[rng.normal(scale=0.2, size=2), 0.0]
        pa = look_at(eyes[0], target, roll=np.deg2rad(rng.uniform(-10, 10)))
        pb = look_at(eyes[1], tb, roll=np.deg2rad(roll_deg + rng.uniform(-5, 5)) if roll_deg else 0.0)
        ov = min(view_overlap(scene, K, pa, pb), view_overlap(scene, K, pb, pa))
        if overlap[0] <= ov <= overlap[1]:
            return pa, pb, ov
    raise RuntimeError("could not sample a view pair with the requested overlap")
