"""Command line pipeline: load or synthesize view pairs, associate patches,
estimate the relative transform and write reports.

Subcommands: ``associate``, ``benchmark``, ``synth``, ``selftest``.  Exit
codes: 0 success, 2 estimation failure, 1 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .assoc import (
    AssociationSet,
    association_points,
    association_precision,
    associate,
    estimate_transform_ransac,
    evaluate,
    EvalReport,
    ransac_min_inliers,
    volumetric_downsample,
)
from .export import decomposition_points, save_decomposition, save_view_features, write_ply
from .geometry import view_features
from .matching import EditCosts, MatchTolerances, order_view
from .rangeio import (
    CameraIntrinsics,
    RangeImage,
    RangeIOError,
    RAW_ID_MAGIC,
    cloud_from_image,
    load_range_image,
    read_raw,
    save_png16,
    write_raw,
)
from .segment import SegmentParams, decompose
from .synth import (
    NoiseModel,
    load_scene,
    pose_from_dict,
    random_view_pair,
    relative_transform,
    render_depth,
    scene_to_dict,
    workspace_scene,
)
from .transform import RigidTransform, look_at

log = logging.getLogger("patchassoc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ESTIMATION_FAILED = 2

DEFAULTS = {
    "input": {
        "mode": "synthetic",        # synthetic | dataset
        "depth_a": None,
        "depth_b": None,
        "ids_a": None,              # optional surface-id grids (raw int32)
        "ids_b": None,
        "format": "png16",          # png16 | pgm | raw-f32
        "truth": None,              # 4x4 matrix file mapping view a into view b
        "timestamp": 0.0,
        "scene": None,              # scene YAML; None draws a random workspace
        "scene_seed": 0,
        "pose_a": None,             # {eye, target, roll_deg} or explicit transform
        "pose_b": None,
        "roll_deg": 180.0,
        "min_baseline": 1.0,
        "overlap": [0.6, 0.8],
    },
    "intrinsics": {
        "fx": 525.0, "fy": 525.0, "cx": 319.5, "cy": 239.5,
        "width": 640, "height": 480, "depth_scale": 5000.0,
    },
    "noise": {"depth_sigma_at_1m": 0.0, "dropout_rate": 0.0},
    "normals": {"radius_px": 2, "smooth_px": 0, "max_depth_gap": 0.05, "z_min": 0.3, "z_max": 8.0},
    "segment": {
        "angle_thresh_deg": 20.0, "depth_gap": 0.03, "curvature_thresh": 0.05,
        "min_points": 40, "target_area": 0.035, "kmeans_iters": 15, "kmeans_tol": 1e-4,
    },
    "features": {"e_r": 0.02, "e_theta_deg": 5.0, "k": None},  # k None: full neighborhoods
    "matching": {
        "r_dev": 0.04, "theta_dev_deg": 10.0, "layout": "feature",
        "insert": 1.0, "delete": 1.0, "replace": float("inf"), "transpose": 0.0,
    },
    "assoc": {"C": 75, "lambda": 0.65, "mutual": False, "downsample_voxel": None},
    "ransac": {"inlier_thresh": 0.05, "iterations": 500},
    "benchmark": {"skip": [10], "start_stride": 10, "max_pairs": 20, "max_time_gap": 0.02},
    "output": {"dir": "out", "ply": True, "sidecars": False},
    "seed": 0,
    "threads": None,
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# configuration --------------------------------------------------------------

def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _merge(base: dict, over: dict, path: str = "") -> None:
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k!s}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path}{k} must be a mapping")
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def set_key(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted}")
        node = node[p]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key {dotted}")
    node[leaf] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file at ``path``, then dotted-key overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        _merge(cfg, data)
    for k, v in (overrides or {}).items():
        set_key(cfg, k, v)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        intrinsics_from(cfg)
        segment_params(cfg)
        edit_costs(cfg)
        tolerances(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["input"]["mode"] not in ("synthetic", "dataset"):
        raise ConfigError(f"input.mode must be 'synthetic' or 'dataset', got {cfg['input']['mode']!r}")
    a = cfg["assoc"]
    if a["C"] is not None and int(a["C"]) < 1:
        raise ConfigError("assoc.C must be at least 1")
    if not 0 <= float(a["lambda"]) <= 1:
        raise ConfigError("assoc.lambda must lie in [0, 1]")
    if cfg["features"]["k"] is not None and int(cfg["features"]["k"]) < 1:
        raise ConfigError("features.k must be positive or null")
    n = cfg["normals"]
    if int(n["radius_px"]) < 1 or int(n["smooth_px"]) < 0 or float(n["max_depth_gap"]) <= 0:
        raise ConfigError("normals.radius_px must be >= 1, normals.smooth_px >= 0, normals.max_depth_gap > 0")
    if cfg["ransac"]["iterations"] < 1 or cfg["ransac"]["inlier_thresh"] <= 0:
        raise ConfigError("ransac.iterations and ransac.inlier_thresh must be positive")


def intrinsics_from(cfg) -> CameraIntrinsics:
    c = cfg["intrinsics"]
    return CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                            int(c["width"]), int(c["height"]), float(c["depth_scale"]))


def segment_params(cfg) -> SegmentParams:
    s = cfg["segment"]
    return SegmentParams(
        angle_thresh=np.deg2rad(float(s["angle_thresh_deg"])), depth_gap=float(s["depth_gap"]),
        curvature_thresh=float(s["curvature_thresh"]), min_points=int(s["min_points"]),
        target_area=float(s["target_area"]), kmeans_iters=int(s["kmeans_iters"]),
        kmeans_tol=float(s["kmeans_tol"]), seed=int(cfg["seed"]),
    )


def edit_costs(cfg) -> EditCosts:
    m = cfg["matching"]
    return EditCosts(float(m["insert"]), float(m["delete"]), float(m["replace"]), float(m["transpose"]))


def tolerances(cfg) -> MatchTolerances:
    m = cfg["matching"]
    return MatchTolerances(float(m["r_dev"]), np.deg2rad(float(m["theta_dev_deg"])), m["layout"])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not np.isfinite(x):
            return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
        return x
    return x


# pipeline -------------------------------------------------------------------

@dataclass
class PreparedView:
    image: RangeImage
    cloud: object
    decomposition: object
    features: object
    timings: dict = field(default_factory=dict)


def prepare_view(img: RangeImage, cfg: dict, name: str = "view") -> PreparedView:
    K = intrinsics_from(cfg)
    n = cfg["normals"]
    t = {}
    t0 = time.perf_counter()
    try:
        cloud = cloud_from_image(img, K, int(n["radius_px"]), float(n["max_depth_gap"]),
                                 float(n["z_min"]), float(n["z_max"]), int(n["smooth_px"]))
    except ValueError as exc:
        raise StageError("normals", f"{name}: {exc}") from exc
    t["normals"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        dec = decompose(cloud, segment_params(cfg))
    except ValueError as exc:
        raise StageError("segment", f"{name}: {exc}") from exc
    t["segment"] = time.perf_counter() - t0
    if len(dec) < 3:
        raise StageError("segment", f"{name}: only {len(dec)} patches; need at least 3")
    t0 = time.perf_counter()
    f = cfg["features"]
    e_theta = np.deg2rad(float(f["e_theta_deg"]))
    try:
        vf = view_features(dec.centroids, dec.normals, dec.ids,
                           None if f["k"] is None else int(f["k"]), e_theta)
    except ValueError as exc:
        raise StageError("features", f"{name}: {exc}") from exc
    vf = order_view(vf, float(f["e_r"]), e_theta)
    t["features"] = time.perf_counter() - t0
    return PreparedView(img, cloud, dec, vf, t)


def _read_matrix(path) -> RigidTransform:
    p = Path(path)
    if not p.is_file():
        raise RangeIOError(f"truth file not found: {p}")
    text = p.read_text()
    try:
        data = json.loads(text)
        M = np.asarray(data["matrix"] if isinstance(data, dict) else data, dtype=float)
    except (ValueError, KeyError):
        M = np.array(text.split(), dtype=float)
    return RigidTransform.from_matrix(M.reshape(4, 4))


def synthetic_pair(cfg: dict):
    """Render the configured synthetic pair: ``(img_a, img_b, truth, info)``."""
    K = intrinsics_from(cfg)
    inp = cfg["input"]
    rng = np.random.default_rng(int(inp["scene_seed"]))
    scene = load_scene(inp["scene"]) if inp["scene"] else workspace_scene(rng)
    if inp["pose_a"] is not None and inp["pose_b"] is not None:
        pa, pb = pose_from_dict(inp["pose_a"]), pose_from_dict(inp["pose_b"])
        overlap = None
    else:
        pa, pb, overlap = random_view_pair(scene, K, rng, float(inp["roll_deg"]),
                                           float(inp["min_baseline"]), tuple(inp["overlap"]))
    nz = cfg["noise"]
    noise = None
    if nz["depth_sigma_at_1m"] or nz["dropout_rate"]:
        noise = NoiseModel(float(nz["depth_sigma_at_1m"]), True, float(nz["dropout_rate"]))
    seed = int(cfg["seed"])
    img_a = render_depth(scene, K, pa, noise, seed=2 * seed)
    img_b = render_depth(scene, K, pb, noise, seed=2 * seed + 1)
    info = {"scene_primitives": len(scene.primitives), "overlap": overlap,
            "pose_a": pa.matrix(), "pose_b": pb.matrix()}
    return img_a, img_b, relative_transform(pa, pb), info


def dataset_pair(cfg: dict):
    inp = cfg["input"]
    if not inp["depth_a"] or not inp["depth_b"]:
        raise ConfigError("dataset mode needs input.depth_a and input.depth_b")
    scale = float(cfg["intrinsics"]["depth_scale"])
    imgs = []
    for key in ("a", "b"):
        img = load_range_image(inp[f"depth_{key}"], inp["format"], scale)
        if inp[f"ids_{key}"]:
            ids = read_raw(inp[f"ids_{key}"], RAW_ID_MAGIC, np.int32)
            if ids.shape != img.shape:
                raise RangeIOError(f"id grid {inp[f'ids_{key}']} does not match its depth image")
            img = RangeImage(img.depth, ids)
        imgs.append(img)
    truth = _read_matrix(inp["truth"]) if inp["truth"] else None
    return imgs[0], imgs[1], truth, {"depth_a": str(inp["depth_a"]), "depth_b": str(inp["depth_b"])}


def load_pair(cfg: dict):
    try:
        if cfg["input"]["mode"] == "synthetic":
            return synthetic_pair(cfg)
        return dataset_pair(cfg)
    except (OSError, RangeIOError, ConfigError, yaml.YAMLError, KeyError) as exc:
        raise StageError("input", str(exc)) from exc
    except RuntimeError as exc:
        raise StageError("synth", str(exc)) from exc


@dataclass
class PairResult:
    report: dict
    associations: AssociationSet
    views: tuple
    estimate: RigidTransform | None
    failure: bool
    error: object = None

    @property
    def exit_code(self) -> int:
        return EXIT_ESTIMATION_FAILED if self.failure else EXIT_OK


def _histogram(values, bins: int = 20) -> dict:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return {"edges": np.round(edges, 6).tolist(), "counts": counts.tolist()}


def _set_threads(n) -> None:
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def run_pair(cfg: dict, pair=None) -> PairResult:
    """Full pipeline on one view pair; nothing is written to disk.

    ``pair`` is ``(img_a, img_b, truth, info)``; by default it comes from
    the configured input.
    """
    _set_threads(cfg["threads"])
    timings = {}
    t0 = time.perf_counter()
    img_a, img_b, truth, info = pair if pair is not None else load_pair(cfg)
    timings["input"] = time.perf_counter() - t0
    va = prepare_view(img_a, cfg, "view a")
    vb = prepare_view(img_b, cfg, "view b")
    for name, v in (("a", va), ("b", vb)):
        for k, t in v.timings.items():
            timings[f"{k}_{name}"] = t

    t0 = time.perf_counter()
    a = cfg["assoc"]
    queries = None
    if a["downsample_voxel"]:
        queries = volumetric_downsample(va.decomposition.centroids, float(a["downsample_voxel"]))
    assoc = associate(va.features, vb.features, None if a["C"] is None else int(a["C"]),
                      float(a["lambda"]), edit_costs(cfg), tolerances(cfg), queries, bool(a["mutual"]))
    timings["associate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    src, dst = association_points(assoc, va.decomposition, vb.decomposition)
    r = cfg["ransac"]
    ransac = estimate_transform_ransac(src, dst, float(r["inlier_thresh"]), int(r["iterations"]), int(cfg["seed"]))
    timings["ransac"] = time.perf_counter() - t0

    d_hat = np.array([p.d_hat for p in assoc])
    report = {
        "version": __version__,
        "config": _jsonable(cfg),
        "input": _jsonable(info),
        "views": {
            name: {"patches": len(v.decomposition), "valid_pixels": int(v.cloud.valid.sum()),
                   "neighborhood_size": int(v.features.k)}
            for name, v in (("a", va), ("b", vb))
        },
        "association": {
            "count": len(assoc),
            "queries": len(va.decomposition) if queries is None else int(len(queries)),
            "d_hat_median": float(np.median(d_hat)) if len(d_hat) else None,
            "d_hat_histogram": _histogram(d_hat),
        },
        "estimate": {
            "failure": bool(ransac.failure),
            "inliers": ransac.n_inliers,
            "min_inliers": ransac_min_inliers(len(assoc)),
            "transform": ransac.transform.matrix().tolist() if ransac.transform is not None else None,
        },
        "error": None,
    }
    if va.image.surface_id is not None and vb.image.surface_id is not None and len(assoc):
        report["association"]["surface_precision"] = association_precision(assoc, va.decomposition, vb.decomposition)
    err = None
    if truth is not None:
        report["truth"] = truth.matrix().tolist()
        if ransac.transform is not None and not ransac.failure:
            err = evaluate(ransac.transform, truth)
            report["error"] = {"translation_m": err.translation, "rotation_deg": err.rotation_deg}
    report["timings"] = {k: round(v, 4) for k, v in sorted(timings.items())}
    report = _jsonable(report)
    return PairResult(report, assoc, (va, vb), ransac.transform, bool(ransac.failure), err)


def traj_line(timestamp: float, T: RigidTransform) -> str:
    q = T.quaternion()
    vals = [*T.translation, *q]
    return f"{timestamp:.6f} " + " ".join(f"{v:.9f}" for v in vals)


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_pair_artifacts(result: PairResult, cfg: dict, out_dir) -> list[str]:
    """Write the pair artifacts atomically into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out_dir.parent))
    try:
        write_report(tmp / "report.json", result.report)
        (tmp / "assoc.txt").write_text(result.associations.to_text())
        va, vb = result.views
        if cfg["output"]["ply"]:
            own = {p.mu: p.mu for p in result.associations}
            partner = {p.mu_prime: p.mu for p in result.associations}
            pa, ca = decomposition_points(va.decomposition, va.cloud.points, own)
            pb, cb = decomposition_points(vb.decomposition, vb.cloud.points, partner)
            write_ply(tmp / "viewA.ply", pa, ca)
            write_ply(tmp / "viewB.ply", pb, cb)
            if result.estimate is not None and not result.failure:
                write_ply(tmp / "merged.ply", np.vstack([result.estimate.apply(pa), pb]), np.vstack([ca, cb]))
        if result.estimate is not None and not result.failure:
            ts = float(cfg["input"]["timestamp"])
            (tmp / "traj.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + traj_line(ts, result.estimate) + "\n")
        if cfg["output"]["sidecars"]:
            for name, v in (("A", va), ("B", vb)):
                save_decomposition(tmp / f"decomposition{name}.npz", v.decomposition)
                save_view_features(tmp / f"features{name}.npz", v.features)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for f in sorted(tmp.iterdir()):
            shutil.move(str(f), out_dir / f.name)
            written.append(f.name)
        return written
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


# benchmark sequences ---------------------------------------------------------

def read_file_list(path) -> list[tuple[float, str]]:
    """``timestamp value...`` lines; ``#`` starts a comment."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        out.append((float(parts[0]), " ".join(parts[1:])))
    return out


def read_trajectory(path) -> tuple[np.ndarray, list[RigidTransform]]:
    stamps, poses = [], []
    for t, rest in read_file_list(path):
        v = np.array(rest.split(), dtype=float)
        if len(v) != 7:
            raise RangeIOError(f"{path}: expected 'timestamp tx ty tz qx qy qz qw' lines")
        stamps.append(t)
        poses.append(RigidTransform.from_quaternion(v[:3], v[3:]))
    return np.array(stamps), poses


def associate_stamps(query: np.ndarray, reference: np.ndarray, max_gap: float) -> np.ndarray:
    """Index of the nearest reference timestamp per query, -1 beyond ``max_gap``."""
    reference = np.asarray(reference, dtype=float)
    if len(reference) == 0:
        return np.full(len(query), -1)
    order = np.argsort(reference, kind="stable")
    ref = reference[order]
    pos = np.clip(np.searchsorted(ref, query), 1, max(len(ref) - 1, 1))
    lo = np.clip(pos - 1, 0, len(ref) - 1)
    hi = np.clip(pos, 0, len(ref) - 1)
    pick = np.where(np.abs(ref[lo] - query) <= np.abs(ref[hi] - query), lo, hi)
    idx = order[pick]
    return np.where(np.abs(reference[idx] - query) <= max_gap, idx, -1)


def benchmark_pairs(n_frames: int, skip: int, stride: int, max_pairs: int | None) -> list[tuple[int, int]]:
    starts = range(0, max(n_frames - skip, 0), max(stride, 1))
    pairs = [(i, i + skip) for i in starts]
    return pairs[:max_pairs] if max_pairs else pairs


def run_benchmark(cfg: dict, seq_dir, skip: int):
    """Pairs ``skip`` frames apart from regularly spaced starts.

    Returns ``(EvalReport, per-pair records)``.  Without a ground-truth
    trajectory the records carry association statistics only.
    """
    seq_dir = Path(seq_dir)
    depth_list = seq_dir / "depth.txt"
    if not depth_list.is_file():
        raise StageError("input", f"{depth_list} not found")
    frames = read_file_list(depth_list)
    if not frames:
        raise StageError("input", f"{depth_list} lists no frames")
    stamps = np.array([t for t, _ in frames])
    gt_path = seq_dir / "groundtruth.txt"
    gt_idx = None
    if gt_path.is_file():
        gt_stamps, gt_poses = read_trajectory(gt_path)
        gt_idx = associate_stamps(stamps, gt_stamps, float(cfg["benchmark"]["max_time_gap"]))
    else:
        log.warning("no groundtruth.txt in %s: association-only mode", seq_dir)
    b = cfg["benchmark"]
    report = EvalReport()
    records = []
    scale = float(cfg["intrinsics"]["depth_scale"])
    fmt = cfg["input"]["format"]
    for i, j in benchmark_pairs(len(frames), int(skip), int(b["start_stride"]), b["max_pairs"]):
        truth = None
        if gt_idx is not None:
            if gt_idx[i] < 0 or gt_idx[j] < 0:
                log.info("frames %d/%d have no pose within the time gap; skipped", i, j)
                continue
            truth = relative_transform(gt_poses[gt_idx[i]], gt_poses[gt_idx[j]])
        try:
            img_a = load_range_image(seq_dir / frames[i][1], fmt, scale)
            img_b = load_range_image(seq_dir / frames[j][1], fmt, scale)
        except RangeIOError as exc:
            raise StageError("input", str(exc)) from exc
        res = run_pair(cfg, (img_a, img_b, truth, {"frame_a": frames[i][1], "frame_b": frames[j][1]}))
        rec = {"frame_a": i, "frame_b": j, "timestamp": float(stamps[j]),
               "associations": len(res.associations), "failure": res.failure,
               "transform": res.report["estimate"]["transform"], "error": res.report["error"],
               "timings": res.report["timings"]}
        records.append(rec)
        if truth is not None:
            report.add(res.error, res.failure)
    return report, records


def benchmark_table(summaries: dict) -> str:
    skips = list(summaries)
    rows = [("FramesSkipped", [str(s) for s in skips])]
    fmt = lambda v: "n/a" if v is None or not np.isfinite(v) else f"{v:.4f}"
    rows.append(("Trans_RMSE", [fmt(summaries[s]["translation_rmse_m"]) for s in skips]))
    rows.append(("Rot_RMSE", [fmt(summaries[s]["rotation_rmse_deg"]) for s in skips]))
    rows.append(("Fail Rate", [fmt(summaries[s]["fail_rate"]) for s in skips]))
    return "\n".join(f"{name:<14}" + "".join(f"{c:>10}" for c in cells) for name, cells in rows)


# synthetic data generation --------------------------------------------------

def synth_pair_files(cfg: dict, out_dir) -> list[str]:
    """Render a pair and write it as a dataset-mode input.

    The generated ``pair.yaml`` reads the float32 raw depth; the 16-bit PNGs
    are for viewing and for tools expecting the benchmark format.
    """
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    img_a, img_b, truth, info = synthetic_pair(cfg)
    scale = float(cfg["intrinsics"]["depth_scale"])
    for name, img in (("A", img_a), ("B", img_b)):
        save_png16(out_dir / f"depth{name}.png", img.depth, scale)
        write_raw(out_dir / f"depth{name}.raw", img.depth.astype(np.float32))
        write_raw(out_dir / f"ids{name}.raw", img.surface_id, RAW_ID_MAGIC)
    (out_dir / "truth.json").write_text(json.dumps({"matrix": truth.matrix().tolist()}, indent=2) + "\n")
    (out_dir / "poses.json").write_text(json.dumps(_jsonable(info), indent=2, sort_keys=True) + "\n")
    pair_cfg = {
        "input": {"mode": "dataset", "format": "raw-f32",
                  "depth_a": str(out_dir / "depthA.raw"), "depth_b": str(out_dir / "depthB.raw"),
                  "ids_a": str(out_dir / "idsA.raw"), "ids_b": str(out_dir / "idsB.raw"),
                  "truth": str(out_dir / "truth.json")},
        "intrinsics": {**cfg["intrinsics"], "depth_scale": 1.0},
    }
    (out_dir / "pair.yaml").write_text(yaml.safe_dump(pair_cfg, sort_keys=False))
    return ["depthA.png", "depthB.png", "depthA.raw", "depthB.raw", "idsA.raw", "idsB.raw", "truth.json", "poses.json", "pair.yaml"]


def synth_sequence(cfg: dict, out_dir, n_frames: int, rate: float = 30.0,
                   deg_per_frame: float = 1.0) -> None:
    """Orbit a camera around a random workspace; writes a benchmark-format sequence."""
    out_dir = Path(out_dir)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    K = intrinsics_from(cfg)
    inp = cfg["input"]
    rng = np.random.default_rng(int(inp["scene_seed"]))
    scene = load_scene(inp["scene"]) if inp["scene"] else workspace_scene(rng)
    az0 = rng.uniform(0, 2 * np.pi)
    depth_lines, gt_lines = [], []
    for f in range(n_frames):
        t = 1.0 + f / rate
        az = az0 + np.deg2rad(deg_per_frame) * f
        eye = [2.5 * np.cos(az), 2.5 * np.sin(az), 1.8 + 0.1 * np.sin(0.05 * f)]
        pose = look_at(eye, [0.0, 0.0, 0.2])
        img = render_depth(scene, K, pose)
        name = f"depth/{t:.6f}.png"
        save_png16(out_dir / name, img.depth, float(cfg["intrinsics"]["depth_scale"]))
        depth_lines.append(f"{t:.6f} {name}")
        gt_lines.append(traj_line(t, pose))
    (out_dir / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    (out_dir / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n")
    (out_dir / "scene.yaml").write_text(yaml.safe_dump(scene_to_dict(scene), sort_keys=False))


# command line ----------------------------------------------------------------

def _parse_value(text: str):
    return yaml.safe_load(text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    g = p.add_argument_group("configuration keys (override the config file)")
    for key, default in flatten(DEFAULTS).items():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", type=_parse_value, default=argparse.SUPPRESS,
                       metavar="VALUE", help=f"default: {default!r}")


def _config_from_args(args) -> dict:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    return load_config(args.config, overrides)


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; exit code 2 means estimation failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error [config]: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="patchassoc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("associate", help="associate the patches of one view pair")
    _add_config_flags(p)

    p = sub.add_parser("benchmark", help="evaluate frame pairs of a depth sequence")
    p.add_argument("sequence", help="directory with depth.txt and optionally groundtruth.txt")
    _add_config_flags(p)

    p = sub.add_parser("synth", help="render a synthetic pair or sequence to disk")
    p.add_argument("out", help="output directory")
    p.add_argument("--frames", type=int, default=0, help="render an N-frame sequence instead of a pair")
    p.add_argument("--deg-per-frame", type=float, default=1.0)
    _add_config_flags(p)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--cases", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    return ap


def _cmd_associate(cfg) -> int:
    res = run_pair(cfg)
    written = write_pair_artifacts(res, cfg, cfg["output"]["dir"])
    rep = res.report
    print(f"patches {rep['views']['a']['patches']}/{rep['views']['b']['patches']}  "
          f"associations {rep['association']['count']}  inliers {rep['estimate']['inliers']}")
    if res.failure:
        print("estimation failed: too few consistent associations")
    elif rep["error"]:
        print(f"error vs truth: {rep['error']['translation_m']:.4f} m  {rep['error']['rotation_deg']:.3f} deg")
    print(f"wrote {', '.join(written)} to {cfg['output']['dir']}")
    return res.exit_code


def _cmd_benchmark(cfg, sequence) -> int:
    skips = cfg["benchmark"]["skip"]
    skips = [skips] if isinstance(skips, int) else list(skips)
    summaries, all_records = {}, {}
    for s in skips:
        rep, records = run_benchmark(cfg, sequence, int(s))
        summaries[s] = rep.summary()
        all_records[str(s)] = records
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", _jsonable({"version": __version__, "config": cfg,
                                                 "summary": {str(k): v for k, v in summaries.items()},
                                                 "pairs": all_records}))
    lines = ["# timestamp tx ty tz qx qy qz qw (relative transform, frame a into frame b)"]
    for s in skips:
        for r in all_records[str(s)]:
            if r["transform"] is not None and not r["failure"]:
                lines.append(traj_line(r["timestamp"], RigidTransform.from_matrix(np.array(r["transform"]))))
    (out / "traj.txt").write_text("\n".join(lines) + "\n")
    print(benchmark_table(summaries))
    return EXIT_OK


def _cmd_synth(cfg, out, frames, deg_per_frame) -> int:
    if frames > 0:
        synth_sequence(cfg, out, frames, deg_per_frame=deg_per_frame)
        print(f"wrote {frames}-frame sequence to {out}")
    else:
        names = synth_pair_files(cfg, out)
        print(f"wrote {', '.join(names)} to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            from .selftest import run_selftest

            return run_selftest(args.cases, args.seed)
        cfg = _config_from_args(args)
        if args.command == "associate":
            return _cmd_associate(cfg)
        if args.command == "benchmark":
            return _cmd_benchmark(cfg, args.sequence)
        return _cmd_synth(cfg, args.out, args.frames, args.deg_per_frame)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, RangeIOError) as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
