"""Binary sidecars and colored PLY output for decompositions and views."""

from __future__ import annotations

import json

import numpy as np

from .geometry import ViewFeatures
from .segment import Decomposition, Superpixel

GREY = (128, 128, 128)


def patch_colors(ids) -> np.ndarray:
    """One stable RGB color per patch id (golden-ratio hue walk)."""
    ids = np.asarray(ids, dtype=np.int64)
    h = (ids * 0.618033988749895) % 1.0
    s = 0.55 + 0.35 * ((ids * 7) % 3) / 2
    v = np.full(h.shape, 0.95)
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    rgb = np.take_along_axis(table, i[None, ..., None].repeat(3, -1), 0)[0]
    return np.round(rgb * 255).astype(np.uint8)


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(points), dtype=fields)
    rec["x"], rec["y"], rec["z"] = points.T
    if colors is not None:
        c = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = c.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path):
    """Reader for the files :func:`write_ply` produces."""
    with open(path, "rb") as f:
        n = 0
        props = []
        while True:
            line = f.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        dt = [(p, "<f4" if p in "xyz" else "u1") for p in props]
        rec = np.frombuffer(f.read(), dtype=dt, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
    cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) if "red" in props else None
    return pts, cols


def decomposition_points(dec: Decomposition, points: np.ndarray, color_ids=None):
    """Labeled points and their colors.

    ``color_ids`` maps a patch id to the id whose color it takes; patches
    missing from it are drawn grey.  Without it every patch uses its own id.
    """
    lab = dec.labels.ravel()
    sel = np.flatnonzero(lab >= 0)
    pts = points.reshape(-1, 3)[sel]
    ids = dec.ids[lab[sel]]
    if color_ids is None:
        return pts, patch_colors(ids)
    lut = np.full(len(dec), -1, dtype=np.int64)
    for k, v in color_ids.items():
        lut[k] = v
    mapped = lut[ids]
    cols = np.empty((len(ids), 3), dtype=np.uint8)
    cols[:] = GREY
    hit = mapped >= 0
    cols[hit] = patch_colors(mapped[hit])
    return pts, cols


def save_decomposition(path, dec: Decomposition) -> None:
    np.savez_compressed(
        path,
        labels=dec.labels.astype(np.int32),
        ids=dec.ids,
        centroids=dec.centroids,
        normals=dec.normals,
        areas=np.array([s.area for s in dec.superpixels]),
        component_ids=np.array([s.component_id for s in dec.superpixels], dtype=np.int64),
        surface_ids=dec.surface_ids,
        meta=np.array(json.dumps(dec.meta, sort_keys=True)),
    )


def load_decomposition(path) -> Decomposition:
    with np.load(path) as z:
        labels = z["labels"].astype(np.int64)
        flat = labels.ravel()
        order = np.argsort(flat, kind="stable")
        starts = np.searchsorted(flat[order], np.arange(len(z["ids"]) + 1))
        sps = [
            Superpixel(int(z["ids"][i]), np.sort(order[starts[i]:starts[i + 1]]), z["centroids"][i],
                       z["normals"][i], float(z["areas"][i]), int(z["component_ids"][i]),
                       int(z["surface_ids"][i]))
            for i in range(len(z["ids"]))
        ]
        return Decomposition(sps, labels, json.loads(str(z["meta"])))


def save_view_features(path, view: ViewFeatures) -> None:
    np.savez_compressed(path, ids=view.ids, neighbors=view.neighbors, features=view.features,
                        raw_means=view.raw_means, scale=view.scale)


def load_view_features(path) -> ViewFeatures:
    with np.load(path) as z:
        return ViewFeatures(z["ids"], z["neighbors"], z["features"], z["raw_means"], z["scale"])
