"""Dataset ingestion, IoU-threshold curves, part-segmentation transfer, and
feature stability reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GeodesicMatrix, TriangleMesh, farthest_point_sample, geodesic_distances, load_mesh
from .keypoints import AnnotatedShape, KeypointPrediction
from .raster import rasterize
from .views import DEFAULT_INTRINSICS, Intrinsics, sample_viewpoints

DEFAULT_THRESHOLDS = np.round(np.arange(0.0, 0.1000001, 0.005), 6)
CSV_FLOAT = "%.6g"


@dataclass
class ShapeRecord:
    shape_id: str
    mesh_path: Path
    keypoints: list[tuple[int, np.ndarray]]  # (semantic id, xyz)


@dataclass
class KeypointDatasetIndex:
    classes: dict[str, list[ShapeRecord]]
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (shape id, reason)

    def __len__(self) -> int:
        return sum(len(v) for v in self.classes.values())


def load_annotations(annotation_path, mesh_dir) -> KeypointDatasetIndex:
    """Ingest the public keypoint annotation JSON layout.

    Expects a list of records carrying ``model_id`` (or ``shape_id``),
    optional ``class_id``, and ``keypoints`` with ``xyz`` and ``semantic_id``.
    Meshes resolve to ``mesh_dir/<model_id>.obj``; shapes whose mesh file is
    missing are skipped and reported.
    """
    mesh_dir = Path(mesh_dir)
    records = json.loads(Path(annotation_path).read_text())
    if not isinstance(records, list):
        raise ValueError(f"{annotation_path}: expected a JSON list of shape records")
    classes: dict[str, list[ShapeRecord]] = {}
    skipped: list[tuple[str, str]] = []
    for rec in records:
        shape_id = rec.get("model_id") or rec.get("shape_id")
        if not shape_id:
            skipped.append(("?", "record without model_id"))
            continue
        class_name = str(rec.get("class_id", "default"))
        mesh_path = mesh_dir / f"{shape_id}.obj"
        if not mesh_path.exists():
            skipped.append((shape_id, f"missing mesh {mesh_path.name}"))
            continue
        kps = []
        for kp in rec.get("keypoints", []):
            kps.append((int(kp["semantic_id"]), np.asarray(kp["xyz"], dtype=np.float64)))
        classes.setdefault(class_name, []).append(
            ShapeRecord(shape_id=str(shape_id), mesh_path=mesh_path, keypoints=kps)
        )
    return KeypointDatasetIndex(classes=classes, skipped=skipped)


def snap_annotations(record: ShapeRecord, mesh: TriangleMesh) -> tuple[AnnotatedShape, np.ndarray]:
    """Snap annotation positions to the nearest mesh vertex (Euclidean).

    Returns the annotated shape and the per-keypoint snap distances.
    """
    keypoints: dict[int, tuple[int, np.ndarray]] = {}
    snaps = []
    for sid, xyz in record.keypoints:
        d = np.linalg.norm(mesh.vertices - xyz, axis=1)
        v = int(np.argmin(d))
        keypoints[sid] = (v, xyz)
        snaps.append(float(d[v]))
    return AnnotatedShape(shape_id=record.shape_id, keypoints=keypoints), np.asarray(snaps)


# ---------------------------------------------------------------------------
# keypoint IoU

def greedy_match(distances: np.ndarray, threshold: float) -> int:
    """One-to-one greedy matching by ascending distance; returns matched count."""
    n_pred, n_gt = distances.shape
    order = np.argsort(distances, axis=None, kind="stable")
    used_pred = np.zeros(n_pred, dtype=bool)
    used_gt = np.zeros(n_gt, dtype=bool)
    matched = 0
    for flat in order:
        i, j = divmod(int(flat), n_gt)
        if distances[i, j] >= threshold:
            break
        if not used_pred[i] and not used_gt[j]:
            used_pred[i] = used_gt[j] = True
            matched += 1
    return matched


def optimal_match(distances: np.ndarray, threshold: float) -> int:
    """Exhaustive maximum-cardinality matching under the threshold (oracle)."""
    n_pred, n_gt = distances.shape
    admissible = [np.flatnonzero(distances[i] < threshold) for i in range(n_pred)]

    def best(i: int, used: int) -> int:
        if i == n_pred:
            return 0
        top = best(i + 1, used)
        for j in admissible[i]:
            if not used & (1 << int(j)):
                top = max(top, 1 + best(i + 1, used | (1 << int(j))))
        return top

    return best(0, 0)


def keypoint_iou(
    pred_vertices: np.ndarray,
    gt_vertices: np.ndarray,
    matrix: GeodesicMatrix,
    threshold: float,
) -> float:
    """IoU = M / (|pred| + |gt| - M) with M the greedy one-to-one match count.

    ``matrix`` must be a normalized GeodesicMatrix covering both vertex sets.
    """
    pred_vertices = np.asarray(pred_vertices, dtype=np.int64)
    gt_vertices = np.asarray(gt_vertices, dtype=np.int64)
    pos = {int(v): i for i, v in enumerate(matrix.source_ids)}
    rows = [pos[int(v)] for v in pred_vertices]
    cols = [pos[int(v)] for v in gt_vertices]
    d = matrix.values[np.ix_(rows, cols)]
    matched = greedy_match(d, threshold)
    denom = len(pred_vertices) + len(gt_vertices) - matched
    return matched / denom if denom else 0.0


@dataclass
class IoUCurve:
    thresholds: np.ndarray
    per_shape: dict[str, np.ndarray]      # shape id -> IoU per threshold
    class_of: dict[str, str] = field(default_factory=dict)

    def aggregate(self) -> np.ndarray:
        if not self.per_shape:
            return np.zeros_like(self.thresholds)
        return np.mean(list(self.per_shape.values()), axis=0)

    def class_means(self) -> dict[str, np.ndarray]:
        out: dict[str, list[np.ndarray]] = {}
        for sid, curve in self.per_shape.items():
            out.setdefault(self.class_of.get(sid, "default"), []).append(curve)
        return {c: np.mean(v, axis=0) for c, v in out.items()}


def iou_curve(
    shape_entries: list[tuple[str, np.ndarray, np.ndarray, GeodesicMatrix]],
    thresholds: np.ndarray = DEFAULT_THRESHOLDS,
    class_of: dict[str, str] | None = None,
) -> IoUCurve:
    """Per-threshold IoU for (shape id, pred vertices, gt vertices, matrix) entries."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if (np.diff(thresholds) <= 0).any():
        raise ValueError("thresholds must be strictly increasing")
    per_shape = {}
    for shape_id, pred, gt, matrix in shape_entries:
        per_shape[shape_id] = np.asarray(
            [keypoint_iou(pred, gt, matrix, t) for t in thresholds]
        )
    return IoUCurve(thresholds=thresholds, per_shape=per_shape, class_of=class_of or {})


def write_iou_csv(path, curve: IoUCurve) -> None:
    lines = ["class,threshold,iou"]
    for cname, values in sorted(curve.class_means().items()):
        for t, v in zip(curve.thresholds, values):
            lines.append(f"{cname},{CSV_FLOAT % t},{CSV_FLOAT % v}")
    for t, v in zip(curve.thresholds, curve.aggregate()):
        lines.append(f"aggregate,{CSV_FLOAT % t},{CSV_FLOAT % v}")
    Path(path).write_text("\n".join(lines) + "\n")


def mean_relative_improvement(ours: np.ndarray, baseline: np.ndarray) -> float:
    """Mean over thresholds of (ours - baseline) / baseline, skipping zero baselines."""
    ours = np.asarray(ours, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    ok = baseline > 0
    if not ok.any():
        return math.nan
    return float(np.mean((ours[ok] - baseline[ok]) / baseline[ok]))


# ---------------------------------------------------------------------------
# part-segmentation transfer

def load_part_labels(path) -> np.ndarray:
    """One integer part label per line (the per-point label text layout)."""
    labels = [int(line.split()[0]) for line in Path(path).read_text().splitlines() if line.strip()]
    if not labels:
        raise ValueError(f"{path}: empty label file")
    return np.asarray(labels, dtype=np.int64)


def transfer_labels(
    source_features: np.ndarray,
    source_labels: np.ndarray,
    target_features: np.ndarray,
    k_neighbors: int = 1,
) -> np.ndarray:
    """Majority vote over the k nearest source points in cosine distance.

    Vote ties resolve to the label of the single nearest point.
    """
    src = np.asarray(source_features, dtype=np.float64)
    tgt = np.asarray(target_features, dtype=np.float64)
    if src.shape[0] == 0:
        raise ValueError("empty source point set")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError("feature dimensions differ between source and target")
    labels = np.asarray(source_labels, dtype=np.int64)
    k = min(k_neighbors, len(src))

    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(n > 0, n, 1.0)

    sim = unit(tgt) @ unit(src).T
    out = np.zeros(len(tgt), dtype=np.int64)
    for i in range(len(tgt)):
        order = np.argsort(-sim[i], kind="stable")[:k]
        votes = labels[order]
        uniq, counts = np.unique(votes, return_counts=True)
        winners = uniq[counts == counts.max()]
        out[i] = votes[0] if len(winners) > 1 else winners[0]
    return out


def segmentation_iou(pred_labels: np.ndarray, gt_labels: np.ndarray) -> tuple[dict[int, float], float]:
    """Per-part IoU = TP / (TP + FP + FN), averaged over parts present in either."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    parts = np.union1d(np.unique(pred_labels), np.unique(gt_labels))
    per_part = {}
    for p in parts:
        tp = int(((pred_labels == p) & (gt_labels == p)).sum())
        fp = int(((pred_labels == p) & (gt_labels != p)).sum())
        fn = int(((pred_labels != p) & (gt_labels == p)).sum())
        per_part[int(p)] = tp / (tp + fp + fn) if (tp + fp + fn) else 0.0
    return per_part, float(np.mean(list(per_part.values())))


def segmentation_transfer(
    source_features: np.ndarray,
    source_labels: np.ndarray,
    target_features: np.ndarray,
    k_neighbors: int = 1,
    target_labels: np.ndarray | None = None,
):
    """Label transfer plus (when ground truth is given) the per-part IoU."""
    pred = transfer_labels(source_features, source_labels, target_features, k_neighbors)
    if target_labels is None:
        return pred, None, None
    per_part, mean = segmentation_iou(pred, target_labels)
    return pred, per_part, mean


# ---------------------------------------------------------------------------
# stability reports

def spread_view_order(rig) -> list[int]:
    """Greedy farthest-direction ordering of the rig's views (seed = view 0)."""
    ids = rig.view_ids
    dirs = np.stack([rig.pose(v).eye for v in ids])
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    chosen = [0]
    min_d = np.arccos(np.clip(dirs @ dirs[0], -1, 1))
    for _ in range(len(ids) - 1):
        nxt = int(np.argmax(min_d))
        chosen.append(nxt)
        min_d = np.minimum(min_d, np.arccos(np.clip(dirs @ dirs[nxt], -1, 1)))
    return [ids[i] for i in chosen]


def feature_similarity(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean and stdev of per-point cosine similarity between two feature sets."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    sims = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return float(sims.mean()), float(sims.std())


def _rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def stability_report(
    mesh: TriangleMesh,
    provider_id: str,
    axis: str,
    sweep: np.ndarray,
    n_slices: int = 5,
    distance: float = 1.2,
    intrinsics: Intrinsics = DEFAULT_INTRINSICS,
    sigma: float = 0.003,
    grid: tuple[int, int] = (16, 16),
) -> list[tuple[float, float, float, float]]:
    """Sweep one capture parameter and compare features to the reference run.

    Axes: ``views`` (number of views K, subsets of the rig in farthest-
    direction order, reference = all views), ``distance`` (reference = the
    smallest swept distance), ``rotation`` (mesh rotated about +Y, features
    mapped back to the object frame, reference = no rotation). Returns
    (value, mean, mean - std, mean + std) rows.
    """
    from .features import extract_point_features, make_synth_provider
    from .raster import compute_visibility
    from .features import backproject, gaussian_reweight

    geo = geodesic_distances(mesh)
    rows: list[tuple[float, float, float, float]] = []

    if axis == "views":
        rig = sample_viewpoints(n_slices, distance, intrinsics)
        buffers = {vid: rasterize(mesh, pose, intrinsics, view_id=vid) for vid, pose in rig.views}
        provider = make_synth_provider(provider_id, mesh, rig, buffers, grid=grid)
        order = spread_view_order(rig)
        vis_full = compute_visibility(mesh, rig, buffers)

        def features_for(view_subset: list[int]):
            sub = {vid: buffers[vid] for vid in view_subset}
            vis = compute_visibility(mesh, rig, sub)
            raw = backproject(mesh.vertices, rig, vis, provider, grid=grid)
            return gaussian_reweight(raw, geo, sigma).values

        reference = features_for(order)
        for value in sweep:
            k = int(value)
            if not 1 <= k <= len(order):
                raise ValueError(f"view count {k} outside [1, {len(order)}]")
            mean, std = feature_similarity(features_for(order[:k]), reference)
            rows.append((float(k), mean, mean - std, mean + std))
        return rows

    if axis == "distance":
        reference = None
        for value in sorted(sweep):
            rig = sample_viewpoints(n_slices, float(value), intrinsics)
            feats = extract_point_features(mesh, rig, provider_id, sigma=sigma, grid=grid, geodesics=geo).values
            if reference is None:
                reference = feats
            mean, std = feature_similarity(feats, reference)
            rows.append((float(value), mean, mean - std, mean + std))
        return rows

    if axis == "rotation":
        rig = sample_viewpoints(n_slices, distance, intrinsics)

        def features_at(angle: float):
            R = _rotation_y(angle)
            rotated = TriangleMesh(mesh.vertices @ R.T, mesh.faces)
            buffers = {vid: rasterize(rotated, pose, intrinsics, view_id=vid) for vid, pose in rig.views}
            provider = make_synth_provider(provider_id, rotated, rig, buffers, grid=grid, world_to_object=R.T)
            vis = compute_visibility(rotated, rig, buffers)
            raw = backproject(rotated.vertices, rig, vis, provider, grid=grid)
            return gaussian_reweight(raw, geo, sigma).values

        reference = features_at(0.0)
        for value in sweep:
            feats = reference if float(value) == 0.0 else features_at(float(value))
            mean, std = feature_similarity(feats, reference)
            rows.append((float(value), mean, mean - std, mean + std))
        return rows

    raise ValueError(f"unknown stability axis {axis!r}")


def write_stability_csv(path, rows: list[tuple[float, float, float, float]]) -> None:
    lines = ["value,mean,lo,hi"]
    for value, mean, lo, hi in rows:
        lines.append(",".join(CSV_FLOAT % v for v in (value, mean, lo, hi)))
    Path(path).write_text("\n".join(lines) + "\n")
