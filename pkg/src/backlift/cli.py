"""Command-line surface: render, backproject, detect, eval, segtransfer,
stability, and viz subcommands with reproducible file handoffs."""

from __future__ import annotations

import argparse
import math
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, features as feat, geometry, keypoints as kp, raster, views

EXIT_OK = 0
EXIT_IO = 1
EXIT_BAD_MESH = 2
EXIT_BAD_FORMAT = 3
EXIT_MISSING_INPUT = 4

THREADS_ENV = "BACKLIFT_THREADS"


class MissingInputError(FileNotFoundError):
    """Required input files absent (exit code 4)."""


# ---------------------------------------------------------------------------
# configuration

CONFIG_SCHEMA = {
    "rig": {"n_slices": 5, "distance": 1.2, "fov_deg": 60.0, "resolution": 224},
    "features": {"provider": "synth-position", "sigma": 0.003, "reweight": True, "grid": 16},
    "optimizer": {
        "alpha": 4.0,
        "beta": 0.0,
        "steps": 5000,
        "learning_rate": 0.05,
        "seed": 0,
        "candidates": 2048,
    },
    "eval": {"threshold_min": 0.0, "threshold_max": 0.1, "threshold_step": 0.005, "k_neighbors": 1},
    "paths": {},
}


def default_config() -> dict:
    return {section: dict(values) for section, values in CONFIG_SCHEMA.items()}


def load_config(path) -> dict:
    config = default_config()
    data = tomllib.loads(Path(path).read_text())
    for section, values in data.items():
        if section not in CONFIG_SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ValueError(f"config section [{section}] must be a table")
        for key, value in values.items():
            if section != "paths" and key not in CONFIG_SCHEMA[section]:
                raise ValueError(f"unknown config key {section}.{key}")
            config[section][key] = value
    return config


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_config(path, config: dict) -> None:
    lines = []
    for section, values in config.items():
        if not values:
            continue
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def echo_config(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / f"{command}.config.toml", config)


def resolve_config(args, overrides: dict[str, dict]) -> dict:
    config = load_config(args.config) if getattr(args, "config", None) else default_config()
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                config[section][key] = value
    return config


def _intrinsics(config: dict) -> views.Intrinsics:
    rig = config["rig"]
    res = int(rig["resolution"])
    return views.Intrinsics(width=res, height=res, fov=math.radians(float(rig["fov_deg"])))


def _thresholds(config: dict) -> np.ndarray:
    ev = config["eval"]
    lo, hi, step = float(ev["threshold_min"]), float(ev["threshold_max"]), float(ev["threshold_step"])
    return np.round(np.arange(lo, hi + step / 2, step), 9)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    return max(1, int(os.environ.get(THREADS_ENV, os.cpu_count() or 1)))


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _load_normalized(path) -> tuple[geometry.TriangleMesh, geometry.NormalizeTransform]:
    mesh = geometry.load_mesh(path)
    return geometry.normalize(mesh)


def _render_buffers(mesh, rig, threads: int) -> dict[int, raster.FrameBuffers]:
    def job(item):
        vid, pose = item
        return vid, raster.rasterize(mesh, pose, rig.intrinsics, view_id=vid)

    if threads <= 1 or len(rig.views) <= 1:
        return dict(job(v) for v in rig.views)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return dict(pool.map(job, rig.views))


def _features_for_mesh(
    mesh,
    config: dict,
    threads: int,
    manifest_rig=None,
    features_dir=None,
) -> tuple[feat.PointFeatureSet, object]:
    """All-vertex features via a synthetic provider or feature files + manifest."""
    fc = config["features"]
    grid = (int(fc["grid"]), int(fc["grid"]))
    sigma = float(fc["sigma"]) if fc["reweight"] else None
    provider_id = str(fc["provider"])

    if provider_id == "file":
        if manifest_rig is None or features_dir is None:
            raise MissingInputError("file provider needs a manifest and a feature directory")
        rig = manifest_rig
        provider = feat.FileFeatureProvider(features_dir)
    else:
        rig = manifest_rig or views.sample_viewpoints(
            int(config["rig"]["n_slices"]), float(config["rig"]["distance"]), _intrinsics(config)
        )
        provider = provider_id
        if provider_id == "constant":
            provider = feat.ConstantFeatureProvider(np.ones(3), grid=grid)

    buffers = _render_buffers(mesh, rig, threads)
    if isinstance(provider, str):
        provider = feat.make_synth_provider(provider, mesh, rig, buffers, grid=grid)
    pfs = feat.extract_point_features(
        mesh, rig, provider, sigma=sigma, grid=grid, buffers_by_view=buffers
    )
    return pfs, provider


def _candidate_set(mesh, features_values: np.ndarray, count: int) -> tuple[kp.CandidateSet, float]:
    """FPS candidates with normalized geodesic distances; returns the set and the normalizer."""
    n = min(count, mesh.n_vertices)
    if n == mesh.n_vertices:
        full = geometry.geodesic_distances(mesh)
        sample = geometry.farthest_point_sample(mesh, n, full, seed_rule=0)
        matrix = feat.matrix_for_subset(full, sample.indices)
    else:
        sample = geometry.farthest_point_sample(
            mesh, n, lambda vid: _dijkstra_row(mesh, vid), seed_rule=0
        )
        matrix = geometry.geodesic_distances(mesh, sample.indices, sample.indices)
    normalizer = float(matrix.values.max())
    cand = kp.CandidateSet(
        vertex_ids=sample.indices,
        features=features_values[sample.indices],
        distances=geometry.normalize_distances(matrix).values,
        positions=mesh.vertices[sample.indices],
    )
    return cand, normalizer


def _dijkstra_row(mesh, vid: int) -> np.ndarray:
    from scipy.sparse.csgraph import dijkstra

    row = dijkstra(mesh.edge_graph(), directed=False, indices=[vid])[0]
    finite = row[np.isfinite(row)]
    fill = float(finite.max()) if len(finite) else 0.0
    return np.where(np.isfinite(row), row, fill)


def _snap_for_mesh(record: evaluation.ShapeRecord, mesh, transform) -> kp.AnnotatedShape:
    normalized = evaluation.ShapeRecord(
        shape_id=record.shape_id,
        mesh_path=record.mesh_path,
        keypoints=[(sid, transform.to_normalized(xyz)) for sid, xyz in record.keypoints],
    )
    shape, _ = evaluation.snap_annotations(normalized, mesh)
    return shape


def _find_record(index: evaluation.KeypointDatasetIndex, shape_id: str) -> evaluation.ShapeRecord:
    for records in index.classes.values():
        for rec in records:
            if rec.shape_id == shape_id:
                return rec
    raise MissingInputError(f"no annotation record for shape {shape_id!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_render(args) -> int:
    config = resolve_config(
        args,
        {
            "rig": {
                "n_slices": args.n_slices,
                "distance": args.distance,
                "fov_deg": args.fov_deg,
                "resolution": args.resolution,
            },
            "paths": {"mesh": args.mesh or None, "out": str(args.out) if args.out else None},
        },
    )
    mesh_path = config["paths"].get("mesh")
    out_dir = Path(config["paths"].get("out", "render_out"))
    mesh, _ = _load_normalized(mesh_path)
    rig = views.sample_viewpoints(
        int(config["rig"]["n_slices"]), float(config["rig"]["distance"]), _intrinsics(config)
    )
    out_dir.mkdir(parents=True, exist_ok=True)

    threads = _threads(args)

    def job(item):
        vid, pose = item
        image = raster.render_shaded(mesh, pose, rig.intrinsics)
        raster.save_png(out_dir / views.image_name(vid), image)

    if threads <= 1:
        for item in rig.views:
            job(item)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(job, rig.views))
    views.write_manifest(out_dir / "manifest.txt", rig)
    echo_config(out_dir, "render", config)
    print(f"rendered {len(rig)} views to {out_dir}")
    return EXIT_OK


def cmd_backproject(args) -> int:
    config = resolve_config(
        args,
        {
            "features": {
                "provider": args.provider,
                "sigma": args.sigma,
                "reweight": False if args.no_reweight else None,
                "grid": args.grid,
            },
            "paths": {
                "mesh": args.mesh or None,
                "manifest": str(args.manifest) if args.manifest else None,
                "features_dir": str(args.features_dir) if args.features_dir else None,
                "out": str(args.out) if args.out else None,
            },
        },
    )
    mesh, _ = _load_normalized(config["paths"].get("mesh"))
    manifest_path = config["paths"].get("manifest")
    if not manifest_path or not Path(manifest_path).exists():
        raise MissingInputError(f"manifest not found: {manifest_path}")
    rig = views.rig_from_manifest(views.read_manifest(manifest_path))
    features_dir = config["paths"].get("features_dir")
    if config["features"]["provider"] == "file" and not features_dir:
        raise MissingInputError("file provider needs --features-dir")

    pfs, _ = _features_for_mesh(
        mesh, config, _threads(args), manifest_rig=rig, features_dir=features_dir
    )
    out = Path(config["paths"].get("out", "points.bin"))
    out.parent.mkdir(parents=True, exist_ok=True)
    feat.write_point_features(out, pfs.values)
    echo_config(out.parent, "backproject", config)
    never = int((pfs.counts == 0).sum())
    sigma = config["features"]["sigma"] if config["features"]["reweight"] else "off"
    print(f"points {len(pfs)} dim {pfs.dim} never-visible {never} sigma {sigma}")
    return EXIT_OK


def cmd_detect(args) -> int:
    config = resolve_config(
        args,
        {
            "optimizer": {
                "alpha": args.alpha,
                "beta": args.beta,
                "steps": args.steps,
                "learning_rate": args.learning_rate,
                "seed": args.seed,
                "candidates": args.candidates,
            },
            "rig": {
                "n_slices": args.n_slices,
                "distance": args.distance,
                "resolution": args.resolution,
            },
            "features": {
                "provider": args.provider,
                "sigma": args.sigma,
                "grid": args.grid,
            },
            "paths": {
                "shots": [str(p) for p in args.shots] if args.shots else None,
                "annotations": str(args.annotations) if args.annotations else None,
                "target": args.target or None,
                "features_root": str(args.features_root) if args.features_root else None,
                "out": str(args.out) if args.out else None,
            },
        },
    )
    paths = config["paths"]
    shot_paths = [Path(p) for p in paths.get("shots", [])]
    if not shot_paths:
        raise MissingInputError("no few-shot meshes given")
    target_path = Path(paths.get("target", ""))
    if not target_path.exists():
        raise geometry.MeshError(f"target mesh not found: {target_path}")
    annotations = paths.get("annotations")
    if not annotations or not Path(annotations).exists():
        raise MissingInputError(f"annotations not found: {annotations}")
    index = evaluation.load_annotations(annotations, shot_paths[0].parent)
    threads = _threads(args)
    opt = config["optimizer"]
    method = args.method

    target_mesh, _ = _load_normalized(target_path)

    def shape_features(path: Path, mesh):
        root = paths.get("features_root")
        if config["features"]["provider"] == "file":
            if not root:
                raise MissingInputError("file provider needs --features-root")
            shape_dir = Path(root) / path.stem
            manifest = shape_dir / "manifest.txt"
            if not manifest.exists():
                raise MissingInputError(f"missing features for {path.stem}: {manifest}")
            rig = views.rig_from_manifest(views.read_manifest(manifest))
            return _features_for_mesh(mesh, config, threads, manifest_rig=rig, features_dir=shape_dir)
        return _features_for_mesh(mesh, config, threads)

    shot_shapes: list[kp.AnnotatedShape] = []
    features_by_shape: dict[str, np.ndarray] = {}
    distances_by_shape: dict[str, geometry.GeodesicMatrix] = {}
    tokens: list[np.ndarray] = []
    for path in shot_paths:
        mesh, transform = _load_normalized(path)
        record = _find_record(index, path.stem)
        shape = _snap_for_mesh(record, mesh, transform)
        shot_shapes.append(shape)
        if method in ("optimize", "knn"):
            pfs, provider = shape_features(path, mesh)
            features_by_shape[shape.shape_id] = pfs.values
            _, normalizer = _candidate_set(mesh, pfs.values, int(opt["candidates"]))
            kp_matrix = geometry.geodesic_distances(mesh, shape.vertex_ids, shape.vertex_ids)
            distances_by_shape[shape.shape_id] = geometry.normalize_distances(kp_matrix, normalizer)
            if args.retrieval:
                tokens.append(_mean_class_token(provider))

    out = Path(paths.get("out", "prediction.txt"))
    out.parent.mkdir(parents=True, exist_ok=True)

    if method == "fps":
        full = geometry.geodesic_distances(target_mesh)
        prediction = kp.fps_baseline(target_mesh, full, shot_shapes, shape_id=target_path.stem)
    else:
        target_pfs, target_provider = shape_features(target_path, target_mesh)
        candidates, _ = _candidate_set(target_mesh, target_pfs.values, int(opt["candidates"]))
        if args.retrieval:
            best = kp.retrieve_nearest_shape(tokens, _mean_class_token(target_provider))
            chosen = shot_shapes[best]
            template = kp.build_template([chosen], features_by_shape, distances_by_shape)
        else:
            template = kp.build_template(shot_shapes, features_by_shape, distances_by_shape)
        if method == "knn":
            prediction = kp.knn_match(template, candidates, shape_id=target_path.stem)
        else:
            cfg = kp.OptimizerConfig(
                alpha=float(opt["alpha"]),
                beta=float(opt["beta"]),
                steps=int(opt["steps"]),
                learning_rate=float(opt["learning_rate"]),
                seed=int(opt["seed"]),
            )
            state, trajectory = kp.optimize(template, candidates, cfg)
            prediction = kp.extract(
                state, template, candidates, shape_id=target_path.stem, losses=trajectory[-1]
            )
            traj_lines = ["step,total,feature,distance,selection_reward"]
            for step, t in enumerate(trajectory):
                traj_lines.append(
                    f"{step},{t.total:.9g},{t.feature:.9g},{t.distance:.9g},{t.selection_reward:.9g}"
                )
            out.with_suffix(out.suffix + ".trajectory.csv").write_text("\n".join(traj_lines) + "\n")

    kp.write_prediction(out, prediction)
    echo_config(out.parent, "detect", config)
    print(f"method {method} keypoints {len(prediction.vertex_ids)} collapses {len(prediction.collapses)}")
    return EXIT_OK


def _mean_class_token(provider) -> np.ndarray:
    if not isinstance(provider, feat.FileFeatureProvider):
        raise MissingInputError("retrieval needs file features with class tokens")
    tokens = []
    for vid, fmap in sorted(provider._cache.items()):
        if fmap.class_token is None:
            raise MissingInputError(f"view {vid} has no class token; retrieval unavailable")
        tokens.append(fmap.class_token.astype(np.float64))
    if not tokens:
        raise MissingInputError("no feature maps loaded; retrieval unavailable")
    return np.mean(tokens, axis=0)


def cmd_eval(args) -> int:
    config = resolve_config(
        args,
        {
            "eval": {
                "threshold_min": args.threshold_min,
                "threshold_max": args.threshold_max,
                "threshold_step": args.threshold_step,
            },
            "optimizer": {"candidates": args.candidates},
            "paths": {
                "predictions": [str(p) for p in args.predictions] if args.predictions else None,
                "annotations": str(args.annotations) if args.annotations else None,
                "mesh_dir": str(args.mesh_dir) if args.mesh_dir else None,
                "out": str(args.out) if args.out else None,
            },
        },
    )
    paths = config["paths"]
    pred_paths = [Path(p) for p in paths.get("predictions", [])]
    if not pred_paths:
        raise MissingInputError("no prediction files given")
    mesh_dir = Path(paths.get("mesh_dir", "."))
    annotations = paths.get("annotations")
    if not annotations or not Path(annotations).exists():
        raise MissingInputError(f"annotations not found: {annotations}")
    index = evaluation.load_annotations(annotations, mesh_dir)

    entries = []
    class_of = {}
    for pred_path in pred_paths:
        if not pred_path.exists():
            raise MissingInputError(f"prediction not found: {pred_path}")
        prediction = kp.read_prediction(pred_path)
        record = _find_record(index, prediction.shape_id)
        mesh, transform = _load_normalized(record.mesh_path)
        gt = _snap_for_mesh(record, mesh, transform)
        _, normalizer = _candidate_set(mesh, np.zeros((mesh.n_vertices, 1)), int(config["optimizer"]["candidates"]))
        union = np.unique(np.concatenate([prediction.vertex_ids, gt.vertex_ids]))
        matrix = geometry.normalize_distances(
            geometry.geodesic_distances(mesh, union, union), normalizer
        )
        entries.append((prediction.shape_id, prediction.vertex_ids, gt.vertex_ids, matrix))
        for cname, records in index.classes.items():
            if any(r.shape_id == prediction.shape_id for r in records):
                class_of[prediction.shape_id] = cname

    curve = evaluation.iou_curve(entries, thresholds=_thresholds(config), class_of=class_of)
    out = Path(paths.get("out", "iou.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_iou_csv(out, curve)
    echo_config(out.parent, "eval", config)
    agg = curve.aggregate()
    print(f"shapes {len(entries)} mean-iou {agg.mean():.6g} final-iou {agg[-1]:.6g}")
    return EXIT_OK


def cmd_segtransfer(args) -> int:
    config = resolve_config(
        args,
        {
            "eval": {"k_neighbors": args.k_neighbors},
            "paths": {
                "source_features": str(args.source_features),
                "source_labels": str(args.source_labels),
                "target_features": str(args.target_features),
                "target_labels": str(args.target_labels) if args.target_labels else None,
                "out": str(args.out) if args.out else None,
            },
        },
    )
    paths = config["paths"]
    for key in ("source_features", "source_labels", "target_features"):
        if not Path(paths[key]).exists():
            raise MissingInputError(f"missing input: {paths[key]}")
    src = feat.read_point_features(paths["source_features"])
    tgt = feat.read_point_features(paths["target_features"])
    labels = evaluation.load_part_labels(paths["source_labels"])
    gt = evaluation.load_part_labels(paths["target_labels"]) if paths.get("target_labels") else None
    pred, per_part, mean = evaluation.segmentation_transfer(
        src, labels, tgt, k_neighbors=int(config["eval"]["k_neighbors"]), target_labels=gt
    )
    out = Path(paths.get("out", "transfer"))
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".labels.txt").write_text("\n".join(str(v) for v in pred) + "\n")
    if per_part is not None:
        lines = ["part,iou"] + [f"{p},{evaluation.CSV_FLOAT % v}" for p, v in sorted(per_part.items())]
        lines.append(f"mean,{evaluation.CSV_FLOAT % mean}")
        Path(str(out) + ".iou.csv").write_text("\n".join(lines) + "\n")
        print(f"transferred {len(pred)} labels, mean IoU {mean:.6g}")
    else:
        print(f"transferred {len(pred)} labels")
    echo_config(out.parent, "segtransfer", config)
    return EXIT_OK


def cmd_stability(args) -> int:
    config = resolve_config(
        args,
        {
            "rig": {"n_slices": args.n_slices, "distance": args.distance, "resolution": args.resolution},
            "features": {"provider": args.provider, "sigma": args.sigma, "grid": args.grid},
            "paths": {
                "mesh": args.mesh or None,
                "axis": args.axis,
                "out": str(args.out) if args.out else None,
            },
        },
    )
    mesh, _ = _load_normalized(config["paths"].get("mesh"))
    axis = config["paths"].get("axis", "rotation")
    if args.sweep:
        sweep = np.asarray([float(v) for v in args.sweep.split(",")])
    elif axis == "views":
        sweep = np.asarray([2, 6, 14, 26, 42, 50, 62], dtype=float)
    elif axis == "distance":
        sweep = np.asarray([1.2, 1.3, 1.4, 1.5, 1.6])
    else:
        sweep = np.arange(16) * (2.0 * math.pi / 16.0)
    rows = evaluation.stability_report(
        mesh,
        str(config["features"]["provider"]),
        axis,
        sweep,
        n_slices=int(config["rig"]["n_slices"]),
        distance=float(config["rig"]["distance"]),
        intrinsics=_intrinsics(config),
        sigma=float(config["features"]["sigma"]),
        grid=(int(config["features"]["grid"]),) * 2,
    )
    out = Path(config["paths"].get("out", f"stability_{axis}.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_stability_csv(out, rows)
    echo_config(out.parent, "stability", config)
    print(f"stability axis {axis}: {len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    config = resolve_config(
        args,
        {
            "paths": {
                "mesh": args.mesh or None,
                "features": str(args.features) if args.features else None,
                "out": str(args.out) if args.out else None,
            }
        },
    )
    mesh, _ = _load_normalized(config["paths"].get("mesh"))
    feat_path = config["paths"].get("features")
    if not feat_path or not Path(feat_path).exists():
        raise MissingInputError(f"features not found: {feat_path}")
    values = feat.read_point_features(feat_path).astype(np.float64)
    if len(values) != mesh.n_vertices:
        raise feat.FeatureFormatError(
            f"feature rows ({len(values)}) do not match vertex count ({mesh.n_vertices})"
        )
    pfs = feat.PointFeatureSet(values=values, counts=np.ones(len(values), dtype=np.int64), provider="file")
    if mesh.n_vertices <= 8192:
        full = geometry.geodesic_distances(mesh)
        sample = geometry.farthest_point_sample(
            mesh, min(2048, mesh.n_vertices), full, seed_rule=0
        )
        colors = feat.pca_rgb(pfs, fit_indices=sample.indices)
    else:
        colors = feat.pca_rgb(pfs)
    out = Path(config["paths"].get("out", "colors.txt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
        for p, c in zip(mesh.vertices, colors)
    ]
    out.write_text("\n".join(lines) + "\n")
    echo_config(out.parent, "viz", config)
    print(f"wrote {len(lines)} colored points to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backlift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file; flags override its values")
        p.add_argument("--threads", type=int, help=f"worker cap (default ${THREADS_ENV} or cpu count)")

    p = sub.add_parser("render", help="render a mesh from the sphere-slice rig")
    p.add_argument("mesh", nargs="?")
    p.add_argument("--out", required=False)
    p.add_argument("--n-slices", type=int, dest="n_slices")
    p.add_argument("--distance", type=float)
    p.add_argument("--fov-deg", type=float, dest="fov_deg")
    p.add_argument("--resolution", type=int)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("backproject", help="lift per-view features onto mesh vertices")
    p.add_argument("mesh", nargs="?")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--provider", choices=["file", "synth-position", "synth-normal", "constant"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--no-reweight", action="store_true")
    p.add_argument("--grid", type=int)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_backproject)

    p = sub.add_parser("detect", help="few-shot keypoint detection on a target mesh")
    p.add_argument("--shots", nargs="+", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--method", choices=["optimize", "knn", "fps"], default="optimize")
    p.add_argument("--provider", choices=["file", "synth-position", "synth-normal", "constant"])
    p.add_argument("--features-root", dest="features_root")
    p.add_argument("--retrieval", action="store_true")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--candidates", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--n-slices", type=int, dest="n_slices")
    p.add_argument("--distance", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="IoU-threshold curve for prediction files")
    p.add_argument("--pred", nargs="+", dest="predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--mesh-dir", dest="mesh_dir", required=True)
    p.add_argument("--threshold-min", type=float, dest="threshold_min")
    p.add_argument("--threshold-max", type=float, dest="threshold_max")
    p.add_argument("--threshold-step", type=float, dest="threshold_step")
    p.add_argument("--candidates", type=int)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segtransfer", help="nearest-neighbor part-label transfer")
    p.add_argument("--source-features", dest="source_features", required=True)
    p.add_argument("--source-labels", dest="source_labels", required=True)
    p.add_argument("--target-features", dest="target_features", required=True)
    p.add_argument("--target-labels", dest="target_labels")
    p.add_argument("-k", "--k-neighbors", type=int, dest="k_neighbors")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_segtransfer)

    p = sub.add_parser("stability", help="feature stability sweep (views/distance/rotation)")
    p.add_argument("mesh", nargs="?")
    p.add_argument("--axis", choices=["views", "distance", "rotation"], default="rotation")
    p.add_argument("--sweep", help="comma-separated sweep values")
    p.add_argument("--provider", choices=["synth-position", "synth-normal"])
    p.add_argument("--n-slices", type=int, dest="n_slices")
    p.add_argument("--distance", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("viz", help="per-vertex PCA colors as a point-cloud text file")
    p.add_argument("mesh", nargs="?")
    p.add_argument("features", nargs="?")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except geometry.MeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_MESH
    except feat.FeatureFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_FORMAT
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
