import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

IDENTITY_POSE = (
    "R 1 0 0 0 1 0 0 0 1 T 0 0 -1.2"
)


def write_manifest(path: Path, n_views: int, resolution: int = 224) -> None:
    """Minimal valid view manifest: n identical front cameras, distinct images."""
    lines = []
    for vid in range(n_views):
        lines.append(
            f"view {vid} eye 0 0 1.2 {IDENTITY_POSE} "
            f"intrinsics {resolution} {resolution} 1.0471975511965976 "
            f"image view_{vid:03d}.png"
        )
    path.write_text("\n".join(lines) + "\n")


def write_images(directory: Path, n_views: int, resolution: int = 224, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for vid in range(n_views):
        img = rng.integers(0, 256, size=(resolution, resolution), dtype=np.uint8)
        Image.fromarray(img, mode="L").save(directory / f"view_{vid:03d}.png")


def make_icosphere(subdivisions: int = 2, radius: float = 0.5):
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        vlist = verts.tolist()

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (np.asarray(vlist[a]) + np.asarray(vlist[b])) / 2.0
                m /= np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(m.tolist())
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces)
    return verts * radius, faces


def build_shape_dataset(root: Path, variants) -> tuple[Path, Path, list[str]]:
    """Anisotropically scaled icospheres with six axis-extreme keypoints."""
    root.mkdir(parents=True, exist_ok=True)
    base_verts, faces = make_icosphere(subdivisions=2, radius=0.5)
    axes = [(1.0, 0, 0), (-1.0, 0, 0), (0, 1.0, 0), (0, -1.0, 0), (0, 0, 1.0), (0, 0, -1.0)]
    records = []
    ids = []
    for i, scale in enumerate(variants):
        shape_id = f"shape{i}"
        verts = base_verts * np.asarray(scale)
        lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in verts]
        lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in faces]
        (root / f"{shape_id}.obj").write_text("\n".join(lines) + "\n")
        kps = [
            {"semantic_id": sid, "xyz": verts[int(np.argmax(verts @ np.asarray(ax)))].tolist()}
            for sid, ax in enumerate(axes)
        ]
        records.append({"class_id": "blob", "model_id": shape_id, "keypoints": kps})
        ids.append(shape_id)
    ann = root / "annotations.json"
    ann.write_text(json.dumps(records))
    return ann, root, ids
