"""Wire formats shared with the back-projection pipeline: the B23D per-view
feature file and the view manifest. Implemented against the format contract,
independent of the consumer's code."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"B23D"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB3x")


def write_feature_file(path, view_id: int, grid: np.ndarray, class_token: np.ndarray | None) -> None:
    """Atomically write one view's (Hp, Wp, d) float32 grid in B23D layout."""
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 3:
        raise ValueError(f"patch grid must be (Hp, Wp, d), got {grid.shape}")
    hp, wp, d = grid.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, view_id, hp, wp, d, int(class_token is not None)))
        fh.write(grid.tobytes())
        if class_token is not None:
            token = np.ascontiguousarray(class_token, dtype="<f4").reshape(-1)
            if token.shape[0] != d:
                raise ValueError(f"class token dim {token.shape[0]} != feature dim {d}")
            fh.write(token.tobytes())
    os.replace(tmp, path)


@dataclass
class ManifestView:
    view_id: int
    image: str
    width: int
    height: int


def read_manifest_views(path) -> list[ManifestView]:
    """Parse the view records the extractor needs: id, image name, resolution."""
    views = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        tags = {"view": 1, "eye": 3, "R": 9, "T": 3, "intrinsics": 3, "image": 1}
        pos = 0
        values: dict[str, list[str]] = {}
        for tag, width in tags.items():
            if pos >= len(parts) or parts[pos] != tag:
                raise ValueError(f"{path}:{lineno}: expected field {tag!r}")
            values[tag] = parts[pos + 1 : pos + 1 + width]
            pos += 1 + width
        views.append(
            ManifestView(
                view_id=int(values["view"][0]),
                image=values["image"][0],
                width=int(values["intrinsics"][0]),
                height=int(values["intrinsics"][1]),
            )
        )
    if not views:
        raise ValueError(f"{path}: empty manifest")
    return views
