"""Batch a manifest's rendered views through an encoder and write one B23D
feature file per view."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .formats import read_manifest_views, write_feature_file
from .models import REGISTRY, EncoderSpec, preprocess


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractorJob:
    manifest: Path
    model_id: str
    output_dir: Path
    image_dir: Path | None = None
    batch_size: int = 8
    device: str = "cpu"

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        self.output_dir = Path(self.output_dir)
        self.image_dir = Path(self.image_dir) if self.image_dir else self.manifest.parent
        if self.model_id not in REGISTRY:
            raise ExtractionError(
                f"unknown model id {self.model_id!r}; choose from {sorted(REGISTRY)}"
            )
        if self.batch_size < 1:
            raise ExtractionError("batch size must be >= 1")


@dataclass
class ExtractionResult:
    files: dict[int, Path]
    dim: int
    grid: tuple[int, int]
    has_class_token: bool
    sidecar: Path | None = None


def _load_images(views, image_dir: Path) -> np.ndarray:
    missing = [v.image for v in views if not (image_dir / v.image).exists()]
    if missing:
        raise ExtractionError(f"missing rendered images: {', '.join(missing)}")
    stack = []
    for v in views:
        img = Image.open(image_dir / v.image).convert("RGB")
        stack.append(np.asarray(img))
    return np.stack(stack)


def run(job: ExtractorJob) -> ExtractionResult:
    """Extract last-layer patch grids for every manifest view.

    Inference is deterministic (eval mode, no grad, fixed seed at model
    build), files are written atomically, and a ``features.txt`` sidecar
    records file names and dimensions next to the outputs.
    """
    views = read_manifest_views(job.manifest)
    spec: EncoderSpec = REGISTRY[job.model_id]
    model = spec.build()
    model.to(job.device)
    job.output_dir.mkdir(parents=True, exist_ok=True)

    files: dict[int, Path] = {}
    dim: int | None = None
    grid_shape: tuple[int, int] | None = None
    for start in range(0, len(views), job.batch_size):
        batch = views[start : start + job.batch_size]
        images = _load_images(batch, job.image_dir)
        pixels = preprocess(images, spec).to(job.device)
        with torch.no_grad():
            grids, tokens = spec.forward(model, pixels)
        grids = grids.cpu().numpy()
        tokens = tokens.cpu().numpy() if tokens is not None else None
        if not np.isfinite(grids).all():
            bad = [batch[i].view_id for i in range(len(batch)) if not np.isfinite(grids[i]).all()]
            raise ExtractionError(f"non-finite features for views {bad}")
        if dim is None:
            dim = grids.shape[-1]
            grid_shape = (grids.shape[1], grids.shape[2])
        elif grids.shape[-1] != dim or (grids.shape[1], grids.shape[2]) != grid_shape:
            raise ExtractionError(
                f"dimension drift at view {batch[0].view_id}: "
                f"{grids.shape[1:]} after {grid_shape + (dim,)}"
            )
        for i, view in enumerate(batch):
            path = job.output_dir / f"{view.view_id}.b23d"
            token = tokens[i] if (tokens is not None and spec.has_class_token) else None
            write_feature_file(path, view.view_id, grids[i], token)
            files[view.view_id] = path

    sidecar = job.output_dir / "features.txt"
    lines = [f"model {job.model_id} dim {dim} grid {grid_shape[0]} {grid_shape[1]}"]
    lines += [f"feature {vid} {files[vid].name}" for vid in sorted(files)]
    sidecar.write_text("\n".join(lines) + "\n")
    return ExtractionResult(
        files=files,
        dim=dim,
        grid=grid_shape,
        has_class_token=spec.has_class_token,
        sidecar=sidecar,
    )
