"""Feature maps, back-projection with multi-view averaging, Gaussian geodesic
re-weighting, PCA visualization, and the binary feature formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GeodesicMatrix, TriangleMesh, geodesic_distances
from .raster import FrameBuffers, VisibilityMask, compute_visibility, rasterize, unproject_pixels
from .views import ViewRig, project_points

MAGIC = b"B23D"
FORMAT_VERSION = 1
DEFAULT_SIGMA = 0.003
SIGMA_RANGE = (0.001, 0.005)
DEFAULT_GRID = (16, 16)


class FeatureFormatError(ValueError):
    """Malformed feature file: bad magic, version, or dimensions."""


@dataclass
class FeatureMap:
    """One view's patch-grid features (Hp, Wp, d) with an optional class token."""

    view_id: int
    values: np.ndarray
    class_token: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise FeatureFormatError(f"feature grid must be (Hp, Wp, d), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise FeatureFormatError("non-finite feature values")
        if self.class_token is not None:
            self.class_token = np.asarray(self.class_token, dtype=np.float32).reshape(-1)

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class PointFeatureSet:
    """Per-point aggregated features with visible-view counts and provenance."""

    values: np.ndarray
    counts: np.ndarray
    provider: str
    sigma: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.values)


def pixel_to_patch(x, y, width: int, height: int, grid: tuple[int, int]):
    """Nearest-patch assignment: row = floor(y*Hp/H), col = floor(x*Wp/W), clamped."""
    hp, wp = grid
    row = np.clip(np.floor(np.asarray(y) * hp / height).astype(np.int64), 0, hp - 1)
    col = np.clip(np.floor(np.asarray(x) * wp / width).astype(np.int64), 0, wp - 1)
    return row, col


# ---------------------------------------------------------------------------
# feature providers

class FileFeatureProvider:
    """Reads per-view ``<view_id>.b23d`` files from a directory."""

    provider_id = "file"

    def __init__(self, directory):
        self.directory = Path(directory)
        self._cache: dict[int, FeatureMap] = {}
        self._dim: int | None = None

    def feature_map(self, view_id: int) -> FeatureMap:
        if view_id not in self._cache:
            fmap = read_feature_map(self.directory / f"{view_id}.b23d")
            if fmap.view_id != view_id:
                raise FeatureFormatError(
                    f"{view_id}.b23d holds view {fmap.view_id}"
                )
            if self._dim is None:
                self._dim = fmap.dim
            elif fmap.dim != self._dim:
                raise FeatureFormatError(
                    f"feature dimension drift: view {view_id} has d={fmap.dim}, expected {self._dim}"
                )
            self._cache[view_id] = fmap
        return self._cache[view_id]


class ConstantFeatureProvider:
    """Every patch of every view stores the same vector; test plumbing."""

    provider_id = "constant"

    def __init__(self, value, grid: tuple[int, int] = DEFAULT_GRID):
        self.value = np.asarray(value, dtype=np.float32).reshape(-1)
        self.grid = grid

    def feature_map(self, view_id: int) -> FeatureMap:
        hp, wp = self.grid
        values = np.broadcast_to(self.value, (hp, wp, len(self.value))).copy()
        return FeatureMap(view_id=view_id, values=values)


class _SynthProvider:
    """Shared machinery: derive per-patch values from the rasterizer's buffers.

    Each patch stores a quantity of the surface point seen at its center
    pixel; if that pixel is background, the covered pixel nearest to the
    patch center inside the patch block stands in, and zeros mark fully
    empty patches.
    """

    def __init__(self, mesh: TriangleMesh, rig: ViewRig, buffers_by_view: dict[int, FrameBuffers],
                 grid: tuple[int, int] = DEFAULT_GRID, world_to_object: np.ndarray | None = None):
        self.mesh = mesh
        self.rig = rig
        self.buffers = buffers_by_view
        self.grid = grid
        self.world_to_object = None if world_to_object is None else np.asarray(world_to_object, dtype=np.float64)
        self._cache: dict[int, FeatureMap] = {}

    def _patch_value(self, world_points: np.ndarray, face_ids: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def feature_map(self, view_id: int) -> FeatureMap:
        if view_id in self._cache:
            return self._cache[view_id]
        intr = self.rig.intrinsics
        pose = self.rig.pose(view_id)
        buf = self.buffers[view_id]
        hp, wp = self.grid
        H, W = intr.height, intr.width

        values = np.zeros((hp, wp, 3), dtype=np.float64)
        rows, cols = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
        ccx = (cols + 0.5) * W / wp
        ccy = (rows + 0.5) * H / hp
        sel_x = np.full((hp, wp), -1, dtype=np.int64)
        sel_y = np.full((hp, wp), -1, dtype=np.int64)
        for r in range(hp):
            for c in range(wp):
                px, py = int(ccx[r, c]), int(ccy[r, c])
                if buf.face_id[py, px] >= 0:
                    sel_x[r, c], sel_y[r, c] = px, py
                    continue
                xs0, xs1 = int(c * W / wp), int((c + 1) * W / wp)
                ys0, ys1 = int(r * H / hp), int((r + 1) * H / hp)
                block = buf.face_id[ys0:ys1, xs0:xs1]
                by, bx = np.nonzero(block >= 0)
                if len(by) == 0:
                    continue
                d2 = (bx + xs0 + 0.5 - ccx[r, c]) ** 2 + (by + ys0 + 0.5 - ccy[r, c]) ** 2
                k = int(np.argmin(d2))
                sel_x[r, c], sel_y[r, c] = bx[k] + xs0, by[k] + ys0

        hit = sel_x >= 0
        if hit.any():
            xs = sel_x[hit].astype(np.float64)
            ys = sel_y[hit].astype(np.float64)
            depth = buf.depth[sel_y[hit], sel_x[hit]]
            fids = buf.face_id[sel_y[hit], sel_x[hit]]
            world = unproject_pixels(xs, ys, depth, pose, intr)
            values[hit] = self._patch_value(world, fids)
        if self.world_to_object is not None:
            values = values @ self.world_to_object.T
        fmap = FeatureMap(view_id=view_id, values=values.astype(np.float32))
        self._cache[view_id] = fmap
        return fmap


class SynthPositionProvider(_SynthProvider):
    """Each patch stores the 3D position of the surface seen at its center."""

    provider_id = "synth-position"

    def _patch_value(self, world_points, face_ids):
        return world_points


class SynthNormalProvider(_SynthProvider):
    """Each patch stores the unit normal of the face seen at its center."""

    provider_id = "synth-normal"

    def _patch_value(self, world_points, face_ids):
        return self.mesh.face_normals[face_ids]


# ---------------------------------------------------------------------------
# back-projection and re-weighting

def backproject(
    points: np.ndarray,
    rig: ViewRig,
    vis: VisibilityMask,
    maps,
    grid: tuple[int, int] | None = None,
) -> PointFeatureSet:
    """Average each point's patch feature over the views where it is visible.

    ``maps`` is a provider (``feature_map(view_id)``) or a dict of view id to
    FeatureMap. Accumulation runs in float64, summing views in ascending id
    order; points visible nowhere keep a zero feature and count 0.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    get_map = maps.feature_map if hasattr(maps, "feature_map") else lambda vid: maps[vid]
    provider_id = getattr(maps, "provider_id", "file")
    intr = rig.intrinsics

    acc = None
    dim = None
    counts = np.zeros(len(points), dtype=np.int64)
    for k, vid in enumerate(sorted(vis.view_ids.tolist())):
        col = vis.mask[:, k]
        fmap = get_map(vid)
        if dim is None:
            dim = fmap.dim
            acc = np.zeros((len(points), dim), dtype=np.float64)
        elif fmap.dim != dim:
            raise FeatureFormatError(f"feature dimension mismatch across views: {fmap.dim} != {dim}")
        if not col.any():
            continue
        g = grid if grid is not None else fmap.grid
        xy, lam = project_points(points[col], rig.pose(vid), intr)
        row, colidx = pixel_to_patch(xy[:, 0], xy[:, 1], intr.width, intr.height, g)
        acc[col] += fmap.values[row, colidx].astype(np.float64)
        counts[col] += 1

    values = np.zeros_like(acc)
    seen = counts > 0
    values[seen] = acc[seen] / counts[seen, None]
    return PointFeatureSet(values=values, counts=counts, provider=provider_id)


def gaussian_reweight(raw: PointFeatureSet, matrix: GeodesicMatrix, sigma: float) -> PointFeatureSet:
    """Gaussian smoothing along the surface: weights exp(-d^2 / 2 sigma^2).

    Every point, including never-visible ones, becomes a convex combination
    of the observed (count >= 1) raw features. Rows whose weights underflow
    to zero copy the nearest observed point's feature.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if matrix.normalized:
        raise ValueError("re-weighting expects unnormalized distances in model units")
    if matrix.values.shape != (len(raw), len(raw)):
        raise ValueError("geodesic matrix must cover all points")
    observed = np.flatnonzero(raw.counts >= 1)
    if len(observed) == 0:
        raise ValueError("no visible points: nothing to re-weight from")

    d = matrix.values[:, observed]
    w = np.exp(-(d**2) / (2.0 * sigma**2))
    den = w.sum(axis=1)
    num = w @ raw.values[observed]
    out = np.zeros_like(raw.values)
    ok = den > 0
    out[ok] = num[ok] / den[ok, None]
    if (~ok).any():
        nearest = observed[np.argmin(d[~ok], axis=1)]
        out[~ok] = raw.values[nearest]
    return PointFeatureSet(values=out, counts=raw.counts.copy(), provider=raw.provider, sigma=sigma)


def smooth_features(mesh: TriangleMesh, raw: PointFeatureSet, sigma: float, cutoff_sigmas: float = 8.0) -> PointFeatureSet:
    """Chunked equivalent of :func:`gaussian_reweight` for whole-mesh point sets.

    Avoids materializing the full N x N geodesic matrix; weights beyond
    ``cutoff_sigmas * sigma`` underflow and are skipped by construction.
    """
    from scipy.sparse.csgraph import dijkstra

    observed = np.flatnonzero(raw.counts >= 1)
    if len(observed) == 0:
        raise ValueError("no visible points: nothing to re-weight from")
    graph = mesh.edge_graph()
    limit = cutoff_sigmas * sigma
    n = mesh.n_vertices
    out = np.zeros_like(raw.values)
    all_ids = np.arange(n)
    chunk = max(1, int(2e7 // max(n, 1)))
    pending = []
    for start in range(0, n, chunk):
        idx = all_ids[start : start + chunk]
        d = dijkstra(graph, directed=False, indices=idx, limit=limit)[:, observed]
        with np.errstate(over="ignore"):
            w = np.where(np.isfinite(d), np.exp(-(d**2) / (2.0 * sigma**2)), 0.0)
        den = w.sum(axis=1)
        ok = den > 0
        out[idx[ok]] = (w[ok] @ raw.values[observed]) / den[ok, None]
        pending.extend(idx[~ok].tolist())
    if pending:
        d = dijkstra(graph, directed=False, indices=pending)[:, observed]
        d = np.where(np.isfinite(d), d, np.inf)
        nearest = observed[np.argmin(d, axis=1)]
        out[pending] = raw.values[nearest]
    return PointFeatureSet(values=out, counts=raw.counts.copy(), provider=raw.provider, sigma=sigma)


def pca_rgb(features: PointFeatureSet, fit_indices: np.ndarray | None = None, fit_size: int = 2048) -> np.ndarray:
    """Project features to 3 principal components and min-max scale to [0, 1].

    The PCA is fit on a subset (given indices, else an even stride capped at
    ``fit_size``) and applied to all points. Each axis is oriented so its
    largest-magnitude loading is positive; missing rank pads with 0.5.
    """
    X = features.values
    n, d = X.shape
    if n < 3 or d < 3:
        raise ValueError("PCA visualization needs at least 3 points and 3 feature dims")
    if fit_indices is None:
        step = max(1, n // min(fit_size, n))
        fit_indices = np.arange(0, n, step)[: min(fit_size, n)]
    fit = X[np.asarray(fit_indices, dtype=np.int64)]
    mean = fit.mean(axis=0)
    _, s, vt = np.linalg.svd(fit - mean, full_matrices=False)
    tol = (s[0] if len(s) else 0.0) * 1e-10
    rank = int((s > tol).sum())
    comps = vt[: min(3, rank)]
    for k in range(len(comps)):
        j = int(np.argmax(np.abs(comps[k])))
        if comps[k, j] < 0:
            comps[k] = -comps[k]

    colors = np.full((n, 3), 0.5)
    if len(comps):
        proj = (X - mean) @ comps.T
        lo = proj.min(axis=0)
        hi = proj.max(axis=0)
        span = hi - lo
        for k in range(proj.shape[1]):
            colors[:, k] = 0.5 if span[k] <= 0 else (proj[:, k] - lo[k]) / span[k]
    return colors


# ---------------------------------------------------------------------------
# whole-pipeline helper

def extract_point_features(
    mesh: TriangleMesh,
    rig: ViewRig,
    provider,
    sigma: float | None = DEFAULT_SIGMA,
    grid: tuple[int, int] = DEFAULT_GRID,
    vertex_ids: np.ndarray | None = None,
    geodesics: GeodesicMatrix | None = None,
    buffers_by_view: dict[int, FrameBuffers] | None = None,
) -> PointFeatureSet:
    """Rasterize, test visibility, back-project, and optionally re-weight.

    ``provider`` is a provider instance or one of the synthetic provider ids.
    ``sigma=None`` skips re-weighting. A precomputed all-vertex geodesic
    matrix may be passed; otherwise smoothing uses the chunked path.
    """
    if buffers_by_view is None:
        buffers_by_view = {vid: rasterize(mesh, pose, rig.intrinsics, view_id=vid) for vid, pose in rig.views}
    if isinstance(provider, str):
        provider = make_synth_provider(provider, mesh, rig, buffers_by_view, grid=grid)
    ids = np.arange(mesh.n_vertices, dtype=np.int64) if vertex_ids is None else np.asarray(vertex_ids, dtype=np.int64)
    vis = compute_visibility(mesh, rig, buffers_by_view, vertex_ids=ids)
    # each map carries its own patch grid; the grid argument only shapes synth providers
    raw = backproject(mesh.vertices[ids], rig, vis, provider)
    if sigma is None:
        return raw
    if geodesics is not None:
        return gaussian_reweight(raw, matrix_for_subset(geodesics, ids), sigma)
    if vertex_ids is None:
        return smooth_features(mesh, raw, sigma)
    return gaussian_reweight(raw, geodesic_distances(mesh, ids, ids), sigma)


def matrix_for_subset(matrix: GeodesicMatrix, vertex_ids: np.ndarray) -> GeodesicMatrix:
    """Slice a square geodesic matrix down to the given vertex ids."""
    pos = {int(v): k for k, v in enumerate(matrix.source_ids)}
    sel = np.asarray([pos[int(v)] for v in vertex_ids], dtype=np.int64)
    return GeodesicMatrix(
        values=matrix.values[np.ix_(sel, sel)],
        source_ids=np.asarray(vertex_ids, dtype=np.int64),
        target_ids=np.asarray(vertex_ids, dtype=np.int64),
        normalized=matrix.normalized,
    )


def make_synth_provider(provider_id: str, mesh, rig, buffers_by_view, grid=DEFAULT_GRID, world_to_object=None):
    if provider_id == "synth-position":
        return SynthPositionProvider(mesh, rig, buffers_by_view, grid=grid, world_to_object=world_to_object)
    if provider_id == "synth-normal":
        return SynthNormalProvider(mesh, rig, buffers_by_view, grid=grid, world_to_object=world_to_object)
    raise ValueError(f"unknown synthetic provider {provider_id!r}")


# ---------------------------------------------------------------------------
# binary formats (little-endian)

_HEADER = struct.Struct("<4sIIIIIB3x")


def write_feature_map(path, fmap: FeatureMap) -> None:
    """Write the per-view patch-grid format: B23D header then float32 payload."""
    hp, wp = fmap.grid
    has_cls = fmap.class_token is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, fmap.view_id, hp, wp, fmap.dim, int(has_cls)))
        fh.write(np.ascontiguousarray(fmap.values, dtype="<f4").tobytes())
        if has_cls:
            fh.write(np.ascontiguousarray(fmap.class_token, dtype="<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FeatureFormatError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, view_id, hp, wp, d, has_cls = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    need = hp * wp * d * 4 + (d * 4 if has_cls else 0)
    payload = blob[_HEADER.size :]
    if len(payload) != need:
        raise FeatureFormatError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    values = np.frombuffer(payload[: hp * wp * d * 4], dtype="<f4").reshape(hp, wp, d)
    token = np.frombuffer(payload[hp * wp * d * 4 :], dtype="<f4") if has_cls else None
    return FeatureMap(view_id=view_id, values=values.copy(), class_token=None if token is None else token.copy())


def write_point_features(path, values: np.ndarray) -> None:
    """Point features export: u32 N, u32 d, then N*d float32."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_point_features(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise FeatureFormatError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", blob)
    if len(blob) != 8 + n * d * 4:
        raise FeatureFormatError(f"{path}: payload size mismatch")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(n, d).copy()
