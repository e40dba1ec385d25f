"""Software z-buffer rasterization: depth/face-id buffers, visibility, shaded renders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.sparse import csr_matrix

from .geometry import TriangleMesh
from .views import CameraPose, Intrinsics, project_points

DEPTH_TIE_EPS = 1e-12
MIN_DEPTH = 1e-9
ALBEDO = 0.7
BACKGROUND = 1.0
# cap on in-flight (face, pixel) candidates per rasterization chunk
_CHUNK_BUDGET = 4_000_000


@dataclass
class FrameBuffers:
    """Per-view depth (+inf empty) and face-id (-1 empty) buffers."""

    depth: np.ndarray
    face_id: np.ndarray
    view_id: int

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


@dataclass
class VisibilityMask:
    """Boolean points x views matrix; a zero row marks a never-visible point."""

    mask: np.ndarray
    view_ids: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def never_visible(self) -> np.ndarray:
        return self.counts == 0


def _edge(ux, uy, vx, vy, px, py):
    return (vx - ux) * (py - uy) - (vy - uy) * (px - ux)


def _boundary_owned(dx, dy):
    # top-left rule for E>0-oriented triangles in y-down pixel coordinates
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize(mesh: TriangleMesh, pose: CameraPose, intr: Intrinsics, view_id: int = 0) -> FrameBuffers:
    """Project every triangle and z-buffer perspective-correct depths.

    Pixels are tested at their centers with a top-left fill rule, the nearest
    depth wins, and depth ties within 1e-12 resolve to the lower face id.
    There is no backface culling; triangles with any vertex at depth <= 0
    are skipped entirely.
    """
    H, W = intr.height, intr.width
    xy, lam = project_points(mesh.vertices, pose, intr)

    f = mesh.faces
    tri_xy = xy[f].astype(np.float64)
    tri_lam = lam[f]
    keep = (tri_lam > MIN_DEPTH).all(axis=1)

    a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = area2 < 0
    tri_xy[flip] = tri_xy[flip][:, [0, 2, 1]]
    tri_lam = np.where(flip[:, None], tri_lam[:, [0, 2, 1]], tri_lam)
    area2 = np.abs(area2)
    keep &= area2 > 1e-14

    with np.errstate(invalid="ignore"):
        minx = tri_xy[:, :, 0].min(axis=1)
        maxx = tri_xy[:, :, 0].max(axis=1)
        miny = tri_xy[:, :, 1].min(axis=1)
        maxy = tri_xy[:, :, 1].max(axis=1)
        keep &= (maxx >= 0) & (minx < W) & (maxy >= 0) & (miny < H)
    minx, maxx, miny, maxy = (np.where(keep, v, 0.0) for v in (minx, maxx, miny, maxy))

    face_idx = np.flatnonzero(keep)
    cand_pix: list[np.ndarray] = []
    cand_depth: list[np.ndarray] = []
    cand_face: list[np.ndarray] = []

    x0 = np.clip(np.floor(minx - 0.5), 0, W - 1).astype(np.int64)
    x1 = np.clip(np.ceil(maxx - 0.5), 0, W - 1).astype(np.int64)
    y0 = np.clip(np.floor(miny - 0.5), 0, H - 1).astype(np.int64)
    y1 = np.clip(np.ceil(maxy - 0.5), 0, H - 1).astype(np.int64)
    bbox_counts = np.where(keep, (x1 - x0 + 1) * (y1 - y0 + 1), 0)

    start = 0
    while start < len(face_idx):
        stop = start
        budget = 0
        while stop < len(face_idx) and (budget == 0 or budget + bbox_counts[face_idx[stop]] <= _CHUNK_BUDGET):
            budget += bbox_counts[face_idx[stop]]
            stop += 1
        chunk = face_idx[start:stop]
        start = stop

        counts = bbox_counts[chunk]
        total = int(counts.sum())
        if total == 0:
            continue
        rep = np.repeat(np.arange(len(chunk)), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        widths = (x1[chunk] - x0[chunk] + 1)[rep]
        px = x0[chunk][rep] + offsets % widths
        py = y0[chunk][rep] + offsets // widths
        pcx = px + 0.5
        pcy = py + 0.5

        t = chunk[rep]
        ax, ay = tri_xy[t, 0, 0], tri_xy[t, 0, 1]
        bx, by = tri_xy[t, 1, 0], tri_xy[t, 1, 1]
        cx_, cy_ = tri_xy[t, 2, 0], tri_xy[t, 2, 1]
        w0 = _edge(bx, by, cx_, cy_, pcx, pcy)
        w1 = _edge(cx_, cy_, ax, ay, pcx, pcy)
        w2 = _edge(ax, ay, bx, by, pcx, pcy)
        inside = (
            ((w0 > 0) | ((w0 == 0) & _boundary_owned(cx_ - bx, cy_ - by)))
            & ((w1 > 0) | ((w1 == 0) & _boundary_owned(ax - cx_, ay - cy_)))
            & ((w2 > 0) | ((w2 == 0) & _boundary_owned(bx - ax, by - ay)))
        )
        if not inside.any():
            continue
        t = t[inside]
        inv = (
            w0[inside] / area2[t] / tri_lam[t, 0]
            + w1[inside] / area2[t] / tri_lam[t, 1]
            + w2[inside] / area2[t] / tri_lam[t, 2]
        )
        cand_pix.append(py[inside] * W + px[inside])
        cand_depth.append(1.0 / inv)
        cand_face.append(t)

    depth_buf = np.full(H * W, np.inf)
    face_buf = np.full(H * W, -1, dtype=np.int64)
    if cand_pix:
        pix = np.concatenate(cand_pix)
        dep = np.concatenate(cand_depth)
        fid = np.concatenate(cand_face)
        order = np.lexsort((fid, dep, pix))
        pix, dep, fid = pix[order], dep[order], fid[order]
        uniq, first = np.unique(pix, return_index=True)
        dmin = np.full(H * W, np.inf)
        dmin[uniq] = dep[first]
        tied = dep <= dmin[pix] + DEPTH_TIE_EPS
        pix, dep, fid = pix[tied], dep[tied], fid[tied]
        order = np.lexsort((dep, fid, pix))
        pix, dep, fid = pix[order], dep[order], fid[order]
        uniq, first = np.unique(pix, return_index=True)
        depth_buf[uniq] = dep[first]
        face_buf[uniq] = fid[first]

    return FrameBuffers(depth=depth_buf.reshape(H, W), face_id=face_buf.reshape(H, W), view_id=view_id)


def _vertex_face_incidence(mesh: TriangleMesh) -> csr_matrix:
    m = mesh.n_faces
    rows = mesh.faces.reshape(-1)
    cols = np.repeat(np.arange(m), 3)
    return csr_matrix((np.ones(3 * m, dtype=bool), (rows, cols)), shape=(mesh.n_vertices, m))


def point_visibility(
    mesh: TriangleMesh,
    vertex_ids: np.ndarray,
    buffers: FrameBuffers,
    pose: CameraPose,
    intr: Intrinsics,
    eps_rel: float = 1e-3,
    eps_abs: float = 1e-3,
    incidence: csr_matrix | None = None,
) -> np.ndarray:
    """One visibility column: in-frame, in front, and depth-test (or incident-face) pass.

    A point passes if the buffer face at its pixel is incident to its vertex,
    or if its depth is within ``depth * (1 + eps_rel) + eps_abs`` of the buffer.
    """
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    xy, lam = project_points(mesh.vertices[vertex_ids], pose, intr)
    H, W = intr.height, intr.width

    visible = np.zeros(len(vertex_ids), dtype=bool)
    infront = lam > 0
    px = np.full(len(vertex_ids), -1, dtype=np.int64)
    py = np.full(len(vertex_ids), -1, dtype=np.int64)
    px[infront] = np.floor(xy[infront, 0]).astype(np.int64)
    py[infront] = np.floor(xy[infront, 1]).astype(np.int64)
    inframe = infront & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    if not inframe.any():
        return visible

    idx = np.flatnonzero(inframe)
    fid = buffers.face_id[py[idx], px[idx]]
    dep = buffers.depth[py[idx], px[idx]]
    covered = fid >= 0

    # empty pixels have depth +inf, so an unoccluded sliver point passes
    passes_depth = lam[idx] <= dep * (1.0 + eps_rel) + eps_abs
    inc = incidence if incidence is not None else _vertex_face_incidence(mesh)
    passes_incident = np.zeros(len(idx), dtype=bool)
    cov = np.flatnonzero(covered)
    if len(cov):
        passes_incident[cov] = np.asarray(
            inc[vertex_ids[idx[cov]], fid[cov]]
        ).reshape(-1)
    visible[idx] = passes_depth | passes_incident
    return visible


def compute_visibility(
    mesh: TriangleMesh,
    rig,
    buffers_by_view: dict[int, FrameBuffers],
    vertex_ids: np.ndarray | None = None,
    eps_rel: float = 1e-3,
    eps_abs: float = 1e-3,
) -> VisibilityMask:
    """Stack per-view visibility columns in ascending view-id order."""
    if vertex_ids is None:
        vertex_ids = np.arange(mesh.n_vertices, dtype=np.int64)
    inc = _vertex_face_incidence(mesh)
    view_ids = sorted(buffers_by_view)
    cols = []
    for vid in view_ids:
        pose = rig.pose(vid)
        cols.append(
            point_visibility(
                mesh, vertex_ids, buffers_by_view[vid], pose, rig.intrinsics,
                eps_rel=eps_rel, eps_abs=eps_abs, incidence=inc,
            )
        )
    return VisibilityMask(mask=np.stack(cols, axis=1), view_ids=np.asarray(view_ids, dtype=np.int64))


def unproject_pixels(px: np.ndarray, py: np.ndarray, depth: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """World positions of pixel centers at the given depths."""
    cx, cy = intr.principal
    lam = np.asarray(depth, dtype=np.float64)
    xc = (px + 0.5 - cx) * lam / intr.focal
    yc = -(py + 0.5 - cy) * lam / intr.focal
    cam = np.stack([xc, yc, -lam], axis=-1)
    return (cam - pose.T) @ pose.R


def render_shaded(mesh: TriangleMesh, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Grayscale Lambertian render with the point light at the eye.

    Two-sided shading (|n.l|), constant albedo 0.7, white background;
    output is uint8 (H, W), byte-exact for fixed inputs.
    """
    buffers = rasterize(mesh, pose, intr)
    img = np.full((intr.height, intr.width), BACKGROUND)
    ys, xs = np.nonzero(buffers.covered)
    if len(ys):
        world = unproject_pixels(xs.astype(np.float64), ys.astype(np.float64), buffers.depth[ys, xs], pose, intr)
        n = mesh.face_normals[buffers.face_id[ys, xs]]
        to_eye = pose.eye - world
        to_eye /= np.linalg.norm(to_eye, axis=1, keepdims=True)
        img[ys, xs] = ALBEDO * np.abs(np.sum(n * to_eye, axis=1))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(image, mode="L").save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(Path(path)).convert("L"))
