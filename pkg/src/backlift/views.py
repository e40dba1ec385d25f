"""Sphere-slice camera rig construction, pinhole projection, and view manifests.

Camera convention used throughout: the camera looks down its -Z axis, camera
+Y is up, image pixels are y-down with the principal point at the image
center. Depth is the distance along the view direction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0])
FALLBACK_UP = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: square pixels, vertical field of view in radians."""

    width: int
    height: int
    fov: float
    principal: tuple[float, float] | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0.0 < self.fov < math.pi:
            raise ValueError("vertical fov must lie in (0, pi)")
        if self.principal is None:
            object.__setattr__(self, "principal", (self.width / 2.0, self.height / 2.0))

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / math.tan(self.fov / 2.0)


DEFAULT_INTRINSICS = Intrinsics(width=224, height=224, fov=math.radians(60.0))
DEFAULT_DISTANCE = 1.2


@dataclass
class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + T."""

    R: np.ndarray
    T: np.ndarray
    up_fallback: bool = False

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(self.R)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation determinant is not +1")

    @property
    def eye(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.T

    @property
    def view_dir(self) -> np.ndarray:
        """Unit vector from the eye toward the scene (camera -Z in world)."""
        return -self.R[2]


def look_at(eye, target, up=WORLD_UP) -> CameraPose:
    """Build a pose whose -Z axis points from ``eye`` toward ``target``.

    Falls back to +X (then +Y) as the up vector when ``up`` is parallel to
    the view direction; the pose records that the fallback engaged.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward /= norm

    fallback = False
    for candidate in (np.asarray(up, dtype=np.float64), FALLBACK_UP, WORLD_UP):
        side = np.cross(forward, candidate)
        if np.linalg.norm(side) > 1e-9:
            break
        fallback = True
    side /= np.linalg.norm(side)
    cam_up = np.cross(side, forward)
    R = np.stack([side, cam_up, -forward])
    return CameraPose(R=R, T=-R @ eye, up_fallback=fallback)


def project_points(points: np.ndarray, pose: CameraPose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) world points; returns pixel coords (N, 2) and depths (N,).

    Depth is the forward distance along the view direction; points with
    depth <= 0 are behind the camera and get NaN pixel coordinates.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts @ pose.R.T + pose.T
    lam = -cam[:, 2]
    cx, cy = intr.principal
    with np.errstate(divide="ignore", invalid="ignore"):
        x = cx + intr.focal * cam[:, 0] / lam
        y = cy - intr.focal * cam[:, 1] / lam
    xy = np.stack([x, y], axis=1)
    xy[lam <= 0.0] = np.nan
    return xy, lam


def project(point, pose: CameraPose, intr: Intrinsics) -> tuple[float, float, float]:
    """Scalar projection; pixel coords are NaN when the point is behind the camera."""
    xy, lam = project_points(np.asarray(point, dtype=np.float64)[None, :], pose, intr)
    return float(xy[0, 0]), float(xy[0, 1]), float(lam[0])


@dataclass
class ViewRig:
    """All cameras of a sphere-slice capture: n slices of 2(n+1) views plus poles."""

    views: list[tuple[int, CameraPose]]
    intrinsics: Intrinsics
    n_slices: int
    distance: float

    def __post_init__(self):
        expected = 2 * self.n_slices * (self.n_slices + 1) + 2
        if len(self.views) != expected:
            raise ValueError(f"rig has {len(self.views)} views, expected {expected}")
        for _, pose in self.views:
            if abs(np.linalg.norm(pose.eye) - self.distance) > 1e-9:
                raise ValueError("camera eye not at the configured distance")

    def __len__(self) -> int:
        return len(self.views)

    @property
    def view_ids(self) -> list[int]:
        return [vid for vid, _ in self.views]

    def pose(self, view_id: int) -> CameraPose:
        for vid, pose in self.views:
            if vid == view_id:
                return pose
        raise KeyError(f"no view {view_id} in rig")


def sample_viewpoints(n_slices: int, distance: float = DEFAULT_DISTANCE, intrinsics: Intrinsics = DEFAULT_INTRINSICS) -> ViewRig:
    """Place cameras on n horizontal slices of a sphere plus top and bottom views.

    Slice i of n sits at elevation -pi/2 + i*pi/(n+1) and carries 2(n+1)
    equiangular azimuths starting at zero; every camera looks at the origin.
    Total view count is 2n(n+1) + 2.
    """
    if n_slices < 0:
        raise ValueError("n_slices must be non-negative")
    if distance <= 0.0:
        raise ValueError("camera distance must be positive")
    if distance <= 0.5 * math.sqrt(3.0):
        warnings.warn(
            f"camera distance {distance} may clip a unit-box object (needs > {0.5 * math.sqrt(3.0):.4f})",
            stacklevel=2,
        )

    views: list[tuple[int, CameraPose]] = []
    origin = np.zeros(3)
    vid = 0
    per_slice = 2 * (n_slices + 1)
    for i in range(1, n_slices + 1):
        theta = -math.pi / 2.0 + i * math.pi / (n_slices + 1)
        for j in range(per_slice):
            phi = 2.0 * math.pi * j / per_slice
            eye = distance * np.array(
                [math.cos(theta) * math.cos(phi), math.sin(theta), math.cos(theta) * math.sin(phi)]
            )
            views.append((vid, look_at(eye, origin)))
            vid += 1
    for sign in (1.0, -1.0):
        eye = np.array([0.0, sign * distance, 0.0])
        views.append((vid, look_at(eye, origin)))
        vid += 1
    return ViewRig(views=views, intrinsics=intrinsics, n_slices=n_slices, distance=distance)


def image_name(view_id: int) -> str:
    return f"view_{view_id:03d}.png"


def write_manifest(path, rig: ViewRig, image_names: dict[int, str] | None = None) -> None:
    """Write one ``view`` record per camera; field order is the format contract."""
    intr = rig.intrinsics
    lines = []
    for vid, pose in rig.views:
        eye = pose.eye
        name = image_names[vid] if image_names else image_name(vid)
        fields = (
            f"view {vid} "
            f"eye {eye[0]:.17g} {eye[1]:.17g} {eye[2]:.17g} "
            f"R {' '.join(f'{v:.17g}' for v in pose.R.reshape(-1))} "
            f"T {' '.join(f'{v:.17g}' for v in pose.T)} "
            f"intrinsics {intr.width} {intr.height} {intr.fov:.17g} "
            f"image {name}"
        )
        lines.append(fields)
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ManifestEntry:
    view_id: int
    pose: CameraPose
    intrinsics: Intrinsics
    image: str


@dataclass
class ManifestRig:
    """Camera set reconstructed from a manifest; duck-typed like ViewRig."""

    views: list[tuple[int, CameraPose]]
    intrinsics: Intrinsics
    images: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.views)

    @property
    def view_ids(self) -> list[int]:
        return [vid for vid, _ in self.views]

    def pose(self, view_id: int) -> CameraPose:
        for vid, pose in self.views:
            if vid == view_id:
                return pose
        raise KeyError(f"no view {view_id} in rig")


def rig_from_manifest(entries: list["ManifestEntry"]) -> ManifestRig:
    return ManifestRig(
        views=[(e.view_id, e.pose) for e in entries],
        intrinsics=entries[0].intrinsics,
        images={e.view_id: e.image for e in entries},
    )


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a view manifest; raises ValueError on malformed records."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        tags = ["view", "eye", "R", "T", "intrinsics", "image"]
        widths = [1, 3, 9, 3, 3, 1]
        pos = 0
        values: dict[str, list[str]] = {}
        for tag, width in zip(tags, widths):
            if pos >= len(parts) or parts[pos] != tag:
                raise ValueError(f"{path}:{lineno}: expected field {tag!r}")
            values[tag] = parts[pos + 1 : pos + 1 + width]
            pos += 1 + width
        vid = int(values["view"][0])
        R = np.array([float(v) for v in values["R"]]).reshape(3, 3)
        T = np.array([float(v) for v in values["T"]])
        w, h, fov = values["intrinsics"]
        intr = Intrinsics(width=int(w), height=int(h), fov=float(fov))
        entries.append(ManifestEntry(view_id=vid, pose=CameraPose(R=R, T=T), intrinsics=intr, image=values["image"][0]))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries
